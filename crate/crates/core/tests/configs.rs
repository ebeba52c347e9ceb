use std::path::Path;

use bitlinear::config::RunConfigFile;
use bitlinear::model::{ModelSpec, NetworkMode};

#[test]
fn shipped_configs_parse_and_match_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, mode) in [
        ("mnist-mean.json", NetworkMode::TernaryMean),
        ("mnist-median.json", NetworkMode::TernaryMedian),
        ("mnist-16.json", NetworkMode::FullPrecision16),
    ] {
        let cfg = RunConfigFile::load(&dir.join(file)).unwrap();
        assert_eq!(cfg.model_spec(), ModelSpec::with_mode(mode), "{file}");
        assert_eq!(cfg.train_config(), Default::default(), "{file}");
        assert_eq!(cfg.data, Default::default(), "{file}");
    }
}
