// Trains the default 784-128-64-10 classifier on MNIST and prints per-epoch
// metrics.
//
// ```text
// cargo run --release -p bitlinear --example train_mnist -- [mode] [lr] [wd] [epochs]
// ```
//
// `mode` is `16`, `mean` or `median`. Set `BITLINEAR_DECAY=coupled` for
// L2-style decay and `BITLINEAR_DECAY_SCOPE=all` to decay every parameter.
// Data is read from `BITLINEAR_MNIST_DIR` or `data/mnist`.

use bitlinear::data::{locate_mnist, Mnist};
use bitlinear::model::{ModelSpec, NetworkMode};
use bitlinear::optim::{DecayMode, DecayScope};
use bitlinear::train::{train, TrainConfig};

type Error = Box<dyn std::error::Error>;

fn load() -> Result<Option<Mnist>, Error> {
    Ok(match locate_mnist() {
        Some(dir) => Some(Mnist::load_dir(&dir)?),
        None => None,
    })
}

fn run(mnist: &Mnist, spec: &ModelSpec, cfg: &TrainConfig, train_limit: usize) -> Result<f64, Error> {
    let train_set = mnist.train.head(train_limit)?;
    println!(
        "mode={} lr={} wd={} decay={:?}/{:?} params={} samples={}",
        spec.mode,
        cfg.lr,
        cfg.weight_decay,
        cfg.decay_mode,
        cfg.decay_scope,
        spec.parameter_count(),
        train_set.len()
    );
    let (_, metrics) = train(spec, cfg, &train_set, &mnist.test, |e| {
        println!("epoch {:>2}  loss {:.4}  acc {:.2}%  {:.1}s", e.epoch, e.train_loss, e.test_acc, e.seconds);
    })?;
    let acc = metrics.final_accuracy().unwrap_or(0.0);
    println!("final accuracy {acc:.2}%");
    Ok(acc)
}

/// One epoch on the first 5000 training images.
pub fn run_example() -> Result<(), Error> {
    let Some(mnist) = load()? else {
        println!("MNIST not found; run `bitlinear fetch` first");
        return Ok(());
    };
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let acc = run(&mnist, &ModelSpec::default(), &cfg, 5000)?;
    if acc < 80.0 {
        return Err(format!("one epoch on 5000 images reached only {acc:.2}%").into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Error> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: NetworkMode = args.first().map_or(Ok(NetworkMode::TernaryMean), |s| s.parse())?;
    let lr: f64 = args.get(1).map_or(Ok(0.001), |s| s.parse())?;
    let wd: f64 = args.get(2).map_or(Ok(0.0), |s| s.parse())?;
    let epochs: usize = args.get(3).map_or(Ok(10), |s| s.parse())?;
    let decay_mode = match std::env::var("BITLINEAR_DECAY").as_deref() {
        Ok("coupled") => DecayMode::Coupled,
        _ => DecayMode::Decoupled,
    };
    let decay_scope = match std::env::var("BITLINEAR_DECAY_SCOPE").as_deref() {
        Ok("all") => DecayScope::All,
        _ => DecayScope::Weights,
    };
    let norm = std::env::var_os("BITLINEAR_NO_NORM").is_none();
    let mnist = load()?.ok_or("MNIST not found; run `bitlinear fetch` first")?;
    let spec = ModelSpec { norm, ..ModelSpec::with_mode(mode) };
    let cfg = TrainConfig { lr, weight_decay: wd, epochs, decay_mode, decay_scope, ..TrainConfig::default() };
    run(&mnist, &spec, &cfg, usize::MAX)?;
    Ok(())
}
