// Learning-rate / weight-decay sweep, printed as a summary table.
//
// ```text
// cargo run --release -p bitlinear --example sweep -- [epochs]
// ```
//
// The full-size run covers every mode at lr 0.001 with weight decays
// 0, 0.01 and 0.05, plus the lr 0.1 median cell.

use bitlinear::data::{locate_mnist, Mnist};
use bitlinear::model::{ModelSpec, NetworkMode};
use bitlinear::train::{sweep, SweepGrid, SweepReport, TrainConfig};

type Error = Box<dyn std::error::Error>;

fn run(grids: &[SweepGrid], epochs: usize, train_limit: usize) -> Result<(), Error> {
    let Some(dir) = locate_mnist() else {
        println!("MNIST not found; run `bitlinear fetch` first");
        return Ok(());
    };
    let mnist = Mnist::load_dir(&dir)?;
    let train_set = mnist.train.head(train_limit)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let mut all = SweepReport::default();
    for grid in grids {
        let report = sweep(&ModelSpec::default(), &cfg, grid, &train_set, &mnist.test, |_, c| {
            eprintln!("{} lr={} wd={}: {:?}", c.mode, c.lr, c.wd, c.final_accuracy());
        })?;
        all.cells.extend(report.cells);
    }
    print!("{}", all.summary_table());
    print!("{}", all.to_csv());
    Ok(())
}

pub fn run_example() -> Result<(), Error> {
    let grid = SweepGrid { modes: vec![NetworkMode::TernaryMean], lrs: vec![0.001], wds: vec![0.0, 0.05] };
    run(&[grid], 1, 2000)
}

#[allow(dead_code)]
fn main() -> Result<(), Error> {
    let epochs = std::env::args().nth(1).map_or(Ok(10), |s| s.parse())?;
    let grids = [
        SweepGrid { modes: NetworkMode::ALL.to_vec(), lrs: vec![0.001], wds: vec![0.0, 0.01, 0.05] },
        SweepGrid { modes: vec![NetworkMode::TernaryMedian], lrs: vec![0.1], wds: vec![0.0] },
    ];
    run(&grids, epochs, usize::MAX)
}
