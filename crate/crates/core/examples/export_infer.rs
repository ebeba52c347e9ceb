// Trains briefly, saves a checkpoint, exports packed ternary weights and
// checks that integer-kernel inference predicts exactly what the training
// forward pass predicts.
//
// ```text
// cargo run --release -p bitlinear --example export_infer -- [epochs]
// ```

use bitlinear::data::{locate_mnist, Mnist};
use bitlinear::model::ModelSpec;
use bitlinear::model_io::{export_ternary, load_checkpoint, load_ternary, save_checkpoint};
use bitlinear::train::{evaluate, predict_all, train, TrainConfig};

type Error = Box<dyn std::error::Error>;

fn run(epochs: usize, train_limit: usize) -> Result<(), Error> {
    let Some(dir) = locate_mnist() else {
        println!("MNIST not found; run `bitlinear fetch` first");
        return Ok(());
    };
    let mnist = Mnist::load_dir(&dir)?;
    let train_set = mnist.train.head(train_limit)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (model, _) = train(&ModelSpec::default(), &cfg, &train_set, &mnist.test, |_| {})?;

    let out = tempfile::tempdir()?;
    let ckpt = out.path().join("mnist.bl58");
    let packed = out.path().join("mnist.bl58t");
    save_checkpoint(&model, &ckpt)?;
    let reloaded = load_checkpoint(&ckpt)?;
    export_ternary(&reloaded, &packed)?;
    let inference = load_ternary(&packed)?;

    println!(
        "checkpoint {} bytes, ternary export {} bytes",
        std::fs::metadata(&ckpt)?.len(),
        std::fs::metadata(&packed)?.len()
    );
    let trained = predict_all(&model, &mnist.test, 500)?;
    let exported = predict_all(&inference, &mnist.test, 500)?;
    let mismatches = trained.iter().zip(&exported).filter(|(a, b)| a != b).count();
    println!(
        "accuracy: training forward {:.2}%, integer kernel {:.2}%, label mismatches {mismatches}",
        evaluate(&model, &mnist.test, 500)?,
        evaluate(&inference, &mnist.test, 500)?
    );
    if mismatches != 0 {
        return Err(format!("{mismatches} predictions differ after export").into());
    }
    Ok(())
}

pub fn run_example() -> Result<(), Error> {
    run(1, 3000)
}

#[allow(dead_code)]
fn main() -> Result<(), Error> {
    let epochs = std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?;
    run(epochs, usize::MAX)
}
