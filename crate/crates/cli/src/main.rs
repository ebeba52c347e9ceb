//! `bitlinear` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error,
//! 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use bitlinear::config::RunConfigFile;
use bitlinear::data::{self, Dataset, Mnist, Split, MNIST_FILES, MNIST_SHA256};
use bitlinear::kernel::{self, BenchShape};
use bitlinear::model::{NetworkMode, Predictor};
use bitlinear::model_io::{self, FileKind};
use bitlinear::selftest;
use bitlinear::train::{self, SweepGrid, TrainError, LR_GRID, WD_GRID};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

const DEFAULT_MIRROR: &str = "https://storage.googleapis.com/cvdf-datasets/mnist/";

#[derive(Parser)]
#[command(name = "bitlinear", version, about = "Ternary BitLinear training, export and kernel benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download the MNIST archives and verify their checksums.
    Fetch {
        #[arg(long, default_value = "data/mnist")]
        dest: PathBuf,
        /// Base URL holding the four `.gz` files.
        #[arg(long, default_value = DEFAULT_MIRROR)]
        mirror: String,
    },
    /// Train one model; writes the metrics CSV and a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint path (overrides output.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics CSV path (overrides output.metrics_csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train every cell of a mode x lr x wd grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Modes to sweep (default: the config's mode).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<NetworkMode>,
        /// Learning rates (default: the full grid).
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f64>,
        /// Weight decays (default: the full grid).
        #[arg(long, value_delimiter = ',')]
        wds: Vec<f64>,
        /// Summary CSV path.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        /// Directory for per-cell metrics CSVs.
        #[arg(long)]
        cell_dir: Option<PathBuf>,
    },
    /// Report test accuracy of a checkpoint or ternary export.
    Eval {
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Quantize and pack a ternary checkpoint for integer inference.
    Export {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the packed kernel against an f32 matmul.
    Bench {
        /// Shapes as BxKxN; repeatable.
        #[arg(long = "shape", default_values = ["128x784x128", "128x128x64", "1x4096x4096"])]
        shapes: Vec<BenchShape>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in consistency checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the four MNIST files (overrides the config's data paths).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<NetworkMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

/// Error classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Diverged(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<TrainError>() {
            Some(t) if t.is_divergence() => Failure::Diverged(e),
            Some(TrainError::InvalidConfig(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(args: &DataArgs) -> Result<RunConfigFile, Failure> {
    match &args.config {
        Some(p) => RunConfigFile::load(p).map_err(usage),
        None => Ok(RunConfigFile::default()),
    }
}

fn apply_overrides(cfg: &mut RunConfigFile, run: &RunArgs) -> Result<(), Failure> {
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = run.mode {
        cfg.model.mode = m;
        cfg.quant.measure = None;
    }
    if let Some(lr) = run.lr {
        cfg.train.lr = lr;
    }
    if let Some(wd) = run.wd {
        cfg.train.weight_decay = wd;
    }
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate().map_err(usage)
}

fn load_data(cfg: &RunConfigFile, args: &DataArgs) -> anyhow::Result<(Dataset, Dataset)> {
    if let Some(dir) = &args.data_dir {
        let m = Mnist::load_dir(dir).with_context(|| format!("loading MNIST from {}", dir.display()))?;
        return Ok((m.train, m.test));
    }
    let d = &cfg.data;
    let train = data::load_idx(&d.train_images, &d.train_labels, Split::Train).context("loading training split")?;
    let test = data::load_idx(&d.test_images, &d.test_labels, Split::Test).context("loading test split")?;
    Ok((train, test))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    model_io::write_atomic(path, contents.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_fetch(dest: &Path, mirror: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    for (name, expected) in MNIST_FILES.iter().zip(MNIST_SHA256) {
        let target = dest.join(format!("{name}.gz"));
        if target.is_file() && sha256_hex(&data::read_file(&target)?) == expected {
            eprintln!("{name}: present, checksum ok");
            continue;
        }
        let url = format!("{}/{name}.gz", mirror.trim_end_matches('/'));
        eprintln!("{name}: downloading {url}");
        let raw = ureq::get(&url)
            .call()
            .with_context(|| format!("GET {url}"))?
            .body_mut()
            .with_config()
            .limit(64 << 20)
            .read_to_vec()
            .with_context(|| format!("reading {url}"))?;
        let payload = data::maybe_gunzip(raw.clone()).with_context(|| format!("decompressing {url}"))?;
        let got = sha256_hex(&payload);
        if got != expected {
            bail!("{name}: checksum mismatch (expected {expected}, got {got})");
        }
        model_io::write_atomic(&target, &raw)?;
        eprintln!("{name}: ok");
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cmd_train(run: &RunArgs, out: Option<PathBuf>, metrics: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(&run.data)?;
    apply_overrides(&mut cfg, run)?;
    let (train_set, test_set) = load_data(&cfg, &run.data)?;
    let spec = cfg.model_spec();
    let tc = cfg.train_config();
    eprintln!(
        "training mode={} lr={} wd={} epochs={} seed={} ({} parameters)",
        spec.mode,
        tc.lr,
        tc.weight_decay,
        tc.epochs,
        tc.seed,
        spec.parameter_count()
    );
    let (model, m) = train::train(&spec, &tc, &train_set, &test_set, |e| {
        eprintln!("epoch {:>3}  loss {:.4}  acc {:.2}%  {:.1}s", e.epoch, e.train_loss, e.test_acc, e.seconds);
    })
    .map_err(anyhow::Error::from)?;
    let final_acc = m.final_accuracy().unwrap_or_default();
    println!("final_acc={final_acc:.2}");
    if let Some(p) = metrics.or(cfg.output.metrics_csv) {
        write_file(&p, &m.to_csv())?;
        eprintln!("metrics written to {}", p.display());
    }
    if let Some(p) = out.or(cfg.output.checkpoint) {
        model_io::save_checkpoint(&model, &p).map_err(anyhow::Error::from)?;
        eprintln!("checkpoint written to {}", p.display());
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, modes: Vec<NetworkMode>, lrs: Vec<f64>, wds: Vec<f64>, out: &Path, cell_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(&run.data)?;
    apply_overrides(&mut cfg, run)?;
    let grid = SweepGrid {
        modes: if modes.is_empty() { vec![cfg.model.mode] } else { modes },
        lrs: if lrs.is_empty() { LR_GRID.to_vec() } else { lrs },
        wds: if wds.is_empty() { WD_GRID.to_vec() } else { wds },
    };
    if grid.cells().is_empty() {
        return Err(usage(anyhow!("sweep grid is empty")));
    }
    let (train_set, test_set) = load_data(&cfg, &run.data)?;
    let total = grid.cells().len();
    let mut write_err = None;
    let report = train::sweep(&cfg.model_spec(), &cfg.train_config(), &grid, &train_set, &test_set, |i, cell| {
        match cell.final_accuracy() {
            Some(a) => eprintln!("[{}/{total}] mode={} lr={} wd={}: {a:.2}%", i + 1, cell.mode, cell.lr, cell.wd),
            None => eprintln!("[{}/{total}] mode={} lr={} wd={}: DNF", i + 1, cell.mode, cell.lr, cell.wd),
        }
        if let (Some(dir), Some(m)) = (&cell_dir, &cell.metrics) {
            let p = dir.join(format!("{}_lr{}_wd{}.csv", cell.mode, cell.lr, cell.wd));
            if let Err(e) = write_file(&p, &m.to_csv()) {
                write_err.get_or_insert(e);
            }
        }
    })
    .map_err(anyhow::Error::from)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    write_file(out, &report.to_csv())?;
    print!("{}", report.summary_table());
    eprintln!("summary written to {}", out.display());
    Ok(())
}

fn cmd_eval(model: &Path, args: &DataArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let kind = model_io::sniff(model).map_err(anyhow::Error::from)?;
    let predictor: Box<dyn Predictor> = match kind {
        FileKind::Checkpoint => Box::new(model_io::load_checkpoint(model).map_err(anyhow::Error::from)?),
        FileKind::Ternary => Box::new(model_io::load_ternary(model).map_err(anyhow::Error::from)?),
    };
    let (_, test_set) = load_data(&cfg, args)?;
    let acc = train::evaluate(predictor.as_ref(), &test_set, 1000).map_err(anyhow::Error::from)?;
    println!("accuracy={acc:.2}");
    Ok(())
}

fn cmd_export(checkpoint: &Path, out: &Path) -> Result<(), Failure> {
    let model = model_io::load_checkpoint(checkpoint).map_err(anyhow::Error::from)?;
    if !model.spec.mode.is_ternary() {
        return Err(usage(anyhow!("checkpoint is full precision (mode 16); only ternary models export")));
    }
    let exported = model_io::export_ternary(&model, out).map_err(anyhow::Error::from)?;
    let bytes: usize = exported.layers.iter().map(|l| l.packed.bytes().len()).sum();
    eprintln!("{} layers, {bytes} packed weight bytes, written to {}", exported.layers.len(), out.display());
    Ok(())
}

fn cmd_bench(shapes: &[BenchShape], reps: usize, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    if reps == 0 {
        return Err(usage(anyhow!("--reps must be at least 1")));
    }
    let report = kernel::bench(shapes, reps, seed).map_err(anyhow::Error::from)?;
    for r in &report.rows {
        eprintln!(
            "{:>16}  ternary {:>8.2} Gop/s  f32 {:>8.2} Gop/s  ratio {:.2}",
            r.shape.to_string(),
            r.ternary_gops,
            r.float_gops,
            r.ratio()
        );
    }
    match out {
        Some(p) => write_file(&p, &report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_selftest(seed: u64) -> Result<(), Failure> {
    let report = selftest::run_all(seed);
    for c in &report.checks {
        match &c.result {
            Ok(detail) => println!("PASS  {:<30} {detail} ({:.1}s)", c.name, c.seconds),
            Err(detail) => println!("FAIL  {:<30} {detail} ({:.1}s)", c.name, c.seconds),
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("self-test failed")))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fetch { dest, mirror } => cmd_fetch(&dest, &mirror).map_err(Failure::Runtime),
        Command::Train { run, out, metrics } => cmd_train(&run, out, metrics),
        Command::Sweep { run, modes, lrs, wds, out, cell_dir } => cmd_sweep(&run, modes, lrs, wds, &out, cell_dir),
        Command::Eval { model, data } => cmd_eval(&model, &data),
        Command::Export { checkpoint, out } => cmd_export(&checkpoint, &out),
        Command::Bench { shapes, reps, seed, out } => cmd_bench(&shapes, reps, seed, out),
        Command::Selftest { seed } => cmd_selftest(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("diverged: {e:#}");
            ExitCode::from(3)
        }
    }
}
