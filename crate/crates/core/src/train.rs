//! Training loop, evaluation and the learning-rate / weight-decay sweep.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::data::{BatchIterator, DataError, Dataset};
use crate::layer::LayerError;
use crate::model::{Classifier, ModelError, ModelSpec, NetworkMode, Predictor};
use crate::optim::{Adam, AdamConfig, DecayMode, DecayScope};
use crate::quant::QuantError;
use crate::tensor::{Tensor, TensorError};

pub const LR_GRID: [f64; 5] = [0.0001, 0.001, 0.01, 0.05, 0.1];
pub const WD_GRID: [f64; 4] = [0.0, 0.01, 0.05, 0.10];

/// Training loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },
    #[error("evaluation set is empty")]
    EmptyTestSet,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        Self::Model(e.into())
    }
}

impl TrainError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::Diverged { .. })
    }
}

fn non_finite_reason(e: &ModelError) -> Option<String> {
    let tensor = |t: &TensorError| matches!(t, TensorError::NonFinite(_));
    let quant = |q: &QuantError| match q {
        QuantError::NonFiniteInput(_) | QuantError::BadScale { .. } => true,
        QuantError::Tensor(t) => tensor(t),
        QuantError::InvalidConfig(_) => false,
    };
    let hit = match e {
        ModelError::Layer(LayerError::NonFiniteWeights) => true,
        ModelError::Layer(LayerError::Tensor(t)) => tensor(t),
        ModelError::Layer(LayerError::Quant(q)) | ModelError::Quant(q) => quant(q),
        ModelError::Layer(LayerError::Autodiff(AutodiffError::Tensor(t))) => tensor(t),
        _ => false,
    };
    hit.then(|| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub decay_scope: DecayScope,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.0,
            decay_mode: DecayMode::default(),
            decay_scope: DecayScope::default(),
            epochs: 10,
            batch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean cross-entropy over the epoch.
    pub train_loss: f64,
    /// Percent correct on the evaluation split after the epoch.
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,test_acc,seconds";

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.3}", e.epoch, e.train_loss, e.test_acc, e.seconds);
        }
        s
    }
}

/// Percent of samples whose arg-max logit equals the label.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let correct = count_correct(model, data, batch_size)?;
    Ok(100.0 * correct as f64 / data.len() as f64)
}

pub fn count_correct<P: Predictor + ?Sized>(model: &P, data: &Dataset, batch_size: usize) -> Result<usize, TrainError> {
    Ok(predict_all(model, data, batch_size)?
        .iter()
        .zip(&data.labels)
        .filter(|(&p, &l)| p == l as usize)
        .count())
}

/// Predicted labels for every sample, in dataset order.
pub fn predict_all<P: Predictor + ?Sized>(model: &P, data: &Dataset, batch_size: usize) -> Result<Vec<usize>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch.into());
    }
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let x = data.images.gather_rows(chunk)?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}

/// Trains from a fresh initialization. `on_epoch` sees each epoch's metrics
/// as soon as they are available.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Classifier, RunMetrics), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    if test_set.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut model = Classifier::<f32>::new(spec.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.adam());
    let mut batches = BatchIterator::new(train_set, cfg.batch_size, cfg.seed)?;
    let mut tape = Tape::<f32>::new();
    let mut metrics = RunMetrics::default();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0f64;
        for (step, (x, labels)) in batches.next_epoch().enumerate() {
            let diverged = |reason: String| TrainError::Diverged { epoch, step, reason };
            let loss = train_step(&mut model, &mut opt, cfg.decay_scope, &mut tape, x, &labels).map_err(|e| match &e {
                TrainError::Model(m) => match non_finite_reason(m) {
                    Some(r) => diverged(r),
                    None => e,
                },
                _ => e,
            })?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(diverged(format!("training loss {loss}")));
            }
            if !model.all_finite() {
                return Err(diverged("non-finite shadow weights".into()));
            }
            loss_sum += loss * labels.len() as f64;
        }
        let test_acc = evaluate(&model, test_set, 1000)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.epochs.push(m);
    }
    Ok((model, metrics))
}

fn train_step(
    model: &mut Classifier,
    opt: &mut Adam,
    cfg_scope: DecayScope,
    tape: &mut Tape<f32>,
    x: Tensor<f32>,
    labels: &[usize],
) -> Result<f64, TrainError> {
    tape.clear();
    let ids = model.register(tape);
    let input = tape.constant(x);
    let logits = model.forward_on_tape(tape, &ids, input)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;

    opt.begin_step();
    let mut slot = 0;
    let all = cfg_scope == DecayScope::All;
    let mut apply = |param: &mut Tensor<f32>, id, decay: bool| {
        let g = grads.take(id).unwrap_or_else(|| Tensor::zeros(param.shape().to_vec()));
        opt.update(slot, param.data_mut(), g.data(), decay);
        slot += 1;
    };
    for (layer, lid) in model.layers.iter_mut().zip(&ids) {
        apply(&mut layer.weight, lid.weight, true);
        if let (Some(b), Some(id)) = (layer.bias.as_mut(), lid.bias) {
            apply(b, id, all);
        }
        if let (Some(n), Some(g), Some(b)) = (layer.norm.as_mut(), lid.norm_gain, lid.norm_bias) {
            apply(&mut n.gain, g, all);
            apply(&mut n.bias, b, all);
        }
    }
    Ok(loss_value)
}

/// Cartesian grid of modes, learning rates and weight decays.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub modes: Vec<NetworkMode>,
    pub lrs: Vec<f64>,
    pub wds: Vec<f64>,
}

impl SweepGrid {
    /// The full grid: every mode at every learning rate and weight decay.
    pub fn full() -> Self {
        Self {
            modes: NetworkMode::ALL.to_vec(),
            lrs: LR_GRID.to_vec(),
            wds: WD_GRID.to_vec(),
        }
    }

    pub fn cells(&self) -> Vec<(NetworkMode, f64, f64)> {
        let mut out = Vec::new();
        for &m in &self.modes {
            for &lr in &self.lrs {
                for &wd in &self.wds {
                    out.push((m, lr, wd));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    /// Did not finish: the divergence guard tripped.
    Dnf(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub mode: NetworkMode,
    pub lr: f64,
    pub wd: f64,
    pub status: CellStatus,
    pub metrics: Option<RunMetrics>,
}

impl SweepCell {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.as_ref().and_then(RunMetrics::final_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "mode,lr,wd,final_acc,status";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cells {
            let acc = c.final_accuracy().map(|a| format!("{a:.2}")).unwrap_or_default();
            let status = match c.status {
                CellStatus::Ok => "ok",
                CellStatus::Dnf(_) => "dnf",
            };
            let _ = writeln!(s, "{},{},{},{},{}", c.mode, c.lr, c.wd, acc, status);
        }
        s
    }

    /// Fixed-width table, one row per (mode, lr) and one column per wd.
    pub fn summary_table(&self) -> String {
        let mut wds: Vec<f64> = Vec::new();
        let mut rows: Vec<(NetworkMode, f64)> = Vec::new();
        for c in &self.cells {
            if !wds.contains(&c.wd) {
                wds.push(c.wd);
            }
            if !rows.contains(&(c.mode, c.lr)) {
                rows.push((c.mode, c.lr));
            }
        }
        let mut s = format!("{:<8}{:>8}", "mode", "lr");
        for wd in &wds {
            let _ = write!(s, "{:>10}", format!("wd={wd}"));
        }
        s.push('\n');
        for (mode, lr) in rows {
            let _ = write!(s, "{:<8}{:>8}", mode.as_str(), lr);
            for &wd in &wds {
                let cell = self.cells.iter().find(|c| c.mode == mode && c.lr == lr && c.wd == wd);
                let text = match cell {
                    Some(c) => match c.status {
                        CellStatus::Ok => format!("{:.2}", c.final_accuracy().unwrap_or(f64::NAN)),
                        CellStatus::Dnf(_) => "DNF".into(),
                    },
                    None => "-".into(),
                };
                let _ = write!(s, "{text:>10}");
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates every grid cell with the same seed. Divergent cells
/// are recorded as DNF; any other error aborts the sweep.
pub fn sweep(
    base_spec: &ModelSpec,
    base_cfg: &TrainConfig,
    grid: &SweepGrid,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_cell: impl FnMut(usize, &SweepCell),
) -> Result<SweepReport, TrainError> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut report = SweepReport::default();
    for (i, (mode, lr, wd)) in cells.into_iter().enumerate() {
        let spec = ModelSpec { mode, ..base_spec.clone() };
        let cfg = TrainConfig { lr, weight_decay: wd, ..*base_cfg };
        let cell = match train(&spec, &cfg, train_set, test_set, |_| {}) {
            Ok((_, metrics)) => SweepCell { mode, lr, wd, status: CellStatus::Ok, metrics: Some(metrics) },
            Err(e) if e.is_divergence() => SweepCell { mode, lr, wd, status: CellStatus::Dnf(e.to_string()), metrics: None },
            Err(e) => return Err(e),
        };
        on_cell(i, &cell);
        report.cells.push(cell);
    }
    Ok(report)
}
