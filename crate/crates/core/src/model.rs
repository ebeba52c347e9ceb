//! The MNIST classifier: a stack of BitLinear layers with ReLU in between.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::layer::{BitLinear, LayerError, LayerMode, LayerOptions, LayerParamIds, TernaryLayer};
use crate::quant::{Measure, QuantConfig, QuantError};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl From<crate::tensor::TensorError> for ModelError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Layer(e.into())
    }
}

impl From<crate::autodiff::AutodiffError> for ModelError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Layer(e.into())
    }
}

/// Precision of every layer in a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkMode {
    #[serde(rename = "16")]
    FullPrecision16,
    #[serde(rename = "mean")]
    TernaryMean,
    #[serde(rename = "median")]
    TernaryMedian,
}

impl NetworkMode {
    pub const ALL: [NetworkMode; 3] = [Self::FullPrecision16, Self::TernaryMean, Self::TernaryMedian];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FullPrecision16 => "16",
            Self::TernaryMean => "mean",
            Self::TernaryMedian => "median",
        }
    }

    pub fn layer_mode(self) -> LayerMode {
        match self {
            Self::FullPrecision16 => LayerMode::FullPrecision16,
            _ => LayerMode::Ternary,
        }
    }

    /// Weight measure; the full-precision mode never quantizes, so it reports
    /// the default.
    pub fn measure(self) -> Measure {
        match self {
            Self::TernaryMedian => Measure::Median,
            _ => Measure::Mean,
        }
    }

    pub fn is_ternary(self) -> bool {
        self != Self::FullPrecision16
    }

    pub fn code(self) -> u8 {
        match self {
            Self::FullPrecision16 => 0,
            Self::TernaryMean => 1,
            Self::TernaryMedian => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for NetworkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetworkMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "16" | "fp16" | "full" => Ok(Self::FullPrecision16),
            "mean" | "1.58-mean" => Ok(Self::TernaryMean),
            "median" | "1.58-median" => Ok(Self::TernaryMedian),
            _ => Err(format!("unknown mode {s:?} (expected 16, mean or median)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub mode: NetworkMode,
    pub bias: bool,
    pub bias_after_dequant: bool,
    /// LayerNorm at the input of every layer.
    pub norm: bool,
    pub bits: u32,
    pub epsilon: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![784, 128, 64, 10],
            mode: NetworkMode::TernaryMean,
            bias: true,
            bias_after_dequant: false,
            norm: true,
            bits: 8,
            epsilon: 1e-5,
        }
    }
}

impl ModelSpec {
    pub fn with_mode(mode: NetworkMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn quant(&self) -> Result<QuantConfig, ModelError> {
        Ok(QuantConfig::new(self.bits, self.mode.measure(), self.epsilon)?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.len() < 2 {
            return Err(ModelError::InvalidSpec("need at least input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("zero width in {:?}", self.widths)));
        }
        self.quant()?;
        Ok(())
    }

    /// Linear weights plus biases; LayerNorm parameters are counted by
    /// [`ModelSpec::norm_parameter_count`].
    pub fn parameter_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    pub fn norm_parameter_count(&self) -> usize {
        if self.norm {
            self.widths[..self.widths.len() - 1].iter().map(|w| 2 * w).sum()
        } else {
            0
        }
    }

    fn layer_options(&self) -> Result<LayerOptions, ModelError> {
        Ok(LayerOptions {
            mode: self.mode.layer_mode(),
            quant: self.quant()?,
            bias: self.bias,
            norm: self.norm,
            bias_after_dequant: self.bias_after_dequant,
        })
    }
}

/// Anything that maps `[batch, features]` inputs to class logits.
pub trait Predictor {
    fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError>;

    fn predict(&self, input: &Tensor<f32>) -> Result<Vec<usize>, ModelError> {
        Ok(self.logits(input)?.argmax_rows()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f32> {
    pub spec: ModelSpec,
    pub layers: Vec<BitLinear<T>>,
}

impl<T: Scalar> Classifier<T> {
    /// Initializes every layer from its own stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let opts = spec.layer_options()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| BitLinear::new(w[0], w[1], opts, &mut seed::rng_for(seed, "init", i as u64)))
            .collect();
        Ok(Self { spec, layers })
    }

    /// Assembles a classifier from existing layers, checking that they chain.
    pub fn from_layers(spec: ModelSpec, layers: Vec<BitLinear<T>>) -> Result<Self, ModelError> {
        spec.validate()?;
        let widths: Vec<usize> = layers
            .first()
            .map(|l| l.in_features())
            .into_iter()
            .chain(layers.iter().map(|l| l.out_features()))
            .collect();
        if widths != spec.widths {
            return Err(ModelError::InvalidSpec(format!(
                "layers chain as {widths:?}, spec says {:?}",
                spec.widths
            )));
        }
        Ok(Self { spec, layers })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn register(&self, tape: &mut Tape<T>) -> Vec<LayerParamIds> {
        self.layers.iter().map(|l| l.register(tape)).collect()
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, ids: &[LayerParamIds], input: NodeId) -> Result<NodeId, ModelError> {
        let mut h = input;
        for (i, (layer, lid)) in self.layers.iter().zip(ids).enumerate() {
            h = layer.forward_on_tape(tape, lid, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.data().iter().all(|v| v.is_finite())
                && l.bias.as_ref().is_none_or(|b| b.data().iter().all(|v| v.is_finite()))
        })
    }
}

impl Classifier<f32> {
    /// Quantizes every layer once and packs it for the integer kernel.
    pub fn export(&self) -> Result<TernaryClassifier, ModelError> {
        if !self.spec.mode.is_ternary() {
            return Err(LayerError::NotTernary.into());
        }
        Ok(TernaryClassifier {
            mode: self.spec.mode,
            layers: self.layers.iter().map(BitLinear::export).collect::<Result<_, _>>()?,
        })
    }
}

impl Predictor for Classifier<f32> {
    fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.forward(input)
    }
}

/// Inference-only network whose matmuls all run on packed ternary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryClassifier {
    pub mode: NetworkMode,
    pub layers: Vec<TernaryLayer>,
}

impl TernaryClassifier {
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers
            .first()
            .map(|l| l.in_features())
            .into_iter()
            .chain(self.layers.iter().map(|l| l.out_features()))
            .collect()
    }
}

impl Predictor for TernaryClassifier {
    fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.forward(input)
    }
}
