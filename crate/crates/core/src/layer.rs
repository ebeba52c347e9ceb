//! The BitLinear layer.
//!
//! Forward pass in ternary mode:
//!
//! 1. layer-normalize the input rows,
//! 2. AbsMax-quantize each normalized row to `k`-bit integers,
//! 3. AbsMeasure-quantize the shadow weights to `{-1, 0, +1}`,
//! 4. multiply the integer matrices (`y_q = x_q W_q`, plus bias when it is
//!    placed before dequantization),
//! 5. rescale by `1 / (w_scale * x_scale)`.
//!
//! Training goes through the tape with straight-through nodes so gradients
//! land on the shadow weights; the resulting closed forms are
//! `dW = (x_q / x_scale)^T g` and `dx = g (W_q / w_scale)^T`.
//! [`BitLinear::forward`] and [`BitLinear::forward_on_tape`] perform the same
//! arithmetic in the same order and agree bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, NodeId, Tape};
use crate::kernel::{self, KernelError, PackedTernary};
use crate::quant::{
    dequant_divisors, quantize_activation_rows, quantize_weights, QuantConfig, QuantError,
    RowActivationQuant, TernaryWeights,
};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("input has {actual} features, layer expects {expected}")]
    InputWidth { expected: usize, actual: usize },
    #[error("shadow weights contain non-finite values")]
    NonFiniteWeights,
    #[error("export requires a ternary layer")]
    NotTernary,
}

pub type Result<T, E = LayerError> = std::result::Result<T, E>;

/// `FullPrecision16` skips steps 2-5 and acts as the unquantized baseline
/// (stored and computed at the tensor's native precision).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerMode {
    FullPrecision16,
    Ternary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T = f32> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(features: usize) -> Self {
        Self {
            gain: Tensor::full(vec![features], T::one()),
            bias: Tensor::zeros(vec![features]),
        }
    }
}

/// Construction options for [`BitLinear::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    pub mode: LayerMode,
    pub quant: QuantConfig,
    pub bias: bool,
    pub norm: bool,
    /// Add the bias after dequantization instead of to the integer product.
    pub bias_after_dequant: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            mode: LayerMode::Ternary,
            quant: QuantConfig::default(),
            bias: true,
            norm: true,
            bias_after_dequant: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitLinear<T = f32> {
    /// Shadow weights, `[in_features, out_features]`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub norm: Option<NormParams<T>>,
    pub quant: QuantConfig,
    pub mode: LayerMode,
    pub bias_after_dequant: bool,
}

/// Tape handles of a layer's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParamIds {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
    pub norm_gain: Option<NodeId>,
    pub norm_bias: Option<NodeId>,
}

/// Intermediate values of one ternary forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub normalized: Tensor<T>,
    pub activations: RowActivationQuant<T>,
    pub weights: TernaryWeights<T>,
    pub output: Tensor<T>,
}

/// Closed-form straight-through gradients of a ternary forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractGrads<T> {
    pub weight: Tensor<T>,
    pub normalized: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> BitLinear<T> {
    /// Shadow weights are drawn uniformly from `±sqrt(1 / in_features)`;
    /// biases start at zero, norm gain at one and norm bias at zero.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, opts: LayerOptions, rng: &mut R) -> Self {
        let bound = (1.0 / in_features.max(1) as f64).sqrt();
        let data = (0..in_features * out_features)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        Self {
            weight: Tensor::new(vec![in_features, out_features], data).expect("finite init"),
            bias: opts.bias.then(|| Tensor::zeros(vec![out_features])),
            norm: opts.norm.then(|| NormParams::identity(in_features)),
            quant: opts.quant,
            mode: opts.mode,
            bias_after_dequant: opts.bias_after_dequant,
        }
    }

    /// Builds a layer around explicit shadow weights (`[in, out]`).
    pub fn from_weights(weight: Tensor<T>, bias: Option<Tensor<T>>, norm: Option<NormParams<T>>, opts: LayerOptions) -> Result<Self> {
        let (inf, outf) = weight.dims2("BitLinear")?;
        if let Some(b) = &bias {
            if b.shape() != [outf] {
                return Err(TensorError::ShapeMismatch {
                    op: "BitLinear bias",
                    left: vec![outf],
                    right: b.shape().to_vec(),
                }
                .into());
            }
        }
        if let Some(n) = &norm {
            if n.gain.shape() != [inf] || n.bias.shape() != [inf] {
                return Err(TensorError::ShapeMismatch {
                    op: "BitLinear norm",
                    left: vec![inf],
                    right: n.gain.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(Self {
            weight,
            bias,
            norm,
            quant: opts.quant,
            mode: opts.mode,
            bias_after_dequant: opts.bias_after_dequant,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check(&self, input: &Tensor<T>) -> Result<()> {
        let (_, width) = input.dims2("BitLinear::forward")?;
        if width != self.in_features() {
            return Err(LayerError::InputWidth {
                expected: self.in_features(),
                actual: width,
            });
        }
        self.weight.ensure_finite("BitLinear").map_err(|_| LayerError::NonFiniteWeights)
    }

    fn normalize(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match &self.norm {
            Some(n) => autodiff::layer_norm(input, n.gain.data(), n.bias.data())?.0,
            None => input.clone(),
        })
    }

    /// Steps 4-5 given the (exact, integer-valued) product `y_q`.
    fn finish(&self, y_q: Tensor<T>, divisors: &[T]) -> Result<Tensor<T>> {
        Ok(match (&self.bias, self.bias_after_dequant) {
            (Some(b), false) => y_q.add_row_vector(b.data())?.div_rows(divisors)?,
            (Some(b), true) => y_q.div_rows(divisors)?.add_row_vector(b.data())?,
            (None, _) => y_q.div_rows(divisors)?,
        })
    }

    /// Tape-free forward pass.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(input)?;
        let normalized = self.normalize(input)?;
        match self.mode {
            LayerMode::FullPrecision16 => {
                let y = normalized.matmul(&self.weight)?;
                Ok(match &self.bias {
                    Some(b) => y.add_row_vector(b.data())?,
                    None => y,
                })
            }
            LayerMode::Ternary => Ok(self.forward_trace_from(normalized)?.output),
        }
    }

    /// Ternary forward pass that keeps the quantized intermediates.
    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check(input)?;
        if self.mode != LayerMode::Ternary {
            return Err(LayerError::NotTernary);
        }
        let normalized = self.normalize(input)?;
        self.forward_trace_from(normalized)
    }

    fn forward_trace_from(&self, normalized: Tensor<T>) -> Result<ForwardTrace<T>> {
        let activations = quantize_activation_rows(&normalized, &self.quant)?;
        let weights = quantize_weights(&self.weight, &self.quant)?;
        let y_q = activations
            .values
            .to_real::<T>()
            .matmul(&weights.values.to_real::<T>())?;
        let divisors = dequant_divisors(weights.w_scale, &activations.x_scales)?;
        let output = self.finish(y_q, &divisors)?;
        Ok(ForwardTrace {
            normalized,
            activations,
            weights,
            output,
        })
    }

    /// Closed-form gradients for upstream gradient `g` (`[batch, out]`):
    /// `dW = (x_q / x_scale)^T g`, `dx_hat = g (W_q / w_scale)^T`, and the bias
    /// gradient matching the configured bias placement.
    pub fn backward_contract(&self, trace: &ForwardTrace<T>, g: &Tensor<T>) -> Result<ContractGrads<T>> {
        let x_deq = trace
            .activations
            .values
            .to_real::<T>()
            .div_rows(&trace.activations.x_scales)?;
        let w_deq = trace
            .weights
            .values
            .to_real::<T>()
            .scalar_mul(T::one() / trace.weights.w_scale)?;
        let weight = x_deq.transpose()?.matmul(g)?;
        let normalized = g.matmul(&w_deq.transpose()?)?;
        let bias = match (&self.bias, self.bias_after_dequant) {
            (None, _) => None,
            (Some(_), true) => Some(g.sum_rows()?),
            (Some(_), false) => {
                let divisors = dequant_divisors(trace.weights.w_scale, &trace.activations.x_scales)?;
                Some(g.div_rows(&divisors)?.sum_rows()?)
            }
        };
        Ok(ContractGrads {
            weight,
            normalized,
            bias,
        })
    }

    /// Registers this layer's parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape<T>) -> LayerParamIds {
        LayerParamIds {
            weight: tape.param(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.param(b.clone())),
            norm_gain: self.norm.as_ref().map(|n| tape.param(n.gain.clone())),
            norm_bias: self.norm.as_ref().map(|n| tape.param(n.bias.clone())),
        }
    }

    /// Forward pass recorded on `tape` for training.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, ids: &LayerParamIds, input: NodeId) -> Result<NodeId> {
        self.check(tape.value(input))?;
        let normalized = match (ids.norm_gain, ids.norm_bias) {
            (Some(g), Some(b)) => tape.layer_norm(input, g, b)?,
            _ => input,
        };
        match self.mode {
            LayerMode::FullPrecision16 => {
                let y = tape.matmul(normalized, ids.weight)?;
                Ok(match ids.bias {
                    Some(b) => tape.add_row_vector(y, b)?,
                    None => y,
                })
            }
            LayerMode::Ternary => {
                let acts = quantize_activation_rows(tape.value(normalized), &self.quant)?;
                let weights = quantize_weights(tape.value(ids.weight), &self.quant)?;
                let divisors = dequant_divisors(weights.w_scale, &acts.x_scales)?;

                let x_surrogate = tape.mul_rows(normalized, acts.x_scales.clone())?;
                let x_q = tape.ste_through(acts.values.to_real(), x_surrogate)?;
                let w_surrogate = tape.scalar_mul(ids.weight, weights.w_scale)?;
                let w_q = tape.ste_through(weights.values.to_real(), w_surrogate)?;
                let y_q = tape.matmul(x_q, w_q)?;
                Ok(match (ids.bias, self.bias_after_dequant) {
                    (Some(b), false) => {
                        let y = tape.add_row_vector(y_q, b)?;
                        tape.div_rows(y, divisors)?
                    }
                    (Some(b), true) => {
                        let y = tape.div_rows(y_q, divisors)?;
                        tape.add_row_vector(y, b)?
                    }
                    (None, _) => tape.div_rows(y_q, divisors)?,
                })
            }
        }
    }
}

impl BitLinear<f32> {
    /// Freezes the current shadow weights into a packed inference layer.
    pub fn export(&self) -> Result<TernaryLayer> {
        if self.mode != LayerMode::Ternary {
            return Err(LayerError::NotTernary);
        }
        let q = quantize_weights(&self.weight, &self.quant)?;
        Ok(TernaryLayer {
            packed: PackedTernary::pack(&q.values, q.w_scale)?,
            bias: self.bias.as_ref().map(|b| b.data().to_vec()),
            norm: self.norm.clone(),
            quant: self.quant,
            bias_after_dequant: self.bias_after_dequant,
        })
    }
}

/// Inference-only layer backed by packed ternary weights and the integer
/// kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryLayer {
    pub packed: PackedTernary,
    pub bias: Option<Vec<f32>>,
    pub norm: Option<NormParams<f32>>,
    pub quant: QuantConfig,
    pub bias_after_dequant: bool,
}

impl TernaryLayer {
    pub fn in_features(&self) -> usize {
        self.packed.rows()
    }

    pub fn out_features(&self) -> usize {
        self.packed.cols()
    }

    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, width) = input.dims2("TernaryLayer::forward")?;
        if width != self.in_features() {
            return Err(LayerError::InputWidth {
                expected: self.in_features(),
                actual: width,
            });
        }
        let normalized = match &self.norm {
            Some(n) => autodiff::layer_norm(input, n.gain.data(), n.bias.data())?.0,
            None => input.clone(),
        };
        let acts = quantize_activation_rows(&normalized, &self.quant)?;
        let y_q = kernel::ternary_matmul(&acts.values_i8()?, &self.packed)?;
        let divisors = dequant_divisors(self.packed.w_scale(), &acts.x_scales)?;
        let y = y_q.to_real::<f32>();
        Ok(match (&self.bias, self.bias_after_dequant) {
            (Some(b), false) => y.add_row_vector(b)?.div_rows(&divisors)?,
            (Some(b), true) => y.div_rows(&divisors)?.add_row_vector(b)?,
            (None, _) => y.div_rows(&divisors)?,
        })
    }
}
