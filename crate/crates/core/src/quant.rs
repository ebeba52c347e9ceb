//! AbsMax activation quantization, AbsMeasure ternary weight quantization and
//! the dequantization rescale.
//!
//! Activations: `x_scale = Q_b / (max|x| + eps)`,
//! `x_q = clamp(round(x * x_scale), -Q_b, Q_b - 1)` with `Q_b = 2^(k-1)`.
//!
//! Weights: `w_scale = 1 / (measure(|W|) + eps)` where the measure is the mean
//! or the median over the whole matrix, `W_q = clamp(round(W * w_scale), -1, 1)`.
//!
//! Rounding is always round-half-to-even.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{IntTensor, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
    #[error("{0}: input contains non-finite values")]
    NonFiniteInput(&'static str),
    #[error("{op}: scale is not a positive finite number ({value})")]
    BadScale { op: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Statistic of `|W|` used to scale weights before ternarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Activation bit width `k`.
    pub bits: u32,
    pub measure: Measure,
    /// Zero-division guard added to both denominators. Zero is accepted so
    /// the formulas can be evaluated exactly in tests.
    pub epsilon: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            measure: Measure::Mean,
            epsilon: 1e-5,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u32, measure: Measure, epsilon: f64) -> Result<Self, QuantError> {
        let cfg = Self {
            bits,
            measure,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(2..=16).contains(&self.bits) {
            return Err(QuantError::InvalidConfig(format!(
                "activation bits must be in 2..=16, got {}",
                self.bits
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(QuantError::InvalidConfig(format!(
                "epsilon must be a finite non-negative number, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `Q_b = 2^(k-1)`.
    pub fn q_b(&self) -> i32 {
        1 << (self.bits - 1)
    }
}

/// Quantized activations with a single scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationQuant<T = f32> {
    pub values: IntTensor<i32>,
    pub x_scale: T,
}

/// Quantized activation matrix with one scale per row (sample).
#[derive(Debug, Clone, PartialEq)]
pub struct RowActivationQuant<T = f32> {
    pub values: IntTensor<i32>,
    pub x_scales: Vec<T>,
}

impl<T> RowActivationQuant<T> {
    /// Narrows the values to `i8`; only valid for `k <= 8`.
    pub fn values_i8(&self) -> Result<IntTensor<i8>, QuantError> {
        let data = self
            .values
            .data()
            .iter()
            .map(|&v| {
                i8::try_from(v).map_err(|_| {
                    QuantError::InvalidConfig(format!("activation value {v} does not fit in 8 bits"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(IntTensor::new(self.values.shape().to_vec(), data)?)
    }
}

/// Ternary weights `{-1, 0, +1}` with their scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryWeights<T = f32> {
    pub values: IntTensor<i8>,
    pub w_scale: T,
}

fn positive_scale<T: Scalar>(op: &'static str, scale: T) -> Result<T, QuantError> {
    if scale.is_finite() && scale > T::zero() {
        Ok(scale)
    } else {
        Err(QuantError::BadScale {
            op,
            value: scale.to_f64().unwrap_or(f64::NAN),
        })
    }
}

/// Quantizes a slice with one AbsMax scale, writing integers into `out`.
fn absmax_quantize_slice<T: Scalar>(
    x: &[T],
    cfg: &QuantConfig,
    out: &mut [i32],
) -> Result<T, QuantError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFiniteInput("quantize_activations"));
    }
    let q_b = T::from_f64_lossy(cfg.q_b() as f64);
    let max = x.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let x_scale = positive_scale(
        "quantize_activations",
        q_b / (max + T::from_f64_lossy(cfg.epsilon)),
    )?;
    let lo = -q_b;
    let hi = q_b - T::one();
    for (o, &v) in out.iter_mut().zip(x) {
        let q = (v * x_scale).round_half_even().max(lo).min(hi);
        *o = q.to_i32().expect("clamped value fits in i32");
    }
    Ok(x_scale)
}

/// AbsMax quantization with one scale for the whole tensor.
pub fn quantize_activations<T: Scalar>(
    x_hat: &Tensor<T>,
    cfg: &QuantConfig,
) -> Result<ActivationQuant<T>, QuantError> {
    cfg.validate()?;
    if x_hat.is_empty() {
        return Err(TensorError::Empty("quantize_activations").into());
    }
    let mut out = vec![0i32; x_hat.len()];
    let x_scale = absmax_quantize_slice(x_hat.data(), cfg, &mut out)?;
    Ok(ActivationQuant {
        values: IntTensor::new(x_hat.shape().to_vec(), out)?,
        x_scale,
    })
}

/// AbsMax quantization of a `[batch, features]` matrix with one scale per row,
/// so each sample's result is independent of the rest of the batch.
pub fn quantize_activation_rows<T: Scalar>(
    x_hat: &Tensor<T>,
    cfg: &QuantConfig,
) -> Result<RowActivationQuant<T>, QuantError> {
    cfg.validate()?;
    let (rows, cols) = x_hat.dims2("quantize_activation_rows")?;
    if cols == 0 {
        return Err(TensorError::Empty("quantize_activation_rows").into());
    }
    let mut out = vec![0i32; rows * cols];
    let x_scales = x_hat
        .data()
        .chunks(cols)
        .zip(out.chunks_mut(cols))
        .map(|(row, o)| absmax_quantize_slice(row, cfg, o))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RowActivationQuant {
        values: IntTensor::new(vec![rows, cols], out)?,
        x_scales,
    })
}

/// AbsMeasure quantization of a weight matrix to `{-1, 0, +1}` with a single
/// scale taken over all entries.
pub fn quantize_weights<T: Scalar>(
    w: &Tensor<T>,
    cfg: &QuantConfig,
) -> Result<TernaryWeights<T>, QuantError> {
    cfg.validate()?;
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFiniteInput("quantize_weights"));
    }
    let measure = match cfg.measure {
        Measure::Mean => w.reduce_absmean()?,
        Measure::Median => w.reduce_absmedian()?,
    };
    let w_scale = positive_scale(
        "quantize_weights",
        T::one() / (measure + T::from_f64_lossy(cfg.epsilon)),
    )?;
    let values = w
        .data()
        .iter()
        .map(|&v| {
            let q = (v * w_scale).round_half_even().max(-T::one()).min(T::one());
            q.to_i8().expect("clamped to [-1, 1]")
        })
        .collect();
    Ok(TernaryWeights {
        values: IntTensor::new(w.shape().to_vec(), values)?,
        w_scale,
    })
}

/// `y = y_quant / (w_scale * x_scale)`.
pub fn dequantize<T: Scalar>(
    y_quant: &IntTensor<i32>,
    w_scale: T,
    x_scale: T,
) -> Result<Tensor<T>, QuantError> {
    let w_scale = positive_scale("dequantize", w_scale)?;
    let x_scale = positive_scale("dequantize", x_scale)?;
    let denom = w_scale * x_scale;
    Ok(y_quant.to_real::<T>().map("dequantize", |v| v / denom)?)
}

/// Per-row dequantization divisors `w_scale * x_scale[i]`.
pub fn dequant_divisors<T: Scalar>(w_scale: T, x_scales: &[T]) -> Result<Vec<T>, QuantError> {
    let w_scale = positive_scale("dequantize", w_scale)?;
    x_scales
        .iter()
        .map(|&x| positive_scale("dequantize", x).map(|x| w_scale * x))
        .collect()
}
