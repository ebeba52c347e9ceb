//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended to a [`Tape`] in evaluation order, so the node list is
//! already topologically sorted and [`Tape::backward`] walks it in reverse,
//! visiting each node once. Quantization enters the graph through
//! [`Tape::ste_through`]: the node's value is the quantized tensor, and its
//! gradient is handed unchanged to a surrogate input (identity Jacobian, no
//! clipping at saturated entries). Scales used to build quantized values are
//! plain constants and receive no gradient.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss must be a single scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this tape or refers forward (cycle)")]
    InvalidNode(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("layer norm needs at least one feature")]
    ZeroFeatures,
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row statistics kept from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// `(x - mean) * rstd`, before gain and bias.
    pub normalized: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`
/// with the biased (1/F) variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (rows, cols) = x.dims2("layer_norm")?;
    if cols == 0 {
        return Err(AutodiffError::ZeroFeatures);
    }
    if gain.len() != cols || bias.len() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: vec![gain.len(), bias.len()],
        }
        .into());
    }
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let n = T::from_usize(cols).unwrap();
    let mut normalized = Vec::with_capacity(rows * cols);
    let mut out = Vec::with_capacity(rows * cols);
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks(cols) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((&v, &g), &b) in row.iter().zip(gain).zip(bias) {
            let xh = (v - mean) * r;
            normalized.push(xh);
            out.push(xh * g + b);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        LayerNormCache {
            normalized: Tensor::new(shape, normalized)?,
            rstd,
        },
    ))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: vec![rows, classes],
            right: vec![labels.len()],
        }
        .into());
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(AutodiffError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = logits.dims2("softmax_rows")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(cols.max(1)) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / total;
        }
    }
    Ok(Tensor::new(logits.shape().to_vec(), out)?)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (rows, cols) = logits.dims2("softmax_cross_entropy")?;
    check_labels(labels, rows, cols)?;
    if rows == 0 {
        return Err(TensorError::Empty("softmax_cross_entropy").into());
    }
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(cols).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total = total + (lse - row[label]);
    }
    let loss = total / T::from_usize(rows).unwrap();
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("softmax_cross_entropy").into());
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, T),
    AddRowVector(NodeId, NodeId),
    DivRows(NodeId, Vec<T>),
    MulRows(NodeId, Vec<T>),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cache: LayerNormCache<T>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Ste(NodeId),
    Detach,
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to every parameter node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(AutodiffError::InvalidNode(id.0))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[NodeId]) -> Result<bool> {
        let mut any = false;
        for &id in ids {
            any |= self.node(id)?.requires_grad;
        }
        Ok(any)
    }

    /// A trainable leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id.0].is_param = true;
        id
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        let rg = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Matmul(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.add(&self.node(b)?.value)?;
        let rg = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.sub(&self.node(b)?.value)?;
        let rg = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.mul(&self.node(b)?.value)?;
        let rg = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.node(a)?.value.scalar_mul(c)?;
        let rg = self.grad_of(&[a])?;
        Ok(self.push(Op::ScalarMul(a, c), v, rg))
    }

    /// Adds a rank-1 `bias` node to every row of `x`.
    pub fn add_row_vector(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.add_row_vector(self.node(bias)?.value.data())?;
        let rg = self.grad_of(&[x, bias])?;
        Ok(self.push(Op::AddRowVector(x, bias), v, rg))
    }

    /// Divides each row by a constant divisor.
    pub fn div_rows(&mut self, x: NodeId, divisors: Vec<T>) -> Result<NodeId> {
        let v = self.node(x)?.value.div_rows(&divisors)?;
        let rg = self.grad_of(&[x])?;
        Ok(self.push(Op::DivRows(x, divisors), v, rg))
    }

    /// Multiplies each row by a constant factor.
    pub fn mul_rows(&mut self, x: NodeId, factors: Vec<T>) -> Result<NodeId> {
        let v = self.node(x)?.value.mul_rows(&factors)?;
        let rg = self.grad_of(&[x])?;
        Ok(self.push(Op::MulRows(x, factors), v, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.relu()?;
        let rg = self.grad_of(&[x])?;
        Ok(self.push(Op::Relu(x), v, rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.exp()?;
        let rg = self.grad_of(&[x])?;
        Ok(self.push(Op::Exp(x), v, rg))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.log()?;
        let rg = self.grad_of(&[x])?;
        Ok(self.push(Op::Log(x), v, rg))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.node(x)?.value.sum();
        let v = Tensor::new(vec![1], vec![s])?;
        let rg = self.grad_of(&[x])?;
        Ok(self.push(Op::Sum(x), v, rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (v, cache) = layer_norm(
            &self.node(x)?.value,
            self.node(gain)?.value.data(),
            self.node(bias)?.value.data(),
        )?;
        let rg = self.grad_of(&[x, gain, bias])?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, cache }, v, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        let loss = softmax_cross_entropy(lv, labels)?;
        let probs = softmax_rows(lv)?;
        let rg = self.grad_of(&[logits])?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::new(vec![1], vec![loss])?,
            rg,
        ))
    }

    /// Straight-through node: the forward value is `quantized`, the backward
    /// pass hands the upstream gradient to `surrogate` unchanged.
    pub fn ste_through(&mut self, quantized: Tensor<T>, surrogate: NodeId) -> Result<NodeId> {
        let s = self.node(surrogate)?;
        if s.value.shape() != quantized.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ste_through",
                left: quantized.shape().to_vec(),
                right: s.value.shape().to_vec(),
            }
            .into());
        }
        let rg = s.requires_grad;
        Ok(self.push(Op::Ste(surrogate), quantized, rg))
    }

    /// Same value as `x`, cut from the graph.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.clone();
        Ok(self.push(Op::Detach, v, false))
    }

    /// Reverse pass from a scalar `loss`. Only gradients of parameter nodes
    /// are kept in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (if node.is_param {
                grads[idx].clone()
            } else {
                grads[idx].take()
            }) else {
                continue;
            };
            for (input, contrib) in self.local_grads(node, &g)? {
                if input.0 >= idx {
                    return Err(AutodiffError::InvalidNode(input.0));
                }
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.is_param {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Matmul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose()?)?));
                }
                if self.wants(*b) {
                    out.push((*b, val(*a).transpose()?.matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scalar_mul(-T::one())?));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.mul(val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, g.mul(val(*a))?));
                }
            }
            Op::ScalarMul(a, c) => out.push((*a, g.scalar_mul(*c)?)),
            Op::AddRowVector(x, bias) => {
                out.push((*x, g.clone()));
                if self.wants(*bias) {
                    let sums = g.sum_rows()?;
                    out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), sums)?));
                }
            }
            Op::DivRows(x, d) => out.push((*x, g.div_rows(d)?)),
            Op::MulRows(x, f) => out.push((*x, g.mul_rows(f)?)),
            Op::Relu(x) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Exp(x) => out.push((*x, g.mul(&node.value)?)),
            Op::Log(x) => {
                let xv = val(*x);
                let data = g.data().iter().zip(xv.data()).map(|(&gi, &xi)| gi / xi).collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0])));
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (rows, cols) = g.dims2("layer_norm backward")?;
                let gain_v = val(*gain).data();
                let n = T::from_usize(cols).unwrap();
                let xhat = cache.normalized.data();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..cols {
                            let d = gr[j] * gain_v[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xr[j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for j in 0..cols {
                            let d = gr[j] * gain_v[j];
                            dx.push(cache.rstd[r] * (d - mean_d - xr[j] * mean_dx));
                        }
                    }
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
                if self.wants(*gain) {
                    let dg = g.mul(&cache.normalized)?.sum_rows()?;
                    out.push((*gain, Tensor::new(val(*gain).shape().to_vec(), dg)?));
                }
                if self.wants(*bias) {
                    out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), g.sum_rows()?)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (rows, cols) = probs.dims2("softmax_cross_entropy backward")?;
                let scale = g.data()[0] / T::from_usize(rows).unwrap();
                let mut d = probs.data().to_vec();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * cols + label] = d[r * cols + label] - T::one();
                }
                for v in &mut d {
                    *v = *v * scale;
                }
                out.push((*logits, Tensor::new(probs.shape().to_vec(), d)?));
            }
            Op::Ste(surrogate) => out.push((*surrogate, g.clone())),
        }
        Ok(out)
    }
}
