//! Dense row-major tensors.
//!
//! [`Tensor`] carries real values (training runs at `f32`, gradient checks at
//! `f64`), [`IntTensor`] carries quantized integers. Every public operation
//! that can produce a new real value checks the result for NaN/Inf and reports
//! [`TensorError::NonFinite`] instead of letting it leak into training state.
//!
//! Matrix products accumulate along the inner dimension in index order, so a
//! given input always produces the same bits regardless of thread count.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use thiserror::Error;

/// Real scalar types a [`Tensor`] can hold.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Rounds to the nearest integer, ties to the nearest even integer.
    fn round_half_even(self) -> Self;

    /// Shorthand for lossy conversion from `f64`.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 always converts to a float scalar")
    }
}

impl Scalar for f32 {
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

impl Scalar for f64 {
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: tensor is empty")]
    Empty(&'static str),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(TensorError::DataLength {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

/// Dense n-dimensional real tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_len(&shape, data.len())?;
        let t = Self { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn from_slice(values: &[T]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// Rank-2 tensor from nested rows; all rows must have the same width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place updates (optimizers). Callers are
    /// responsible for keeping the values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    fn finite(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        let cols = self.shape.get(1).copied().unwrap_or(1).max(1);
        self.data.chunks(cols)
    }

    /// Copies the selected rows of a rank-2 tensor into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (rows, cols) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("row {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![indices.len(), cols],
            data,
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_len(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// Converts element type (e.g. `f32` to `f64`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Matrix product `[M,K] x [K,N] -> [M,N]`, accumulating along K in
    /// index order for every output element.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        if n > 0 {
            let kernel = |(i, c_row): (usize, &mut [T])| {
                let a_row = &self.data[i * k..(i + 1) * k];
                for (p, &a) in a_row.iter().enumerate() {
                    let b_row = &rhs.data[p * n..(p + 1) * n];
                    for (c, &b) in c_row.iter_mut().zip(b_row) {
                        *c = *c + a * b;
                    }
                }
            };
            if m * n * k >= 1 << 20 {
                out.par_chunks_mut(n).enumerate().for_each(kernel);
            } else {
                out.chunks_mut(n).enumerate().for_each(kernel);
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
        .finite("matmul")
    }

    pub fn reduce_absmax(&self) -> Result<T> {
        if self.is_empty() {
            return Err(TensorError::Empty("reduce_absmax"));
        }
        Ok(self
            .data
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs())))
    }

    pub fn reduce_absmean(&self) -> Result<T> {
        if self.is_empty() {
            return Err(TensorError::Empty("reduce_absmean"));
        }
        // f64 accumulator keeps large f32 reductions accurate; order is fixed.
        let sum: f64 = self
            .data
            .iter()
            .map(|v| v.abs().to_f64().unwrap_or(f64::NAN))
            .sum();
        Ok(T::from_f64_lossy(sum / self.len() as f64))
    }

    /// Median of `|t|`; for an even count, the mean of the two central order
    /// statistics.
    pub fn reduce_absmedian(&self) -> Result<T> {
        if self.is_empty() {
            return Err(TensorError::Empty("reduce_absmedian"));
        }
        let mut abs: Vec<T> = self.data.iter().map(|v| v.abs()).collect();
        let n = abs.len();
        let mid = n / 2;
        let (lower, upper, _) = abs.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
        let upper = *upper;
        if n % 2 == 1 {
            return Ok(upper);
        }
        let lower_max = lower.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        Ok((lower_max + upper) / (T::one() + T::one()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .finite(op)
    }

    /// Elementwise map; the result is checked for finiteness.
    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite(op)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn scalar_mul(&self, c: T) -> Result<Self> {
        self.map("scalar_mul", |v| v * c)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Result<Self> {
        self.map("exp", T::exp)
    }

    pub fn log(&self) -> Result<Self> {
        self.map("log", T::ln)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                reason: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.map("clamp", |v| v.max(lo).min(hi))
    }

    pub fn round_half_even(&self) -> Result<Self> {
        self.map("round_half_even", T::round_half_even)
    }

    /// Adds `bias[j]` to every row's column `j`.
    pub fn add_row_vector(&self, bias: &[T]) -> Result<Self> {
        let (_, cols) = self.dims2("add_row_vector")?;
        if bias.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                left: self.shape.clone(),
                right: vec![bias.len()],
            });
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
        .finite("add_row_vector")
    }

    /// Divides row `i` by `divisors[i]`.
    pub fn div_rows(&self, divisors: &[T]) -> Result<Self> {
        self.scale_rows_with(divisors, "div_rows", |v, d| v / d)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn mul_rows(&self, factors: &[T]) -> Result<Self> {
        self.scale_rows_with(factors, "mul_rows", |v, f| v * f)
    }

    fn scale_rows_with(&self, per_row: &[T], op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (rows, cols) = self.dims2(op)?;
        if per_row.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![per_row.len()],
            });
        }
        let mut data = self.data.clone();
        if cols > 0 {
            for (row, &s) in data.chunks_mut(cols).zip(per_row) {
                for v in row {
                    *v = f(*v, s);
                }
            }
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
        .finite(op)
    }

    /// Column sums of a rank-2 tensor.
    pub fn sum_rows(&self) -> Result<Vec<T>> {
        let (_, cols) = self.dims2("sum_rows")?;
        let mut acc = vec![T::zero(); cols];
        if cols > 0 {
            for row in self.data.chunks(cols) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
        }
        Ok(acc)
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, cols) = self.dims2("argmax_rows")?;
        if cols == 0 {
            return Err(TensorError::Empty("argmax_rows"));
        }
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Dense integer tensor (quantized activations, ternary weights, accumulators).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor<I> {
    shape: Vec<usize>,
    data: Vec<I>,
}

impl<I: Copy> IntTensor<I> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<I>) -> Result<Self> {
        let shape = shape.into();
        check_len(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[I] {
        &self.data
    }

    pub fn into_data(self) -> Vec<I> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[I] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

impl<I: Copy + Into<f64>> IntTensor<I> {
    /// Exact promotion to a real tensor (exact whenever `|v| < 2^24` for f32).
    pub fn to_real<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v.into()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(id.matmul(&b).unwrap(), b);
        let r = t2(&[vec![1.0, 2.0]]).matmul(&t2(&[vec![3.0], vec![4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(7, 5, 3), (32, 32, 32), (1, 17, 9), (40, 50, 30)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = naive_matmul(&a, &b, m, k, n);
            let got = Tensor::new(vec![m, k], a)
                .unwrap()
                .matmul(&Tensor::new(vec![k, n], b).unwrap())
                .unwrap();
            for (g, e) in got.data().iter().zip(&expect) {
                assert!((g - e).abs() <= 1e-6 * e.abs().max(1e-12), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(
            a.matmul(&a),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn absmax_examples() {
        let t = |v: &[f32]| Tensor::from_slice(v).unwrap();
        assert_eq!(t(&[0.5, -1.0, 0.25]).reduce_absmax().unwrap(), 1.0);
        assert_eq!(t(&[0.0, 0.0, 0.0]).reduce_absmax().unwrap(), 0.0);
        assert_eq!(t(&[-3.5, 2.0]).reduce_absmax().unwrap(), 3.5);
        assert_eq!(
            Tensor::<f32>::zeros(vec![0]).reduce_absmax(),
            Err(TensorError::Empty("reduce_absmax"))
        );
    }

    #[test]
    fn absmean_absmedian_examples() {
        let w = Tensor::<f64>::from_slice(&[0.4, -0.2, 0.1, 0.0]).unwrap();
        assert!((w.reduce_absmean().unwrap() - 0.175).abs() < 1e-12);
        assert!((w.reduce_absmedian().unwrap() - 0.15).abs() < 1e-12);
        let v = Tensor::<f64>::from_slice(&[0.05, 0.05, 0.05, 1.0]).unwrap();
        assert!((v.reduce_absmedian().unwrap() - 0.05).abs() < 1e-12);
        assert!(Tensor::<f64>::zeros(vec![0]).reduce_absmedian().is_err());
        assert!(Tensor::<f64>::zeros(vec![0]).reduce_absmean().is_err());
    }

    #[test]
    fn elementwise_examples() {
        let r = Tensor::<f64>::from_slice(&[0.5, 1.5, -2.5]).unwrap().round_half_even().unwrap();
        assert_eq!(r.data(), &[0.0, 2.0, -2.0]);
        let c = Tensor::<f64>::from_slice(&[5.0]).unwrap().clamp(-1.0, 1.0).unwrap();
        assert_eq!(c.data(), &[1.0]);
        let relu = Tensor::<f64>::from_slice(&[-1.0, 2.0]).unwrap().relu().unwrap();
        assert_eq!(relu.data(), &[0.0, 2.0]);
        let a = Tensor::<f64>::from_slice(&[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_slice(&[3.0]).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let t = Tensor::<f32>::from_slice(&[100.0]).unwrap();
        assert_eq!(t.exp(), Err(TensorError::NonFinite("exp")));
        assert!(Tensor::<f32>::new(vec![1], vec![f32::NAN]).is_err());
        let z = Tensor::<f32>::from_slice(&[0.0]).unwrap();
        assert!(z.log().is_err());
    }

    proptest! {
        #[test]
        fn median_is_order_statistic(v in prop::collection::vec(-100.0f64..100.0, 1..40)) {
            let t = Tensor::from_slice(&v).unwrap();
            let med = t.reduce_absmedian().unwrap();
            let mut abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
            abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = abs.len();
            if n % 2 == 1 {
                prop_assert!(abs.contains(&med));
            } else {
                prop_assert_eq!(med, (abs[n / 2 - 1] + abs[n / 2]) / 2.0);
            }
        }

        #[test]
        fn round_half_even_bounds(x in -1e6f64..1e6, i in -100_000i64..100_000) {
            let r = Tensor::from_slice(&[x]).unwrap().round_half_even().unwrap().data()[0];
            prop_assert!((r - x).abs() <= 0.5);
            let fi = i as f64;
            prop_assert_eq!(Tensor::from_slice(&[fi]).unwrap().round_half_even().unwrap().data()[0], fi);
        }

        #[test]
        fn measures_positively_homogeneous(
            v in prop::collection::vec(-10.0f64..10.0, 1..30),
            c in 0.01f64..100.0,
        ) {
            let t = Tensor::from_slice(&v).unwrap();
            let ct = t.scalar_mul(c).unwrap();
            let (m, cm) = (t.reduce_absmean().unwrap(), ct.reduce_absmean().unwrap());
            prop_assert!((cm - c * m).abs() <= 1e-12 * (c * m).abs().max(1.0));
            let (d, cd) = (t.reduce_absmedian().unwrap(), ct.reduce_absmedian().unwrap());
            prop_assert!((cd - c * d).abs() <= 1e-12 * (c * d).abs().max(1.0));
        }
    }
}
