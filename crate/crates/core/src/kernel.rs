//! Packed 2-bit ternary weights and the multiplication-free integer matmul.
//!
//! Codes: `0 -> 0b00`, `+1 -> 0b01`, `-1 -> 0b10`; `0b11` is reserved and
//! rejected on load. A `[K, N]` weight matrix is stored column by column
//! (index `n * K + k`), four codes per byte with the first code in the least
//! significant bit pair, so walking down a column streams the matching
//! activation row sequentially. The payload is exactly `ceil(K * N / 4)` bytes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{IntTensor, TensorError};

/// Largest inner dimension for which an `i32` accumulator cannot overflow
/// with 8-bit activations (`128 * K < 2^31`).
pub const MAX_INNER_DIM: usize = 1 << 24;

const CODE_ZERO: u8 = 0b00;
const CODE_PLUS: u8 = 0b01;
const CODE_MINUS: u8 = 0b10;
const CODE_RESERVED: u8 = 0b11;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("weight value {value} at index {index} is not ternary")]
    NotTernary { index: usize, value: i8 },
    #[error("reserved code 0b11 at weight index {index}")]
    ReservedCode { index: usize },
    #[error("packed payload has {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("inner dimension {0} exceeds the overflow-safe limit of 2^24")]
    InnerDimTooLarge(usize),
    #[error("shape mismatch: activations {activations:?} vs weights [{rows}, {cols}]")]
    ShapeMismatch {
        activations: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    #[error("benchmark needs at least one repetition")]
    NoRepetitions,
    #[error("benchmark cross-check failed for {shape}: relative error {error:e}")]
    CrossCheck { shape: String, error: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A `[rows, cols]` ternary matrix packed at 2 bits per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernary {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
    w_scale: f32,
}

#[inline]
fn code_at(bytes: &[u8], index: usize) -> u8 {
    (bytes[index / 4] >> ((index % 4) * 2)) & 0b11
}

pub fn packed_len(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(4)
}

impl PackedTernary {
    /// Packs a `[rows, cols]` matrix of `{-1, 0, +1}`.
    pub fn pack(values: &IntTensor<i8>, w_scale: f32) -> Result<Self, KernelError> {
        let (rows, cols) = values.dims2("pack")?;
        if rows > MAX_INNER_DIM {
            return Err(KernelError::InnerDimTooLarge(rows));
        }
        let mut bytes = vec![0u8; packed_len(rows, cols)];
        for c in 0..cols {
            for r in 0..rows {
                let v = values.data()[r * cols + c];
                let code = match v {
                    0 => CODE_ZERO,
                    1 => CODE_PLUS,
                    -1 => CODE_MINUS,
                    _ => {
                        return Err(KernelError::NotTernary {
                            index: r * cols + c,
                            value: v,
                        })
                    }
                };
                let idx = c * rows + r;
                bytes[idx / 4] |= code << ((idx % 4) * 2);
            }
        }
        Ok(Self {
            rows,
            cols,
            bytes,
            w_scale,
        })
    }

    /// Rebuilds from raw bytes, validating length and the reserved code.
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>, w_scale: f32) -> Result<Self, KernelError> {
        if rows > MAX_INNER_DIM {
            return Err(KernelError::InnerDimTooLarge(rows));
        }
        let expected = packed_len(rows, cols);
        if bytes.len() != expected {
            return Err(KernelError::PayloadLength {
                expected,
                actual: bytes.len(),
            });
        }
        let total = rows * cols;
        for index in 0..total {
            if code_at(&bytes, index) == CODE_RESERVED {
                return Err(KernelError::ReservedCode { index });
            }
        }
        // Padding bits past the last weight must be zero for byte-exact round trips.
        if total % 4 != 0 && bytes[expected - 1] >> ((total % 4) * 2) != 0 {
            return Err(KernelError::ReservedCode { index: total });
        }
        Ok(Self {
            rows,
            cols,
            bytes,
            w_scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn w_scale(&self) -> f32 {
        self.w_scale
    }

    pub fn unpack(&self) -> IntTensor<i8> {
        let mut out = vec![0i8; self.rows * self.cols];
        for c in 0..self.cols {
            for r in 0..self.rows {
                out[r * self.cols + c] = match code_at(&self.bytes, c * self.rows + r) {
                    CODE_PLUS => 1,
                    CODE_MINUS => -1,
                    _ => 0,
                };
            }
        }
        IntTensor::new(vec![self.rows, self.cols], out).expect("shape matches data")
    }
}

/// Dot product of one activation row with one packed column using only
/// adds, subtracts and masks.
#[inline]
fn column_dot(x: &[i8], bytes: &[u8], start: usize) -> i32 {
    let mut acc = 0i32;
    let k = x.len();
    let mut idx = start;
    let mut p = 0;
    // Unaligned head up to the next byte boundary.
    while p < k && idx % 4 != 0 {
        acc += signed_term(x[p], code_at(bytes, idx));
        p += 1;
        idx += 1;
    }
    while p + 4 <= k {
        let byte = bytes[idx / 4];
        acc += signed_term(x[p], byte & 0b11)
            + signed_term(x[p + 1], (byte >> 2) & 0b11)
            + signed_term(x[p + 2], (byte >> 4) & 0b11)
            + signed_term(x[p + 3], byte >> 6);
        p += 4;
        idx += 4;
    }
    while p < k {
        acc += signed_term(x[p], code_at(bytes, idx));
        p += 1;
        idx += 1;
    }
    acc
}

/// `+x` for code `01`, `-x` for code `10`, `0` for `00`, without multiplying.
#[inline(always)]
fn signed_term(x: i8, code: u8) -> i32 {
    let v = x as i32;
    let plus = -((code & 1) as i32);
    let minus = -((code >> 1) as i32);
    (v & plus) - (v & minus)
}

/// Exact `y[b, n] = sum_k s(w[k, n]) * x[b, k]` with `s` in `{-1, 0, +1}`.
pub fn ternary_matmul(x_q: &IntTensor<i8>, w: &PackedTernary) -> Result<IntTensor<i32>, KernelError> {
    let (batch, k) = x_q.dims2("ternary_matmul")?;
    if k != w.rows {
        return Err(KernelError::ShapeMismatch {
            activations: x_q.shape().to_vec(),
            rows: w.rows,
            cols: w.cols,
        });
    }
    if k > MAX_INNER_DIM {
        return Err(KernelError::InnerDimTooLarge(k));
    }
    let n = w.cols;
    let mut out = vec![0i32; batch * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(b, row)| {
            let x = x_q.row(b);
            for (c, y) in row.iter_mut().enumerate() {
                *y = column_dot(x, &w.bytes, c * k);
            }
        });
    }
    Ok(IntTensor::new(vec![batch, n], out)?)
}

/// One benchmarked shape `[batch, inner] x [inner, outer]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub batch: usize,
    pub inner: usize,
    pub outer: usize,
}

impl std::fmt::Display for BenchShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.batch, self.inner, self.outer)
    }
}

impl std::str::FromStr for BenchShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad shape {s:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            &[batch, inner, outer] if batch > 0 && inner > 0 && outer > 0 => Ok(Self { batch, inner, outer }),
            _ => Err(format!("shape {s:?} must look like BxKxN with positive extents")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub shape: BenchShape,
    /// Median wall time of the packed integer path.
    pub ternary_ns: u128,
    /// Median wall time of the `f32` reference matmul.
    pub float_ns: u128,
    pub ternary_gops: f64,
    pub float_gops: f64,
}

impl BenchRow {
    /// Speedup of the ternary path over the float path.
    pub fn ratio(&self) -> f64 {
        self.float_ns as f64 / self.ternary_ns.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "shape,ternary_ns,float_ns,ratio";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.4}\n", r.shape, r.ternary_ns, r.float_ns, r.ratio()));
        }
        s
    }
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times the packed ternary path against an `f32` matmul on identical
/// (dequantized) inputs and cross-checks the two results.
pub fn bench(shapes: &[BenchShape], repetitions: usize, seed: u64) -> Result<BenchReport, KernelError> {
    if repetitions == 0 {
        return Err(KernelError::NoRepetitions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BenchReport::default();
    for &shape in shapes {
        let BenchShape { batch, inner, outer } = shape;
        let xq: Vec<i8> = (0..batch * inner).map(|_| rng.gen_range(-128i16..=127) as i8).collect();
        let wq: Vec<i8> = (0..inner * outer).map(|_| rng.gen_range(-1i8..=1)).collect();
        let x_scale = 64.0f32;
        let w_scale = 20.0f32;
        let xq = IntTensor::new(vec![batch, inner], xq)?;
        let wq = IntTensor::new(vec![inner, outer], wq)?;
        let packed = PackedTernary::pack(&wq, w_scale)?;
        let xf = xq.to_real::<f32>().scalar_mul(1.0 / x_scale)?;
        let wf = wq.to_real::<f32>().scalar_mul(1.0 / w_scale)?;

        let mut tern = Vec::with_capacity(repetitions);
        let mut flt = Vec::with_capacity(repetitions);
        let mut yq = None;
        let mut yf = None;
        for _ in 0..repetitions {
            let t0 = Instant::now();
            let y = ternary_matmul(&xq, &packed)?;
            tern.push(t0.elapsed().as_nanos());
            yq = Some(y);
            let t0 = Instant::now();
            let y = xf.matmul(&wf)?;
            flt.push(t0.elapsed().as_nanos());
            yf = Some(y);
        }
        let yq = yq.expect("at least one repetition");
        let yf = yf.expect("at least one repetition");
        let denom = (x_scale * w_scale) as f64;
        // f32 sums cancel, so errors are measured against the largest output.
        let peak = yq.data().iter().map(|&a| (a as f64 / denom).abs()).fold(1.0 / denom, f64::max);
        let mut worst = 0.0f64;
        for (&a, &b) in yq.data().iter().zip(yf.data()) {
            let err = (a as f64 / denom - b as f64).abs() / peak;
            worst = worst.max(err);
        }
        if worst > 1e-4 {
            return Err(KernelError::CrossCheck {
                shape: shape.to_string(),
                error: worst,
            });
        }
        let ops = 2.0 * (batch * inner * outer) as f64;
        let ternary_ns = median(tern);
        let float_ns = median(flt);
        report.rows.push(BenchRow {
            shape,
            ternary_ns,
            float_ns,
            ternary_gops: ops / ternary_ns.max(1) as f64,
            float_gops: ops / float_ns.max(1) as f64,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: Vec<i8>) -> IntTensor<i8> {
        IntTensor::new(vec![rows, cols], v).unwrap()
    }

    fn reference(x: &IntTensor<i8>, w: &IntTensor<i8>) -> Vec<i32> {
        let (b, k) = (x.shape()[0], x.shape()[1]);
        let n = w.shape()[1];
        let mut out = vec![0i32; b * n];
        for i in 0..b {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| x.data()[i * k + p] as i32 * w.data()[p * n + j] as i32).sum();
            }
        }
        out
    }

    #[test]
    fn pack_code_table() {
        let p = PackedTernary::pack(&mat(4, 1, vec![-1, 0, 1, 1]), 1.0).unwrap();
        assert_eq!(p.bytes(), &[0x52]);
        let z = PackedTernary::pack(&mat(4, 1, vec![0; 4]), 1.0).unwrap();
        assert_eq!(z.bytes(), &[0x00]);
        assert!(matches!(
            PackedTernary::pack(&mat(1, 1, vec![2]), 1.0),
            Err(KernelError::NotTernary { value: 2, .. })
        ));
    }

    #[test]
    fn all_four_weight_groups_round_trip() {
        for code in 0..81u32 {
            let mut c = code;
            let v: Vec<i8> = (0..4)
                .map(|_| {
                    let d = (c % 3) as i8 - 1;
                    c /= 3;
                    d
                })
                .collect();
            let m = mat(4, 1, v);
            let p = PackedTernary::pack(&m, 1.0).unwrap();
            assert_eq!(p.unpack(), m);
            let again = PackedTernary::from_bytes(4, 1, p.bytes().to_vec(), 1.0).unwrap();
            assert_eq!(again, p);
        }
    }

    #[test]
    fn payload_length_is_exact_for_odd_shapes() {
        let m = mat(3, 3, vec![1, -1, 0, 0, 1, 1, -1, -1, 1]);
        let p = PackedTernary::pack(&m, 1.0).unwrap();
        assert_eq!(p.bytes().len(), 3);
        assert_eq!(p.unpack(), m);
        assert_eq!(packed_len(784, 128), 25088);
        assert!(matches!(
            PackedTernary::from_bytes(3, 3, vec![0; 2], 1.0),
            Err(KernelError::PayloadLength { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn reserved_code_rejected() {
        assert_eq!(
            PackedTernary::from_bytes(4, 1, vec![0b0000_1100], 1.0),
            Err(KernelError::ReservedCode { index: 1 })
        );
        // non-zero padding past the last weight
        assert!(PackedTernary::from_bytes(1, 1, vec![0b0000_0100], 1.0).is_err());
    }

    #[test]
    fn matmul_examples() {
        let x = mat(1, 2, vec![127, -64]);
        let w = PackedTernary::pack(&mat(2, 1, vec![1, -1]), 1.0).unwrap();
        assert_eq!(ternary_matmul(&x, &w).unwrap().data(), &[191]);
        let zero = PackedTernary::pack(&mat(2, 3, vec![0; 6]), 1.0).unwrap();
        assert_eq!(ternary_matmul(&x, &zero).unwrap().data(), &[0, 0, 0]);
        let bad = PackedTernary::pack(&mat(3, 1, vec![0; 3]), 1.0).unwrap();
        assert!(matches!(ternary_matmul(&x, &bad), Err(KernelError::ShapeMismatch { .. })));
    }

    #[test]
    fn random_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(b, k, n) in &[(3, 64, 5), (2, 7, 3), (1, 1, 1), (4, 13, 9)] {
            let x = mat(b, k, (0..b * k).map(|_| rng.gen_range(-128i16..=127) as i8).collect());
            let w = mat(k, n, (0..k * n).map(|_| rng.gen_range(-1..=1)).collect());
            let p = PackedTernary::pack(&w, 1.0).unwrap();
            assert_eq!(ternary_matmul(&x, &p).unwrap().data(), reference(&x, &w).as_slice());
        }
    }

    #[test]
    fn bench_schema_and_degenerate_input() {
        let shapes = ["2x16x8".parse().unwrap(), "1x33x5".parse().unwrap()];
        let report = bench(&shapes, 3, 1).unwrap();
        assert_eq!(report.rows.len(), 2);
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("shape,ternary_ns,float_ns,ratio"));
        assert!(lines.next().unwrap().starts_with("2x16x8,"));
        assert_eq!(bench(&shapes, 0, 1), Err(KernelError::NoRepetitions));
        assert!("2x0x3".parse::<BenchShape>().is_err());
    }
}
