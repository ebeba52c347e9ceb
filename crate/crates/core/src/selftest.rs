//! Built-in consistency checks: quantizer examples, straight-through
//! gradients against their closed forms, the packed kernel against a
//! multiply-based oracle, and central finite differences for the tape.

use std::time::Instant;

use rand::Rng;

use crate::autodiff::{layer_norm, softmax_cross_entropy, Tape};
use crate::kernel::{ternary_matmul, PackedTernary};
use crate::layer::{BitLinear, LayerOptions};
use crate::quant::{dequantize, quantize_activations, quantize_weights, Measure, QuantConfig};
use crate::seed;
use crate::tensor::{IntTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub result: Result<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.result.is_ok())
    }
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

type NamedCheck = (&'static str, fn(u64) -> Check);

/// Runs every check with the given RNG seed.
pub fn run_all(seed: u64) -> SelftestReport {
    let checks: [NamedCheck; 4] = [
        ("quantizer examples", |_| quantizer_examples()),
        ("straight-through closed form", |s| ste_closed_form(s, 100)),
        ("kernel vs oracle", |s| kernel_vs_oracle(s, 10_000)),
        ("finite differences", |s| finite_differences(s, 10)),
    ];
    let mut report = SelftestReport::default();
    for (name, f) in checks {
        let t0 = Instant::now();
        let result = f(seed);
        report.checks.push(CheckOutcome {
            name,
            result,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    report
}

pub fn quantizer_examples() -> Check {
    let exact = |m| QuantConfig::new(8, m, 0.0).map_err(err);
    let a = quantize_activations(&Tensor::from_slice(&[0.5f64, -1.0, 0.25]).map_err(err)?, &exact(Measure::Mean)?).map_err(err)?;
    ensure(a.x_scale == 128.0 && a.values.data() == [64, -128, 32], || format!("activations: {a:?}"))?;
    let a = quantize_activations(&Tensor::from_slice(&[1.0f64]).map_err(err)?, &exact(Measure::Mean)?).map_err(err)?;
    ensure(a.values.data() == [127], || format!("saturation: {a:?}"))?;

    let w = Tensor::from_slice(&[0.4f64, -0.2, 0.1, 0.0]).map_err(err)?;
    let q = quantize_weights(&w, &exact(Measure::Mean)?).map_err(err)?;
    ensure(q.values.data() == [1, -1, 1, 0] && (q.w_scale - 1.0 / 0.175).abs() < 1e-9, || format!("mean: {q:?}"))?;
    let w = Tensor::from_slice(&[0.05f64, 0.05, 0.05, 1.0]).map_err(err)?;
    let med = quantize_weights(&w, &exact(Measure::Median)?).map_err(err)?;
    let mean = quantize_weights(&w, &exact(Measure::Mean)?).map_err(err)?;
    ensure(med.values.data() == [1, 1, 1, 1] && mean.values.data() == [0, 0, 0, 1], || {
        format!("median {med:?} / mean {mean:?}")
    })?;

    let y = dequantize(&IntTensor::new(vec![1, 1], vec![191]).map_err(err)?, 10.0 / 3.0, 128.0f64).map_err(err)?;
    ensure((y.data()[0] - 0.447_656_25).abs() < 1e-9, || format!("dequantize: {y:?}"))?;
    Ok("7 hand-evaluated cases".into())
}

fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("finite")
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-12
}

/// Tape gradients through a ternary layer versus
/// `dW = (x_q / x_scale)^T g` and `dx = g (W_q / w_scale)^T`.
pub fn ste_closed_form(seed: u64, shapes: usize) -> Check {
    let mut rng = seed::rng_for(seed, "selftest-ste", 0);
    let mut worst = 0.0f64;
    for _ in 0..shapes {
        let (b, i, o) = (rng.gen_range(1..6), rng.gen_range(1..12), rng.gen_range(1..8));
        let opts = LayerOptions { norm: false, bias: false, ..LayerOptions::default() };
        let layer = BitLinear::from_weights(random_tensor(&mut rng, vec![i, o], 1.0), None, None, opts).map_err(err)?;
        let x = random_tensor(&mut rng, vec![b, i], 2.0);
        let g = random_tensor(&mut rng, vec![b, o], 1.0);

        let mut tape = Tape::new();
        let ids = layer.register(&mut tape);
        let xi = tape.param(x.clone());
        let y = layer.forward_on_tape(&mut tape, &ids, xi).map_err(err)?;
        let gi = tape.constant(g.clone());
        let prod = tape.mul(y, gi).map_err(err)?;
        let loss = tape.sum(prod).map_err(err)?;
        let grads = tape.backward(loss).map_err(err)?;
        let dw = grads.get(ids.weight).ok_or("missing weight gradient")?;
        let dx = grads.get(xi).ok_or("missing input gradient")?;

        let cfg = layer.quant;
        let wq = quantize_weights(&layer.weight, &cfg).map_err(err)?;
        let mut ref_dw = vec![0.0; i * o];
        let mut ref_dx = vec![0.0; b * i];
        for r in 0..b {
            let aq = quantize_activations(&Tensor::new(vec![1, i], x.row(r).to_vec()).map_err(err)?, &cfg).map_err(err)?;
            for k in 0..i {
                for n in 0..o {
                    ref_dw[k * o + n] += aq.values.data()[k] as f64 / aq.x_scale * g.data()[r * o + n];
                    ref_dx[r * i + k] += g.data()[r * o + n] * wq.values.data()[k * o + n] as f64 / wq.w_scale;
                }
            }
        }
        for (a, e) in dw.data().iter().zip(&ref_dw).chain(dx.data().iter().zip(&ref_dx)) {
            ensure(rel_close(*a, *e, 1e-6), || format!("shape {b}x{i}x{o}: {a} vs {e}"))?;
            worst = worst.max((a - e).abs());
        }
    }
    Ok(format!("{shapes} shapes, max abs deviation {worst:.1e}"))
}

/// Packed kernel against `sum x * w` with ordinary multiplication.
pub fn kernel_vs_oracle(seed: u64, instances: usize) -> Check {
    let mut rng = seed::rng_for(seed, "selftest-kernel", 0);
    for t in 0..instances {
        let (b, k, n) = (rng.gen_range(1..5), rng.gen_range(1..40), rng.gen_range(1..6));
        let x: Vec<i8> = (0..b * k).map(|_| rng.gen_range(-128i16..=127) as i8).collect();
        let w: Vec<i8> = (0..k * n).map(|_| rng.gen_range(-1..=1)).collect();
        let xq = IntTensor::new(vec![b, k], x.clone()).map_err(err)?;
        let packed = PackedTernary::pack(&IntTensor::new(vec![k, n], w.clone()).map_err(err)?, 1.0).map_err(err)?;
        let y = ternary_matmul(&xq, &packed).map_err(err)?;
        for r in 0..b {
            for c in 0..n {
                let expect: i32 = (0..k).map(|p| x[r * k + p] as i32 * w[p * n + c] as i32).sum();
                ensure(y.data()[r * n + c] == expect, || format!("instance {t}: [{r},{c}] {} vs {expect}", y.data()[r * n + c]))?;
            }
        }
    }
    Ok(format!("{instances} random instances bit-exact"))
}

fn central_diff(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> Result<f64, String>) -> Result<Vec<f64>, String> {
    let h = 1e-5;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        out.push((f(&p)? - f(&m)?) / (2.0 * h));
    }
    Ok(out)
}

fn compare(name: &str, analytic: &Tensor<f64>, numeric: &[f64]) -> Result<(), String> {
    for (i, (a, n)) in analytic.data().iter().zip(numeric).enumerate() {
        ensure((a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-8, || format!("{name}[{i}]: analytic {a} vs numeric {n}"))?;
    }
    Ok(())
}

/// LayerNorm, softmax cross-entropy, matmul and ReLU against central
/// differences at `f64`, composed as LayerNorm -> matmul -> ReLU -> matmul -> CE.
pub fn finite_differences(seed: u64, trials: usize) -> Check {
    let mut rng = seed::rng_for(seed, "selftest-fd", 0);
    for _ in 0..trials {
        let (b, f, hdim, c) = (rng.gen_range(1..5), rng.gen_range(2..7), rng.gen_range(1..6), rng.gen_range(2..5));
        let x = random_tensor(&mut rng, vec![b, f], 2.0);
        let gain = random_tensor(&mut rng, vec![f], 1.5);
        let beta = random_tensor(&mut rng, vec![f], 0.5);
        let w1 = random_tensor(&mut rng, vec![f, hdim], 1.0);
        let w2 = random_tensor(&mut rng, vec![hdim, c], 1.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();

        let plain = |x: &Tensor<f64>, gain: &Tensor<f64>, beta: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>| -> Result<f64, String> {
            let (n, _) = layer_norm(x, gain.data(), beta.data()).map_err(err)?;
            let h = n.matmul(w1).map_err(err)?.relu().map_err(err)?;
            softmax_cross_entropy(&h.matmul(w2).map_err(err)?, &labels).map_err(err)
        };
        // Skip draws that land near a ReLU kink, where differences are meaningless.
        let (n, _) = layer_norm(&x, gain.data(), beta.data()).map_err(err)?;
        if n.matmul(&w1).map_err(err)?.data().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }

        let mut tape = Tape::new();
        let ids = [x.clone(), gain.clone(), beta.clone(), w1.clone(), w2.clone()].map(|t| tape.param(t));
        let nn = tape.layer_norm(ids[0], ids[1], ids[2]).map_err(err)?;
        let h = tape.matmul(nn, ids[3]).map_err(err)?;
        let h = tape.relu(h).map_err(err)?;
        let logits = tape.matmul(h, ids[4]).map_err(err)?;
        let loss = tape.softmax_cross_entropy(logits, &labels).map_err(err)?;
        let grads = tape.backward(loss).map_err(err)?;
        let g = |i: usize| grads.get(ids[i]).cloned().ok_or_else(|| format!("missing gradient {i}"));

        compare("x", &g(0)?, &central_diff(&x, &|v| plain(v, &gain, &beta, &w1, &w2))?)?;
        compare("gain", &g(1)?, &central_diff(&gain, &|v| plain(&x, v, &beta, &w1, &w2))?)?;
        compare("bias", &g(2)?, &central_diff(&beta, &|v| plain(&x, &gain, v, &w1, &w2))?)?;
        compare("w1", &g(3)?, &central_diff(&w1, &|v| plain(&x, &gain, &beta, v, &w2))?)?;
        compare("w2", &g(4)?, &central_diff(&w2, &|v| plain(&x, &gain, &beta, &w1, v))?)?;
    }
    Ok(format!("{trials} random compositions within 1e-4"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        assert!(quantizer_examples().is_ok());
        ste_closed_form(1, 20).unwrap();
        kernel_vs_oracle(1, 500).unwrap();
        finite_differences(1, 5).unwrap();
    }

    #[test]
    fn report_lists_all_checks() {
        let r = run_all(3);
        assert_eq!(r.checks.len(), 4);
        assert!(r.passed(), "{r:?}");
    }
}
