// AbsMax activation quantization, AbsMeasure weight ternarization and the
// 2-bit packing used by the integer kernel.
//
// ```text
// cargo run -p bitlinear --example quantize_basics
// ```

use bitlinear::kernel::{ternary_matmul, PackedTernary};
use bitlinear::quant::{dequantize, quantize_activation_rows, quantize_weights, Measure, QuantConfig};
use bitlinear::tensor::Tensor;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = QuantConfig::new(8, Measure::Mean, 0.0)?;

    let x = Tensor::from_rows(&[vec![1.0f32, -0.5]])?;
    let xq = quantize_activation_rows(&x, &cfg)?;
    println!("x = {:?} -> x_q = {:?}, x_scale = {}", x.data(), xq.values.data(), xq.x_scales[0]);

    let w = Tensor::from_rows(&[vec![0.3f32], vec![-0.3]])?;
    let wq = quantize_weights(&w, &cfg)?;
    println!("W = {:?} -> W_q = {:?}, w_scale = {:.6}", w.data(), wq.values.data(), wq.w_scale);

    for measure in [Measure::Mean, Measure::Median] {
        let skewed = Tensor::from_slice(&[0.05f32, 0.05, 0.05, 1.0])?;
        let q = quantize_weights(&skewed, &QuantConfig { measure, ..cfg })?;
        println!("{measure:?} on {:?} -> {:?}", skewed.data(), q.values.data());
    }

    let packed = PackedTernary::pack(&wq.values, wq.w_scale)?;
    println!("packed bytes: {:02x?}", packed.bytes());
    let y_q = ternary_matmul(&xq.values_i8()?, &packed)?;
    let y = dequantize(&y_q, wq.w_scale, xq.x_scales[0])?;
    println!("y_q = {:?}, y = {:.6}", y_q.data(), y.data()[0]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
