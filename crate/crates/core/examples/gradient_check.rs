// Checks the tape against closed-form straight-through gradients and
// central finite differences, then prints one gradient by hand.
//
// ```text
// cargo run -p bitlinear --example gradient_check
// ```

use bitlinear::autodiff::Tape;
use bitlinear::layer::{BitLinear, LayerOptions};
use bitlinear::quant::{Measure, QuantConfig};
use bitlinear::selftest;
use bitlinear::tensor::Tensor;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // One ternary layer without norm: dW = (x_q / x_scale)^T g.
    let opts = LayerOptions {
        quant: QuantConfig::new(8, Measure::Mean, 0.0)?,
        bias: false,
        norm: false,
        ..LayerOptions::default()
    };
    let layer = BitLinear::from_weights(Tensor::from_rows(&[vec![0.3f64], vec![-0.3]])?, None, None, opts)?;
    let mut tape = Tape::new();
    let ids = layer.register(&mut tape);
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -0.5]])?);
    let y = layer.forward_on_tape(&mut tape, &ids, x)?;
    let loss = tape.sum(y)?;
    let grads = tape.backward(loss)?;
    println!("y = {:?}", tape.value(y).data());
    println!("dL/dW = {:?}  (expected [127/128, -64/128])", grads.get(ids.weight).map(|g| g.data()));

    for (name, check) in [
        ("straight-through closed form", selftest::ste_closed_form(7, 25)),
        ("finite differences", selftest::finite_differences(7, 5)),
    ] {
        println!("{name}: {}", check.map_err(|e| format!("{name}: {e}"))?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
