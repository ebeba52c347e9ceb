// Times the packed ternary kernel against a plain `f32` matmul on the
// layer shapes of the MNIST classifier.
//
// ```text
// cargo run --release -p bitlinear --example kernel_bench -- [reps]
// ```

use bitlinear::kernel::{bench, BenchShape};

fn report(reps: usize, shapes: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let shapes: Vec<BenchShape> = shapes.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let report = bench(&shapes, reps, 0)?;
    for row in &report.rows {
        println!(
            "{:>14}  ternary {:>7.2} Gop/s  f32 {:>7.2} Gop/s  speedup {:.2}x",
            row.shape.to_string(),
            row.ternary_gops,
            row.float_gops,
            row.ratio()
        );
    }
    print!("{}", report.to_csv());
    Ok(())
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    report(3, &["16x784x128", "16x128x64", "16x64x10"])
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reps = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    report(reps, &["128x784x128", "128x128x64", "128x64x10", "1x4096x4096"])
}
