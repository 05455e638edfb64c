//! Times one batch-128 forward pass of a full-width probe (d=4096, h=11008).
//!
//! cargo run --release -p halprobe --example probe_timing

use std::time::Instant;

use halprobe::probe::{forward, init_params, predict, Backbone, Mode};
use halprobe::Matrix;

fn main() -> halprobe::Result<()> {
    let (d, h, n) = (4096, 11008, 128);
    let params = init_params(d, h, 2, Backbone::Gated, 0)?;
    let data = (0..n * d).map(|i| ((i % 97) as f64 / 97.0) - 0.5).collect();
    let x = Matrix::from_vec(n, d, data)?;
    let start = Instant::now();
    let (logits, _) = forward(&params, &x)?;
    let _ = predict(&logits, Mode::Classification)?;
    let secs = start.elapsed().as_secs_f64();
    println!("batch {n}: {secs:.3} s total, {:.5} s per sample", secs / n as f64);
    Ok(())
}
