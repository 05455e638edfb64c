//! Trains a default-sized gated probe on planted Gaussians and prints test
//! accuracy.
//!
//! cargo run --release -p halprobe --example planted_training

use std::time::Instant;

use halprobe::probe::{init_params, Backbone, Mode};
use halprobe::synthetic::planted_gaussians;
use halprobe::trainer::{evaluate, train, LabeledData, TargetValues, TrainConfig};

fn main() -> halprobe::Result<()> {
    let (xtr, ytr) = planted_gaussians(2000, 64, 8, 1.0, 1)?;
    let (xte, yte) = planted_gaussians(500, 64, 8, 1.0, 2)?;
    let train_data = LabeledData::new(xtr, TargetValues::Classes(ytr))?;
    let test_data = LabeledData::new(xte, TargetValues::Classes(yte))?;
    let start = Instant::now();
    let params = init_params(64, 11008, 2, Backbone::Gated, 0)?;
    let (params, history) = train(&TrainConfig::default(), &train_data, None, params)?;
    let report = evaluate(&params, &test_data, Mode::Classification)?;
    for h in &history {
        println!("epoch {} loss {:.4}", h.epoch, h.train_loss);
    }
    println!(
        "test accuracy {:.4} in {:.1} s",
        report.accuracy.unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
