//! Train on the clustered synthetic data and report test metrics.
//!
//! cargo run --release --example train_synthetic

use blade::augment::AugmentConfig;
use blade::data::{generate_synthetic, SynthConfig};
use blade::eval::evaluate;
use blade::{EncoderConfig, EvalOptions, LossConfig, TrainConfig, TrainData};

fn main() -> blade::Result<()> {
    let synth = SynthConfig {
        users: 200,
        items: 300,
        clusters: 10,
        ..Default::default()
    };
    let data = TrainData::new(&generate_synthetic(&synth, 1)?);
    let enc = EncoderConfig {
        max_len: 20,
        dropout: 0.1,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 3e-3,
        eval_every: 5,
        ..Default::default()
    };
    let out = blade::trainer::train::<f32>(&data, &enc, &LossConfig::default(), &AugmentConfig::default(), &cfg)?;
    for rec in &out.log {
        println!("{}", rec.to_json_line());
    }
    let report = evaluate(&out.best, &data.split.test, data.aux_index, &EvalOptions::default())?;
    println!("best epoch {}: {}", out.best_epoch, report.to_key_values());
    Ok(())
}
