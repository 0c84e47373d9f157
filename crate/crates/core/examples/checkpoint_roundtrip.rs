//! Save a model, load it back and confirm the metrics are bit-identical.
//!
//! cargo run --example checkpoint_roundtrip

use blade::checkpoint;
use blade::data::{generate_synthetic, SynthConfig};
use blade::eval::evaluate;
use blade::{Blade, EncoderConfig, EvalOptions, TrainData};

fn main() -> blade::Result<()> {
    let synth = SynthConfig {
        users: 30,
        items: 60,
        ..Default::default()
    };
    let data = TrainData::new(&generate_synthetic(&synth, 4)?);
    let cfg = EncoderConfig {
        d: 16,
        max_len: 10,
        ..Default::default()
    };
    let model = Blade::<f32>::new(cfg, data.dims, 9)?;

    let path = std::env::temp_dir().join("blade-example.ckpt");
    checkpoint::save(&model, &path)?;
    let loaded = checkpoint::load::<f32>(&path)?;
    println!("{} bytes, {} parameters", std::fs::metadata(&path)?.len(), loaded.parameter_count());

    let opts = EvalOptions::default();
    let a = evaluate(&model, &data.split.test, data.aux_index, &opts)?;
    let b = evaluate(&loaded, &data.split.test, data.aux_index, &opts)?;
    assert_eq!(a, b);
    println!("{}", b.to_key_values());
    Ok(())
}
