//! Full-ranking evaluation split into head and tail users.
//!
//! Tail users are those whose history is dominated by the rare behaviors.
//!
//! cargo run --release --example evaluate_groups

use blade::augment::AugmentConfig;
use blade::data::{generate_synthetic, BehaviorSet, SynthConfig};
use blade::eval::{evaluate_with_groups, TailCounting};
use blade::{EncoderConfig, EvalOptions, LossConfig, TrainConfig, TrainData};

fn main() -> blade::Result<()> {
    let synth = SynthConfig {
        users: 150,
        items: 200,
        clusters: 8,
        marginals: vec![0.6, 0.5, 0.4, 0.4],
        ..Default::default()
    };
    let ds = generate_synthetic(&synth, 2)?;
    let data = TrainData::new(&ds);
    let enc = EncoderConfig {
        max_len: 20,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 3e-3,
        eval_every: 10,
        ..Default::default()
    };
    let out = blade::trainer::train::<f32>(&data, &enc, &LossConfig::default(), &AugmentConfig::default(), &cfg)?;

    let tail = BehaviorSet::from_indices(&[ds.behaviors.index_of("share").unwrap(), ds.behaviors.index_of("follow").unwrap()]);
    let opts = EvalOptions {
        ks: vec![1, 5, 10, 20],
        ..Default::default()
    };
    let report = evaluate_with_groups(&out.best, &data.split.test, data.aux_index, &opts, tail, 0.5, TailCounting::Interaction)?;
    print!("{}", report.to_tsv());
    Ok(())
}
