//! One forward pass: personalised behavior-set embeddings and user states.
//!
//! cargo run --example encoder_forward

use blade::data::{truncate_pad, BehaviorSet, Interaction};
use blade::{Blade, EncoderConfig, FusionMode, ModelDims};

fn main() -> blade::Result<()> {
    let dims = ModelDims {
        users: 2,
        items: 30,
        behaviors: 4,
    };
    let cfg = EncoderConfig {
        d: 16,
        max_len: 6,
        fusion: FusionMode::Gate,
        ..Default::default()
    };
    let model = Blade::<f32>::new(cfg, dims, 7)?;
    println!("{} parameters", model.parameter_count());

    let events = [
        Interaction::new(4, BehaviorSet::from_indices(&[0])),
        Interaction::new(9, BehaviorSet::from_indices(&[0, 1])),
        Interaction::new(12, BehaviorSet::from_indices(&[0, 2, 3])),
    ];
    let seq = truncate_pad(1, &events, 6);
    let target = BehaviorSet::from_indices(&[0, 1]);

    let beta = model.encode_behavior_set(target, 1)?;
    println!("beta(click+like) = {:?}", &beta[..4]);

    let trace = model.trace(&seq, Some(target))?;
    println!("U is {}x{}; padding rows are zero: {}", trace.user.rows, trace.user.cols, trace.user.row(0).iter().all(|&x| x == 0.0));
    let last = trace.user.row(5);
    let scores: Vec<f32> = (1..=3).map(|i| model.item_embedding(i).iter().zip(last).map(|(a, b)| a * b).sum()).collect();
    println!("last-step scores for items 1..3: {scores:?}");
    Ok(())
}
