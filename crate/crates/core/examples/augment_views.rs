//! The three behavior-set augmentations applied to one sequence.
//!
//! cargo run --example augment_views

use blade::augment::{augment_sequence, stream_seed, AugmentConfig, AugmentMethod};
use blade::data::{generate_synthetic, leave_one_out_split, truncate_pad, SynthConfig};
use blade::stats::BehaviorStats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> blade::Result<()> {
    let ds = generate_synthetic(&SynthConfig::default(), 5)?;
    let split = leave_one_out_split(&ds);
    let stats = BehaviorStats::from_split(ds.behaviors.size(), &split);
    let aux = ds.behaviors.aux_index();
    let seq = truncate_pad(0, &split.train[0].events, 12);

    let show = |label: &str, s: &blade::UserSequence| {
        let sets: Vec<String> = s
            .behaviors
            .iter()
            .zip(&s.valid_mask)
            .filter(|(_, &v)| v)
            .map(|(b, _)| ds.behaviors.format_set(*b))
            .collect();
        println!("{label:<12} {}", sets.join(" "));
    };
    show("original", &seq);
    for method in [AugmentMethod::CooccurAdd, AugmentMethod::FreqMask, AugmentMethod::AuxFlip] {
        let cfg = AugmentConfig {
            method,
            rho: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, seq.user, 1, 1));
        let view = augment_sequence(&seq, &cfg, &stats, aux, &mut rng);
        assert_eq!(view.items, seq.items);
        show(&method.to_string(), &view);
    }
    Ok(())
}
