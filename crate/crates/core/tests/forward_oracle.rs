mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blade::data::{truncate_pad, BehaviorSet, Interaction};
use blade::encoder::CausalMask;
use blade::{Blade, EncoderConfig, FusionMode, ModelDims};

fn fusion() -> impl Strategy<Value = FusionMode> {
    prop_oneof![Just(FusionMode::Sum), Just(FusionMode::Concat), Just(FusionMode::Gate)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_matches_dense_oracle(
        fusion in fusion(),
        heads in 1usize..=2,
        experts in 1usize..=3,
        blocks in 1usize..=2,
        alpha in 0.0f64..=1.0,
        ablation in 0usize..3,
        post in any::<bool>(),
        seed in 0u64..1000,
        len in 1usize..=7,
    ) {
        let dims = ModelDims { users: 3, items: 12, behaviors: 3 };
        let cfg = EncoderConfig {
            d: 4,
            max_len: 5,
            blocks,
            heads,
            experts,
            dropout: 0.0,
            alpha,
            fusion,
            ablate_ef: ablation == 1,
            ablate_if: ablation == 2,
            causal_mask: if post { CausalMask::PostSoftmax } else { CausalMask::PreSoftmax },
            ..Default::default()
        };
        let mut model = Blade::<f64>::new(cfg, dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut model.params.params {
            for v in &mut p.value.data {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let set = |rng: &mut ChaCha8Rng| BehaviorSet(rng.gen_range(1..8));
        let events: Vec<Interaction> = (0..len).map(|_| Interaction::new(rng.gen_range(1..12), set(&mut rng))).collect();
        let seq = truncate_pad(rng.gen_range(0..3), &events, 5);
        let target = set(&mut rng);
        let got = model.forward(&seq, Some(target)).unwrap();
        let want = common::oracle_forward(&model, &seq, target);
        prop_assert!(common::max_abs_diff(&got, &want) <= 1e-10);
    }
}
