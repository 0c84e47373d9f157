//! Co-occurrence matrix and behavior frequencies of the training split.
//!
//! cargo run --example behavior_stats

use blade::data::{generate_synthetic, leave_one_out_split, SynthConfig};
use blade::stats::BehaviorStats;

fn main() -> blade::Result<()> {
    let cfg = SynthConfig::default();
    let ds = generate_synthetic(&cfg, 3)?;
    let split = leave_one_out_split(&ds);
    let stats = BehaviorStats::from_split(ds.behaviors.size(), &split);
    print!("{}", stats.to_tsv(ds.behaviors.names()));

    // every row of M is P(j | i), so rows stay within [0, 1] and the diagonal is 0
    for (i, row) in stats.cooccurrence.iter().enumerate() {
        assert_eq!(row[i], 0.0);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    Ok(())
}
