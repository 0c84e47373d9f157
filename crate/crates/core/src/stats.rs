//! Global behavior statistics gathered from training interactions.

use std::fmt::Write as _;

use crate::data::{BehaviorSet, Interaction, Split};

/// Co-occurrence matrix `M`, frequency vector `m` and the raw counts.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorStats {
    /// Row-conditional `P(j present | i present)`, zero diagonal.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Number of training interactions carrying each behavior.
    pub frequency: Vec<f64>,
    /// `counts[i][j]` = interactions carrying both `i` and `j` (`i != j`).
    pub counts: Vec<Vec<u64>>,
}

impl BehaviorStats {
    pub fn from_interactions<'a>(n_behaviors: usize, interactions: impl IntoIterator<Item = &'a Interaction>) -> Self {
        Self::from_sets(n_behaviors, interactions.into_iter().map(|i| i.behaviors))
    }

    pub fn from_split(n_behaviors: usize, split: &Split) -> Self {
        Self::from_interactions(n_behaviors, split.train_interactions())
    }

    pub fn from_sets(n: usize, sets: impl IntoIterator<Item = BehaviorSet>) -> Self {
        let mut counts = vec![vec![0u64; n]; n];
        let mut freq = vec![0u64; n];
        for set in sets {
            if set.is_empty() {
                continue;
            }
            for i in set.iter().filter(|&i| i < n) {
                freq[i] += 1;
                for j in set.iter().filter(|&j| j < n && j != i) {
                    counts[i][j] += 1;
                }
            }
        }
        let cooccurrence = (0..n)
            .map(|i| {
                let denom = freq[i].max(1) as f64;
                (0..n)
                    .map(|j| if i == j { 0.0 } else { counts[i][j] as f64 / denom })
                    .collect()
            })
            .collect();
        Self {
            cooccurrence,
            frequency: freq.into_iter().map(|c| c as f64).collect(),
            counts,
        }
    }

    pub fn n_behaviors(&self) -> usize {
        self.frequency.len()
    }

    /// TSV diagnostic: `M` rows then the `m` row, six decimals.
    pub fn to_tsv(&self, names: &[String]) -> String {
        let mut out = String::new();
        out.push_str("matrix\tfrom");
        for n in names {
            let _ = write!(out, "\t{n}");
        }
        out.push('\n');
        for (i, row) in self.cooccurrence.iter().enumerate() {
            let _ = write!(out, "M\t{}", names[i]);
            for v in row {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out.push_str("m\t-");
        for v in &self.frequency {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
        out
    }
}

/// `M` alone.
pub fn compute_cooccurrence(n_behaviors: usize, train: &Split) -> Vec<Vec<f64>> {
    BehaviorStats::from_split(n_behaviors, train).cooccurrence
}

/// `m` alone.
pub fn compute_frequency(n_behaviors: usize, train: &Split) -> Vec<f64> {
    BehaviorStats::from_split(n_behaviors, train).frequency
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, leave_one_out_split, SynthConfig};
    use proptest::prelude::*;

    fn sets(bits: &[(&[u8], usize)]) -> Vec<BehaviorSet> {
        bits.iter()
            .flat_map(|(b, n)| std::iter::repeat(BehaviorSet::from_bits(b)).take(*n))
            .collect()
    }

    #[test]
    fn hand_counted_example() {
        let s = BehaviorStats::from_sets(3, sets(&[(&[1, 1, 0], 3), (&[1, 0, 0], 1)]));
        assert_eq!(s.frequency, vec![4.0, 3.0, 0.0]);
        assert_eq!(s.cooccurrence[0][1], 0.75);
        assert_eq!(s.cooccurrence[1][0], 1.0);
        for r in 0..3 {
            assert_eq!(s.cooccurrence[r][2], 0.0);
            assert_eq!(s.cooccurrence[r][r], 0.0);
        }
    }

    #[test]
    fn single_behavior_sets_give_zero_matrix() {
        let s = BehaviorStats::from_sets(3, sets(&[(&[1, 0, 0], 4), (&[0, 0, 1], 2)]));
        assert!(s.cooccurrence.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_counts_symmetric_matrix() {
        let s = BehaviorStats::from_sets(2, sets(&[(&[1, 1], 5), (&[1, 0], 2), (&[0, 1], 2)]));
        assert_eq!(s.cooccurrence[0][1], s.cooccurrence[1][0]);
    }

    #[test]
    fn frequency_counts() {
        let s = BehaviorStats::from_sets(3, sets(&[(&[1, 0, 0], 7), (&[1, 1, 0], 3)]));
        assert_eq!(s.frequency[0], 10.0);
        assert_eq!(s.frequency[2], 0.0);
    }

    #[test]
    fn synthetic_frequency_monte_carlo() {
        let cfg = SynthConfig {
            users: 500,
            items: 100,
            clusters: 4,
            min_len: 22,
            max_len: 22,
            ..Default::default()
        };
        let split = leave_one_out_split(&generate_synthetic(&cfg, 9).unwrap());
        let n = split.train_interactions().count();
        assert_eq!(n, 10_000);
        let m = compute_frequency(4, &split);
        let f = m[1] / n as f64;
        assert!((0.29..=0.31).contains(&f), "{f}");
    }

    #[test]
    fn tsv_has_six_decimals() {
        let s = BehaviorStats::from_sets(2, sets(&[(&[1, 1], 1), (&[1, 0], 2)]));
        let t = s.to_tsv(&["a".into(), "b".into()]);
        assert!(t.contains("M\ta\t0.000000\t0.333333"));
        assert!(t.contains("m\t-\t3.000000\t1.000000"));
    }

    proptest! {
        #[test]
        fn invariants(raw in proptest::collection::vec(0u64..32, 1..200)) {
            let s = BehaviorStats::from_sets(5, raw.iter().map(|&b| BehaviorSet(b)));
            let again = BehaviorStats::from_sets(5, raw.iter().map(|&b| BehaviorSet(b)));
            prop_assert_eq!(&s, &again);
            for i in 0..5 {
                let row: u64 = s.counts[i].iter().sum();
                prop_assert!(row as f64 <= 4.0 * s.frequency[i]);
                prop_assert_eq!(s.cooccurrence[i][i], 0.0);
                for j in 0..5 {
                    prop_assert!((0.0..=1.0).contains(&s.cooccurrence[i][j]));
                }
                let direct = raw.iter().filter(|&&b| BehaviorSet(b).contains(i)).count() as f64;
                prop_assert_eq!(s.frequency[i], direct);
            }
        }
    }
}
