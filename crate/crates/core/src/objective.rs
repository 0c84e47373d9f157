//! Scoring, richness-weighted BCE with sampled negatives, the sequence-level
//! contrastive loss and their combination.

use std::collections::HashSet;

use rand::Rng;

use crate::data::{truncate_pad, BehaviorSet, Interaction, UserSequence, PAD_ITEM};
use crate::encoder::Blade;
use crate::error::{BladeError, Result};
use crate::tensor::{dot, log_sigmoid, Graph, Mat, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Contrastive weight λ.
    pub lambda: f64,
    /// Temperature τ.
    pub tau: f64,
    pub negatives_per_positive: usize,
    pub brw_enabled: bool,
    pub cl_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 1.0,
            negatives_per_positive: 1,
            brw_enabled: true,
            cl_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(BladeError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(BladeError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.negatives_per_positive == 0 {
            return Err(BladeError::Config("negatives_per_positive must be >= 1".into()));
        }
        Ok(())
    }
}

/// `ŷ = u · e_v`
pub fn predict_score<T: Scalar>(u: &[T], item: usize, model: &Blade<T>) -> Result<T> {
    if item == PAD_ITEM {
        return Err(BladeError::PaddingItem(item));
    }
    if item >= model.dims.items {
        return Err(BladeError::Data(format!("item {item} out of range")));
    }
    Ok(dot(u, model.item_embedding(item)))
}

/// `||b||_0 / |B|`, or 1 when weighting is disabled.
pub fn behavior_richness_weight(next: BehaviorSet, n_behaviors: usize, enabled: bool) -> f64 {
    if enabled {
        next.count() as f64 / n_behaviors as f64
    } else {
        1.0
    }
}

/// Per-step BCE term `−w [ln σ(pos) + ln(1 − σ(neg))]`.
pub fn bce_term(pos: f64, neg: f64, w: f64) -> f64 {
    -w * (log_sigmoid(pos) + log_sigmoid(-neg))
}

/// One training sequence: shifted inputs and next-step supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub seq: UserSequence,
    /// Ground-truth next item per position (`PAD_ITEM` on padding).
    pub targets: Vec<usize>,
    /// Behavior set of the next interaction per position (empty on padding).
    pub target_behaviors: Vec<BehaviorSet>,
    /// Every item the user touched (excluded from negative sampling).
    pub history: HashSet<usize>,
}

impl TrainExample {
    /// Inputs `events[..n-1]`, targets `events[1..]`, both truncated to `max_len`.
    /// `None` when fewer than two events exist.
    pub fn from_events(user: usize, events: &[Interaction], max_len: usize) -> Option<Self> {
        if events.len() < 2 {
            return None;
        }
        let n = events.len();
        let seq = truncate_pad(user, &events[..n - 1], max_len);
        let next = truncate_pad(user, &events[1..], max_len);
        Some(Self {
            seq,
            targets: next.items,
            target_behaviors: next.behaviors,
            history: events.iter().map(|e| e.item).collect(),
        })
    }

    /// Behavior set conditioning the last step.
    pub fn final_target(&self) -> BehaviorSet {
        *self.target_behaviors.last().expect("non-empty sequence")
    }

    /// `δ · w` per position.
    pub fn step_weights(&self, n_behaviors: usize, brw: bool) -> Vec<f64> {
        self.targets
            .iter()
            .zip(&self.target_behaviors)
            .map(|(&t, &b)| {
                if t == PAD_ITEM {
                    0.0
                } else {
                    behavior_richness_weight(b, n_behaviors, brw)
                }
            })
            .collect()
    }

    pub fn valid_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD_ITEM).count()
    }
}

/// Uniform negatives `j ∉ history` for each real target, `count` per step.
/// Returns `count` rows of length `L`, with `PAD_ITEM` on padding steps.
pub fn sample_negatives<R: Rng + ?Sized>(
    ex: &TrainExample,
    num_items: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let real_items = num_items.saturating_sub(1);
    let blocked = ex.history.iter().filter(|&&i| i != PAD_ITEM && i < num_items).count();
    if real_items <= blocked {
        return Err(BladeError::NegativeSamplerExhausted {
            user: ex.seq.user,
            history: blocked,
            catalog: real_items,
        });
    }
    Ok((0..count)
        .map(|_| {
            ex.targets
                .iter()
                .map(|&t| {
                    if t == PAD_ITEM {
                        return PAD_ITEM;
                    }
                    loop {
                        let j = rng.gen_range(1..num_items);
                        if !ex.history.contains(&j) {
                            return j;
                        }
                    }
                })
                .collect()
        })
        .collect())
}

/// Inputs of the next-item loss for one encoded sequence.
pub struct NextItemTerm<'a> {
    pub user: Var,
    pub targets: &'a [usize],
    /// `δ · w` per position.
    pub weights: &'a [f64],
    pub negatives: &'a [Vec<usize>],
}

/// Weighted BCE summed over steps and sequences, divided by the number of
/// real targets. Returns a constant zero when there are none.
pub fn next_item_loss<T: Scalar>(g: &mut Graph<'_, T>, model: &Blade<T>, terms: &[NextItemTerm<'_>]) -> Var {
    let total: usize = terms
        .iter()
        .map(|t| t.targets.iter().filter(|&&i| i != PAD_ITEM).count())
        .sum();
    if total == 0 {
        return g.constant(Mat::zeros(1, 1));
    }
    let norm = -1.0 / total as f64;
    let table = model.layout.item_table;
    let mut acc: Option<Var> = None;
    for t in terms {
        let n = t.targets.len();
        let w = Mat::from_vec(n, 1, t.weights.iter().map(|&w| T::lit(w * norm)).collect());
        let pos = g.gather(table, t.targets);
        let pos = g.row_dot(t.user, pos);
        let pos = g.log_sigmoid(pos);
        let mut s = g.weighted_sum(pos, w.clone());
        for negs in t.negatives {
            let e = g.gather(table, negs);
            let score = g.row_dot(t.user, e);
            let flipped = g.scale(score, T::lit(-1.0));
            let ls = g.log_sigmoid(flipped);
            let term = g.weighted_sum(ls, w.clone());
            s = g.add(s, term);
        }
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.expect("non-empty terms")
}

/// Symmetric InfoNCE over flattened per-view representations, averaged over
/// sequences. For anchor `h¹_u` the denominator holds the positive `h²_u`
/// and both views of every other sequence in the batch.
pub fn seq_cl_loss<T: Scalar>(g: &mut Graph<'_, T>, views: &[(Var, Var)], tau: f64) -> Result<Var> {
    let n = views.len();
    if n == 0 {
        return Err(BladeError::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(2 * n);
    for &(a, b) in views {
        rows.push(g.flatten(a));
        rows.push(g.flatten(b));
    }
    let h = g.concat_rows(&rows);
    let sim = g.matmul_t(h, h);
    let sim = g.scale(sim, T::lit(1.0 / tau));
    let m = 2 * n;
    let mask: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    let logp = g.log_softmax(sim, mask);
    let mut w = Mat::zeros(m, m);
    let coef = T::lit(-1.0 / n as f64);
    for i in 0..m {
        w.set(i, i ^ 1, coef);
    }
    Ok(g.weighted_sum(logp, w))
}

/// `next + λ · cl`
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, next: Var, cl: Option<Var>, cfg: &LossConfig) -> Var {
    match cl {
        Some(cl) if cfg.cl_enabled && cfg.lambda != 0.0 => {
            let s = g.scale(cl, T::lit(cfg.lambda));
            g.add(next, s)
        }
        _ => next,
    }
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(next: f64, cl: f64, cfg: &LossConfig) -> f64 {
    if cfg.cl_enabled && cfg.lambda != 0.0 {
        next + cfg.lambda * cl
    } else {
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ModelDims};
    use crate::tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Blade<f64> {
        let cfg = EncoderConfig {
            d: 4,
            max_len: 4,
            blocks: 1,
            heads: 1,
            experts: 2,
            dropout: 0.0,
            ..Default::default()
        };
        Blade::new(cfg, ModelDims { users: 2, items: 8, behaviors: 4 }, 1).unwrap()
    }

    #[test]
    fn score_identities() {
        let mut m = tiny();
        let t = m.layout.item_table;
        m.params.value_mut(t).row_mut(3).copy_from_slice(&[0.5, 0.5, 0.5, 0.5]);
        m.params.value_mut(t).row_mut(4).copy_from_slice(&[0.5, -0.5, 0.5, -0.5]);
        assert_eq!(predict_score(&[0.5, 0.5, 0.5, 0.5], 3, &m).unwrap(), 1.0);
        assert_eq!(predict_score(&[0.5, 0.5, 0.5, 0.5], 4, &m).unwrap(), 0.0);
        assert!(matches!(predict_score(&[0.0; 4], 0, &m), Err(BladeError::PaddingItem(0))));
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let e = m.item_embedding(5).to_vec();
        let expect = u[0] * e[0] + u[1] * e[1] + u[2] * e[2] + u[3] * e[3];
        assert_eq!(predict_score(&u, 5, &m).unwrap(), expect);
    }

    #[test]
    fn richness_weights() {
        assert_eq!(behavior_richness_weight(BehaviorSet::from_indices(&[0, 2]), 4, true), 0.5);
        assert_eq!(behavior_richness_weight(BehaviorSet::full(4), 4, true), 1.0);
        assert_eq!(behavior_richness_weight(BehaviorSet::from_indices(&[1]), 4, true), 0.25);
        assert_eq!(behavior_richness_weight(BehaviorSet::from_indices(&[1]), 4, false), 1.0);
    }

    #[test]
    fn bce_limits() {
        assert!(bce_term(1e6, -1e6, 1.0).abs() < 1e-12);
        assert!((bce_term(0.0, 0.0, 1.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn example() -> TrainExample {
        let ev: Vec<Interaction> = [(1, &[0][..]), (2, &[0, 1]), (3, &[0]), (4, &[0, 1, 2])]
            .iter()
            .map(|(i, b)| Interaction::new(*i, BehaviorSet::from_indices(b)))
            .collect();
        TrainExample::from_events(0, &ev, 4).unwrap()
    }

    #[test]
    fn example_shifts_targets() {
        let ex = example();
        assert_eq!(ex.seq.items, vec![0, 1, 2, 3]);
        assert_eq!(ex.targets, vec![0, 2, 3, 4]);
        assert_eq!(ex.final_target(), BehaviorSet::from_indices(&[0, 1, 2]));
        assert_eq!(ex.step_weights(4, true), vec![0.0, 0.5, 0.25, 0.75]);
        assert!(TrainExample::from_events(0, &[Interaction::new(1, BehaviorSet(1))], 4).is_none());
    }

    #[test]
    fn negatives_avoid_history() {
        let ex = example();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let negs = sample_negatives(&ex, 8, 3, &mut r).unwrap();
        assert_eq!(negs.len(), 3);
        for row in &negs {
            assert_eq!(row[0], PAD_ITEM);
            assert!(row[1..].iter().all(|j| (5..8).contains(j)));
        }
        assert!(matches!(
            sample_negatives(&ex, 5, 1, &mut r),
            Err(BladeError::NegativeSamplerExhausted { .. })
        ));
    }

    #[test]
    fn next_loss_matches_closed_form() {
        let m = tiny();
        let ex = example();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let negs = sample_negatives(&ex, 8, 1, &mut r).unwrap();
        let u = m.forward(&ex.seq, Some(ex.final_target())).unwrap();
        let weights = ex.step_weights(4, true);
        let mut g = Graph::new(&m.params);
        let uv = g.constant(u.clone());
        let loss = next_item_loss(
            &mut g,
            &m,
            &[NextItemTerm {
                user: uv,
                targets: &ex.targets,
                weights: &weights,
                negatives: &negs,
            }],
        );
        let mut expect = 0.0;
        for l in 1..4 {
            let pos = dot(u.row(l), m.item_embedding(ex.targets[l]));
            let neg = dot(u.row(l), m.item_embedding(negs[0][l]));
            expect += bce_term(pos, neg, weights[l]);
        }
        expect /= 3.0;
        assert!((g.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_give_two_ln2() {
        let p: ParamStore<f64> = tiny().params;
        let m = Blade::from_params(tiny().cfg, tiny().dims, p).unwrap();
        let ex = example();
        let weights = vec![0.0, 1.0, 1.0, 1.0];
        let negs = vec![vec![0, 5, 6, 7]];
        let mut g = Graph::new(&m.params);
        let uv = g.constant(Mat::zeros(4, 4));
        let loss = next_item_loss(
            &mut g,
            &m,
            &[NextItemTerm {
                user: uv,
                targets: &ex.targets,
                weights: &weights,
                negatives: &negs,
            }],
        );
        assert!((g.scalar(loss) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn all_padding_batch_is_zero() {
        let m = tiny();
        let mut g = Graph::new(&m.params);
        let uv = g.constant(Mat::zeros(4, 4));
        let targets = vec![0; 4];
        let weights = vec![0.0; 4];
        let negs = vec![vec![0; 4]];
        let loss = next_item_loss(
            &mut g,
            &m,
            &[NextItemTerm {
                user: uv,
                targets: &targets,
                weights: &weights,
                negatives: &negs,
            }],
        );
        assert_eq!(g.scalar(loss), 0.0);
    }

    fn cl_value(views: &[(Vec<f64>, Vec<f64>)], tau: f64) -> f64 {
        let p = ParamStore::<f64>::new();
        let mut g = Graph::new(&p);
        let vs: Vec<(Var, Var)> = views
            .iter()
            .map(|(a, b)| {
                (
                    g.constant(Mat::from_vec(1, a.len(), a.clone())),
                    g.constant(Mat::from_vec(1, b.len(), b.clone())),
                )
            })
            .collect();
        let l = seq_cl_loss(&mut g, &vs, tau).unwrap();
        g.scalar(l)
    }

    #[test]
    fn cl_single_sequence_is_zero() {
        assert_eq!(cl_value(&[(vec![1.0, 2.0], vec![0.5, -1.0])], 1.0), 0.0);
    }

    #[test]
    fn cl_two_sequences_log_sum_exp_oracle() {
        let h = [vec![1.0, 0.0], vec![0.5, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]];
        let views = vec![(h[0].clone(), h[1].clone()), (h[2].clone(), h[3].clone())];
        let sim = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
        let mut expect = 0.0;
        for i in 0..4 {
            let p = i ^ 1;
            let lse = (0..4).filter(|&j| j != i).map(|j| sim(&h[i], &h[j]).exp()).sum::<f64>().ln();
            expect += lse - sim(&h[i], &h[p]);
        }
        expect /= 2.0;
        assert!((cl_value(&views, 1.0) - expect).abs() < 1e-6);
    }

    #[test]
    fn cl_temperature_limit() {
        let views = vec![(vec![1.0, 0.2], vec![0.4, 0.5]), (vec![-1.0, 2.0], vec![0.3, 1.0]), (vec![0.1, 0.1], vec![2.0, 0.0])];
        // each anchor has 5 denominator terms; two anchors per sequence
        let limit = 2.0 * (5.0f64).ln();
        assert!((cl_value(&views, 1e9) - limit).abs() < 1e-6);
    }

    #[test]
    fn cl_order_invariant_and_bounded() {
        let v = vec![(vec![1.0, 0.2], vec![0.4, 0.5]), (vec![-1.0, 2.0], vec![0.3, 1.0]), (vec![0.1, 0.1], vec![2.0, 0.0])];
        let mut w = v.clone();
        w.rotate_left(1);
        assert!((cl_value(&v, 0.7) - cl_value(&w, 0.7)).abs() < 1e-12);
        let same: Vec<_> = v.iter().map(|(a, _)| (a.clone(), a.clone())).collect();
        // identical views: each anchor's loss ≤ ln(#denominator terms)
        assert!(cl_value(&same, 1.0) <= 2.0 * (5.0f64).ln() + 1e-9);
    }

    #[test]
    fn cl_empty_batch_errors() {
        assert!(matches!(
            seq_cl_loss(&mut Graph::<f64>::new(&ParamStore::new()), &[], 1.0),
            Err(BladeError::EmptyBatch)
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda, 0.1);
        assert!((total_loss_value(1.0, 2.0, &cfg) - 1.2).abs() < 1e-15);
        assert_eq!(total_loss_value(1.0, 2.0, &LossConfig { lambda: 0.0, ..cfg.clone() }), 1.0);
        assert_eq!(total_loss_value(1.0, 2.0, &LossConfig { cl_enabled: false, ..cfg.clone() }), 1.0);
        // d total / d λ = cl, by central differences
        let eps = 1e-6;
        let up = total_loss_value(1.0, 2.0, &LossConfig { lambda: 0.1 + eps, ..cfg.clone() });
        let dn = total_loss_value(1.0, 2.0, &LossConfig { lambda: 0.1 - eps, ..cfg });
        assert!(((up - dn) / (2.0 * eps) - 2.0).abs() < 1e-6);
    }
}
