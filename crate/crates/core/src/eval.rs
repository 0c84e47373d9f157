//! Full-ranking evaluation (HR@k, NDCG@k) and the head/tail user partition.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{truncate_pad, BehaviorSet, EvalCase, PAD_ITEM};
use crate::encoder::Blade;
use crate::error::{BladeError, Result};
use crate::tensor::{dot, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub count: usize,
    pub head: Option<Box<MetricsReport>>,
    pub tail: Option<Box<MetricsReport>>,
}

impl MetricsReport {
    /// Mean metrics over per-case target ranks (1-based).
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mut hr = vec![0.0; ks.len()];
        let mut ndcg = vec![0.0; ks.len()];
        for &r in ranks {
            for (i, &k) in ks.iter().enumerate() {
                let (h, g) = hr_ndcg_at_k(r, k);
                hr[i] += h;
                ndcg[i] += g;
            }
        }
        hr.iter_mut().chain(ndcg.iter_mut()).for_each(|v| *v /= n);
        Self {
            ks: ks.to_vec(),
            hr,
            ndcg,
            count: ranks.len(),
            head: None,
            tail: None,
        }
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    fn groups(&self) -> Vec<(&'static str, &MetricsReport)> {
        let mut g = vec![("all", self)];
        if let Some(h) = &self.head {
            g.push(("head", h));
        }
        if let Some(t) = &self.tail {
            g.push(("tail", t));
        }
        g
    }

    /// One row per group.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tusers");
        for k in &self.ks {
            let _ = write!(out, "\tHR@{k}\tNDCG@{k}");
        }
        out.push('\n');
        for (name, r) in self.groups() {
            let _ = write!(out, "{name}\t{}", r.count);
            for i in 0..r.ks.len() {
                let _ = write!(out, "\t{:.6}\t{:.6}", r.hr[i], r.ndcg[i]);
            }
            out.push('\n');
        }
        out
    }

    /// `group.metric@k=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (name, r) in self.groups() {
            let _ = writeln!(out, "{name}.users={}", r.count);
            for (i, k) in r.ks.iter().enumerate() {
                let _ = writeln!(out, "{name}.hr@{k}={:.17e}", r.hr[i]);
                let _ = writeln!(out, "{name}.ndcg@{k}={:.17e}", r.ndcg[i]);
            }
        }
        out
    }
}

/// Single-target HR and NDCG at cutoff `k` for a 1-based rank.
pub fn hr_ndcg_at_k(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Scores of every item under representation `u` (index 0 included).
pub fn score_all<T: Scalar>(u: &[T], model: &Blade<T>) -> Vec<T> {
    let table = model.params.value(model.layout.item_table);
    (0..table.rows).map(|i| dot(u, table.row(i))).collect()
}

/// Catalog sorted by descending score, ties by ascending index; padding and
/// `exclude` removed.
pub fn full_rank<T: Scalar>(u: &[T], model: &Blade<T>, exclude: &HashSet<usize>) -> Vec<usize> {
    rank_scores(&score_all(u, model), exclude)
}

pub fn rank_scores<T: Scalar>(scores: &[T], exclude: &HashSet<usize>) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| *i != PAD_ITEM && !exclude.contains(i))
        .collect();
    items.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    items
}

/// 1-based rank of `target` among non-excluded items, with the same tie rule
/// as [`rank_scores`]. The target itself is never excluded.
pub fn target_rank<T: Scalar>(scores: &[T], target: usize, exclude: &HashSet<usize>) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| {
            i != PAD_ITEM && i != target && !exclude.contains(&i) && (s > st || (s == st && i < target))
        })
        .count()
}

/// Behavior set used to condition the final query at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    GroundTruth,
    AuxOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub exclude_history: bool,
    pub conditioning: Conditioning,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            exclude_history: true,
            conditioning: Conditioning::GroundTruth,
        }
    }
}

/// Target rank for every case, in input order.
pub fn case_ranks<T: Scalar>(model: &Blade<T>, cases: &[EvalCase], aux_index: usize, opts: &EvalOptions) -> Result<Vec<usize>> {
    cases
        .par_iter()
        .map(|c| {
            let seq = truncate_pad(c.user, &c.history, model.cfg.max_len);
            let cond = match opts.conditioning {
                Conditioning::GroundTruth => c.target.behaviors,
                Conditioning::AuxOnly => BehaviorSet::EMPTY.with(aux_index),
            };
            let u = model.forward(&seq, Some(cond))?;
            let last = u.row(u.rows - 1);
            let scores = score_all(last, model);
            let exclude: HashSet<usize> = if opts.exclude_history {
                c.history.iter().map(|i| i.item).collect()
            } else {
                HashSet::new()
            };
            Ok(target_rank(&scores, c.target.item, &exclude))
        })
        .collect()
}

/// Mean HR/NDCG over the cases.
pub fn evaluate<T: Scalar>(model: &Blade<T>, cases: &[EvalCase], aux_index: usize, opts: &EvalOptions) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(BladeError::EmptySplit);
    }
    let ranks = case_ranks(model, cases, aux_index, opts)?;
    Ok(MetricsReport::from_ranks(&ranks, &opts.ks))
}

/// How the long-tail share of a user's history is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailCounting {
    /// Fraction of interactions carrying at least one tail behavior.
    Interaction,
    /// Fraction of behavior occurrences that are tail behaviors.
    Occurrence,
}

/// Share of the history attributed to tail behaviors.
pub fn tail_share(history: &[crate::data::Interaction], tail: BehaviorSet, counting: TailCounting) -> f64 {
    match counting {
        TailCounting::Interaction => {
            if history.is_empty() {
                return 0.0;
            }
            let hits = history.iter().filter(|i| i.behaviors.0 & tail.0 != 0).count();
            hits as f64 / history.len() as f64
        }
        TailCounting::Occurrence => {
            let total: usize = history.iter().map(|i| i.behaviors.count()).sum();
            if total == 0 {
                return 0.0;
            }
            let hits: usize = history.iter().map(|i| BehaviorSet(i.behaviors.0 & tail.0).count()).sum();
            hits as f64 / total as f64
        }
    }
}

/// Split cases into (head, tail): tail when the tail share exceeds `threshold`.
/// At `threshold = 1.0` only users whose every interaction qualifies are tail.
pub fn tail_partition(
    cases: &[EvalCase],
    tail: BehaviorSet,
    threshold: f64,
    counting: TailCounting,
) -> (Vec<EvalCase>, Vec<EvalCase>) {
    let mut head = Vec::new();
    let mut tails = Vec::new();
    for c in cases {
        let share = tail_share(&c.history, tail, counting);
        let is_tail = if threshold >= 1.0 { share >= 1.0 && !c.history.is_empty() } else { share > threshold };
        if is_tail {
            tails.push(c.clone());
        } else {
            head.push(c.clone());
        }
    }
    (head, tails)
}

/// [`evaluate`] plus head/tail sub-reports (empty groups are omitted).
pub fn evaluate_with_groups<T: Scalar>(
    model: &Blade<T>,
    cases: &[EvalCase],
    aux_index: usize,
    opts: &EvalOptions,
    tail: BehaviorSet,
    threshold: f64,
    counting: TailCounting,
) -> Result<MetricsReport> {
    let mut report = evaluate(model, cases, aux_index, opts)?;
    let (head, tails) = tail_partition(cases, tail, threshold, counting);
    if !head.is_empty() {
        report.head = Some(Box::new(evaluate(model, &head, aux_index, opts)?));
    }
    if !tails.is_empty() {
        report.tail = Some(Box::new(evaluate(model, &tails, aux_index, opts)?));
    }
    Ok(report)
}
