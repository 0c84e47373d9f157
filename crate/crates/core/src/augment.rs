//! Behavior-level augmentation: index sampling plus co-occurrence addition,
//! frequency-based masking and auxiliary flipping. Item arrays and validity
//! masks are never touched.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::data::{BehaviorSet, UserSequence};
use crate::error::{BladeError, Result};
use crate::stats::BehaviorStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentMethod {
    CooccurAdd,
    FreqMask,
    AuxFlip,
    None,
}

impl FromStr for AugmentMethod {
    type Err = BladeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cooccur_add" => Ok(Self::CooccurAdd),
            "freq_mask" => Ok(Self::FreqMask),
            "aux_flip" => Ok(Self::AuxFlip),
            "none" => Ok(Self::None),
            other => Err(BladeError::Config(format!("unknown augmentation method {other:?}"))),
        }
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CooccurAdd => "cooccur_add",
            Self::FreqMask => "freq_mask",
            Self::AuxFlip => "aux_flip",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub method: AugmentMethod,
    /// Operation ratio ρ in (0, 1).
    pub rho: f64,
    /// Masking smoothing exponent.
    pub c: f64,
    pub seed: u64,
    /// Keep behavior sets non-empty in `freq_mask` / `aux_flip`.
    pub nonempty_guard: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            method: AugmentMethod::CooccurAdd,
            rho: 0.2,
            c: 0.5,
            seed: 0,
            nonempty_guard: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(BladeError::Config(format!("rho {} outside (0,1)", self.rho)));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(BladeError::Config(format!("c {} must be finite and >= 0", self.c)));
        }
        Ok(())
    }
}

/// `k = ⌊ρ · valid_len⌋` distinct offsets in `0..valid_len`, sorted.
pub fn sample_indices<R: Rng + ?Sized>(valid_len: usize, rho: f64, rng: &mut R) -> Vec<usize> {
    // tolerance guards products like 0.57 * 100 = 56.999…
    let k = ((rho * valid_len as f64) + 1e-9).floor() as usize;
    let k = k.min(valid_len);
    let mut picked = index::sample(rng, valid_len, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Add one absent behavior sampled from the aggregated co-occurrence vector
/// `b · M` restricted to absent behaviors. No-op when that mass is zero.
pub fn cooccur_add<R: Rng + ?Sized>(b: BehaviorSet, cooccurrence: &[Vec<f64>], rng: &mut R) -> BehaviorSet {
    let p = cooccur_distribution(b, cooccurrence);
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return b;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (k, &pk) in p.iter().enumerate() {
        if pk <= 0.0 {
            continue;
        }
        last = Some(k);
        if u < pk {
            return b.with(k);
        }
        u -= pk;
    }
    // rounding left u at the top edge
    last.map_or(b, |k| b.with(k))
}

/// Unnormalised `p = b · M` with present behaviors zeroed.
pub fn cooccur_distribution(b: BehaviorSet, cooccurrence: &[Vec<f64>]) -> Vec<f64> {
    let n = cooccurrence.len();
    let mut p = vec![0.0; n];
    for i in b.iter().filter(|&i| i < n) {
        for (pj, &m) in p.iter_mut().zip(&cooccurrence[i]) {
            *pj += m;
        }
    }
    for (k, pk) in p.iter_mut().enumerate() {
        if b.contains(k) {
            *pk = 0.0;
        }
    }
    p
}

/// `P_i = m_i^c / Σ_k m_k^c` over all behavior types.
pub fn mask_probabilities(frequency: &[f64], c: f64) -> Vec<f64> {
    let powed: Vec<f64> = frequency.iter().map(|&m| m.powf(c)).collect();
    let total: f64 = powed.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return vec![0.0; frequency.len()];
    }
    powed.iter().map(|&v| v / total).collect()
}

/// Clear each present bit independently with its masking probability.
pub fn freq_mask<R: Rng + ?Sized>(b: BehaviorSet, frequency: &[f64], c: f64, guard: bool, rng: &mut R) -> BehaviorSet {
    let probs = mask_probabilities(frequency, c);
    let mut out = b;
    for (i, &p) in probs.iter().enumerate() {
        // one draw per type keeps the stream aligned across inputs
        let u: f64 = rng.gen();
        if b.contains(i) && u < p {
            out = out.without(i);
        }
    }
    if guard && out.is_empty() && !b.is_empty() {
        let rarest = b
            .iter()
            .filter(|&i| i < frequency.len())
            .min_by(|&x, &y| frequency[x].total_cmp(&frequency[y]).then(x.cmp(&y)));
        if let Some(i) = rarest {
            out = out.with(i);
        }
    }
    out
}

/// Flip the auxiliary bit, unless (with the guard on) that would empty the set.
pub fn aux_flip(b: BehaviorSet, aux_index: usize, guard: bool) -> BehaviorSet {
    let flipped = b.toggled(aux_index);
    if guard && flipped.is_empty() {
        b
    } else {
        flipped
    }
}

/// Apply the configured operator at `⌊ρ·valid_len⌋` sampled valid positions.
pub fn augment_sequence<R: Rng + ?Sized>(
    seq: &UserSequence,
    cfg: &AugmentConfig,
    stats: &BehaviorStats,
    aux_index: usize,
    rng: &mut R,
) -> UserSequence {
    let mut out = seq.clone();
    if cfg.method == AugmentMethod::None {
        return out;
    }
    let valid = seq.valid_len();
    if valid == 0 {
        return out;
    }
    let first = seq.first_valid();
    for off in sample_indices(valid, cfg.rho, rng) {
        let pos = first + off;
        let b = seq.behaviors[pos];
        out.behaviors[pos] = match cfg.method {
            AugmentMethod::CooccurAdd => cooccur_add(b, &stats.cooccurrence, rng),
            AugmentMethod::FreqMask => freq_mask(b, &stats.frequency, cfg.c, cfg.nonempty_guard, rng),
            AugmentMethod::AuxFlip => aux_flip(b, aux_index, cfg.nonempty_guard),
            AugmentMethod::None => b,
        };
    }
    out
}

/// Independent stream seed for `(global seed, user, epoch, view)`.
pub fn stream_seed(global: u64, user: usize, epoch: usize, view: usize) -> u64 {
    let mut h = splitmix(global ^ 0x424c_4144_4531);
    for v in [user as u64, epoch as u64, view as u64] {
        h = splitmix(h ^ v);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
