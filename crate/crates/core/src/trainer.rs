//! Deterministic training loop, ablation switches and gradient checking.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sequence, stream_seed, AugmentConfig, AugmentMethod};
use crate::data::{leave_one_out_split, Dataset, Split};
use crate::encoder::{Blade, Dropout, EncoderConfig, ModelDims};
use crate::error::{BladeError, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::objective::{next_item_loss, sample_negatives, seq_cl_loss, total_loss, LossConfig, NextItemTerm, TrainExample};
use crate::stats::BehaviorStats;
use crate::tensor::{Grads, Graph, Mat, ParamStore, Scalar, Var};

/// Component removal switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_ef: bool,
    pub no_if: bool,
    pub no_cl: bool,
    pub no_brw: bool,
}

impl FromStr for Ablation {
    type Err = BladeError;

    /// Comma-separated flag names, e.g. `no_cl,no_brw`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for f in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match f {
                "no_ef" => a.no_ef = true,
                "no_if" => a.no_if = true,
                "no_cl" => a.no_cl = true,
                "no_brw" => a.no_brw = true,
                other => return Err(BladeError::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(a)
    }
}

impl Ablation {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_ef {
            v.push("no_ef");
        }
        if self.no_if {
            v.push("no_if");
        }
        if self.no_cl {
            v.push("no_cl");
        }
        if self.no_brw {
            v.push("no_brw");
        }
        v
    }
}

/// Fold ablation flags into the encoder and loss configs.
pub fn apply_ablation(flags: Ablation, enc: &EncoderConfig, loss: &LossConfig) -> Result<(EncoderConfig, LossConfig)> {
    if flags.no_ef && flags.no_if {
        return Err(BladeError::Config("no_ef and no_if together remove every representation path".into()));
    }
    let mut enc = enc.clone();
    let mut loss = loss.clone();
    enc.ablate_ef |= flags.no_ef;
    enc.ablate_if |= flags.no_if;
    if flags.no_cl {
        loss.cl_enabled = false;
        loss.lambda = 0.0;
    }
    if flags.no_brw {
        loss.brw_enabled = false;
    }
    Ok((enc, loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation NDCG@10 improvement.
    pub patience: Option<usize>,
    /// Run validation every `eval_every` epochs (and on the last one).
    pub eval_every: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 42,
            patience: None,
            eval_every: 1,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(BladeError::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(BladeError::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(BladeError::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the trainer needs from a dataset.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub split: Split,
    pub stats: BehaviorStats,
    pub dims: ModelDims,
    pub aux_index: usize,
}

impl TrainData {
    pub fn new(dataset: &Dataset) -> Self {
        let split = leave_one_out_split(dataset);
        let nb = dataset.behaviors.size();
        Self {
            stats: BehaviorStats::from_split(nb, &split),
            split,
            dims: ModelDims {
                users: dataset.num_users(),
                items: dataset.num_items(),
                behaviors: nb,
            },
            aux_index: dataset.behaviors.aux_index(),
        }
    }

    pub fn examples(&self, max_len: usize) -> Vec<TrainExample> {
        self.split
            .train
            .iter()
            .filter_map(|t| TrainExample::from_events(t.user, &t.events, max_len))
            .collect()
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.params.iter().map(|p| Mat::zeros(p.value.rows, p.value.cols)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = T::lit(cfg.learning_rate);
        let eps = T::lit(cfg.eps);
        let wd = T::lit(cfg.learning_rate * cfg.weight_decay);
        for (id, p) in params.params.iter_mut().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (one - b1) * gk;
                v.data[k] = b2 * v.data[k] + (one - b2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                let x = p.value.data[k];
                p.value.data[k] = x - lr * mh / (vh.sqrt() + eps) - wd * x;
            }
        }
    }
}

/// Settings for one loss evaluation.
#[derive(Clone, Debug)]
pub struct StepSettings<'a> {
    pub loss: &'a LossConfig,
    pub augment: &'a AugmentConfig,
    pub stats: &'a BehaviorStats,
    pub aux_index: usize,
    pub seed: u64,
    pub epoch: usize,
    /// Apply dropout (training) or not (gradient checks, probes).
    pub dropout: bool,
}

/// Loss graph for one batch.
pub struct BatchLoss<'p, T: Scalar> {
    pub graph: Graph<'p, T>,
    pub loss: Var,
    pub next: f64,
    pub cl: Option<f64>,
    pub forward_passes: usize,
}

const VIEW_NEGATIVES: usize = 0;
const VIEW_AUG: [usize; 2] = [1, 2];
const VIEW_DROPOUT: [usize; 3] = [3, 4, 5];

/// Record the full objective for a batch: encode each sequence, add the
/// richness-weighted next-item loss and, when enabled, the contrastive loss
/// over two augmented views per sequence.
pub fn batch_loss<'p, T: Scalar>(
    model: &'p Blade<T>,
    batch: &[&TrainExample],
    s: &StepSettings<'_>,
) -> Result<BatchLoss<'p, T>> {
    let mut g = Graph::new(&model.params);
    let nb = model.dims.behaviors;
    let rate = if s.dropout { model.cfg.dropout } else { 0.0 };
    let use_cl = s.loss.cl_enabled && s.loss.lambda != 0.0 && s.augment.method != AugmentMethod::None;
    let mut forward_passes = 0;

    let mut weights = Vec::with_capacity(batch.len());
    let mut negatives = Vec::with_capacity(batch.len());
    let mut users = Vec::with_capacity(batch.len());
    let mut views = Vec::new();
    for ex in batch {
        let user = ex.seq.user;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(s.seed, user, s.epoch, VIEW_DROPOUT[0]));
        let dropout = (rate > 0.0).then(|| Dropout { rate, rng: &mut drop_rng });
        let enc = model.encode(&mut g, &ex.seq, Some(ex.final_target()), dropout)?;
        forward_passes += 1;
        users.push(enc.user);
        weights.push(ex.step_weights(nb, s.loss.brw_enabled));
        let mut neg_rng = ChaCha8Rng::seed_from_u64(stream_seed(s.seed, user, s.epoch, VIEW_NEGATIVES));
        negatives.push(sample_negatives(ex, model.dims.items, s.loss.negatives_per_positive, &mut neg_rng)?);

        if use_cl {
            let mut pair = [None, None];
            for (slot, (&aug_view, &drop_view)) in pair.iter_mut().zip(VIEW_AUG.iter().zip(&VIEW_DROPOUT[1..])) {
                let mut aug_rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(s.seed ^ s.augment.seed, user, s.epoch, aug_view));
                let aug = augment_sequence(&ex.seq, s.augment, s.stats, s.aux_index, &mut aug_rng);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(s.seed, user, s.epoch, drop_view));
                let dropout = (rate > 0.0).then(|| Dropout { rate, rng: &mut drop_rng });
                let enc = model.encode(&mut g, &aug, Some(ex.final_target()), dropout)?;
                forward_passes += 1;
                *slot = Some(enc.user);
            }
            views.push((pair[0].unwrap(), pair[1].unwrap()));
        }
    }

    let terms: Vec<NextItemTerm<'_>> = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| NextItemTerm {
            user: users[i],
            targets: &ex.targets,
            weights: &weights[i],
            negatives: &negatives[i],
        })
        .collect();
    let next = next_item_loss(&mut g, model, &terms);
    let cl = if use_cl { Some(seq_cl_loss(&mut g, &views, s.loss.tau)?) } else { None };
    let loss = total_loss(&mut g, next, cl, s.loss);
    let next_v = g.scalar(next).to_f64().unwrap_or(f64::NAN);
    let cl_v = cl.map(|c| g.scalar(c).to_f64().unwrap_or(f64::NAN));
    Ok(BatchLoss {
        graph: g,
        loss,
        next: next_v,
        cl: cl_v,
        forward_passes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_hr5: Option<f64>,
    pub valid_hr10: Option<f64>,
    pub valid_ndcg5: Option<f64>,
    pub valid_ndcg10: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters with the best validation NDCG@10 (last epoch without validation data).
    pub best: Blade<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub forward_passes: usize,
}

/// Train a fresh model on `data`.
pub fn train<T: Scalar>(
    data: &TrainData,
    enc: &EncoderConfig,
    loss: &LossConfig,
    augment: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let (enc, loss) = apply_ablation(cfg.ablation, enc, loss)?;
    let model = Blade::<T>::new(enc, data.dims, cfg.seed)?;
    train_model(model, data, &loss, augment, cfg)
}

/// Train an existing model in place of a fresh one.
pub fn train_model<T: Scalar>(
    mut model: Blade<T>,
    data: &TrainData,
    loss: &LossConfig,
    augment: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    loss.validate()?;
    augment.validate()?;
    let examples = data.examples(model.cfg.max_len);
    if examples.is_empty() {
        return Err(BladeError::Data("training split has no sequence with two interactions".into()));
    }
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut forward_passes = 0;
    let eval_opts = EvalOptions::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut shuffle = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, usize::MAX, epoch, 0));
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let settings = StepSettings {
                loss,
                augment,
                stats: &data.stats,
                aux_index: data.aux_index,
                seed: cfg.seed,
                epoch,
                dropout: true,
            };
            let step = batch_loss(&model, &batch, &settings)?;
            let value = step.graph.scalar(step.loss).to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(BladeError::NonFiniteLoss { epoch, batch: b, value });
            }
            forward_passes += step.forward_passes;
            let grads = step.graph.backward(step.loss);
            drop(step);
            adam.update(&mut model.params, &grads, cfg);
            loss_sum += value;
            batches += 1;
        }

        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_hr5: None,
            valid_hr10: None,
            valid_ndcg5: None,
            valid_ndcg10: None,
            seconds: 0.0,
        };
        let validate = !data.split.valid.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        if validate {
            let r = evaluate(&model, &data.split.valid, data.aux_index, &eval_opts)?;
            rec.valid_hr5 = r.hr_at(5);
            rec.valid_hr10 = r.hr_at(10);
            rec.valid_ndcg5 = r.ndcg_at(5);
            rec.valid_ndcg10 = r.ndcg_at(10);
            let score = r.ndcg_at(10).unwrap_or(0.0);
            if score > best_score {
                best_score = score;
                best = model.clone();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        rec.seconds = started.elapsed().as_secs_f64();
        log.push(rec);
        if data.split.valid.is_empty() {
            best = model.clone();
            best_epoch = epoch;
        }
        if cfg.patience.is_some_and(|p| validate && since_best >= p) {
            break;
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        forward_passes,
    })
}

/// Total loss over all training examples under fixed settings (no dropout).
pub fn dataset_loss<T: Scalar>(
    model: &Blade<T>,
    examples: &[TrainExample],
    settings: &StepSettings<'_>,
) -> Result<f64> {
    let batch: Vec<&TrainExample> = examples.iter().collect();
    let step = batch_loss(model, &batch, settings)?;
    Ok(step.graph.scalar(step.loss).to_f64().unwrap_or(f64::NAN))
}

/// Worst relative error found in one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Error naming the worst group at or above `tol`.
    pub fn ensure_below(&self, tol: f64) -> Result<()> {
        match self
            .groups
            .iter()
            .filter(|g| g.max_rel_error >= tol)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        {
            Some(g) => Err(BladeError::GradientCheck {
                group: g.group.clone(),
                error: g.max_rel_error,
            }),
            None => Ok(()),
        }
    }
}

/// Relative error with a floor that keeps exact zeros comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients with central differences on up to
/// `per_group` random coordinates of every parameter group.
pub fn gradient_check<F>(params: &ParamStore<f64>, epsilon: f64, per_group: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
{
    let (_, grads) = f(params)?;
    let mut by_group: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (id, p) in params.params.iter().enumerate() {
        let coords = by_group.entry(p.group.as_str()).or_default();
        coords.extend((0..p.value.len()).map(|k| (id, k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(by_group.len());
    let mut work = params.clone();
    for (group, coords) in by_group {
        let picked: Vec<(usize, usize)> = if coords.len() <= per_group {
            coords
        } else {
            rand::seq::index::sample(&mut rng, coords.len(), per_group)
                .into_iter()
                .map(|i| coords[i])
                .collect()
        };
        let mut worst: f64 = 0.0;
        for &(id, k) in &picked {
            let orig = work.value(id).data[k];
            work.value_mut(id).data[k] = orig + epsilon;
            let up = f(&work)?.0;
            work.value_mut(id).data[k] = orig - epsilon;
            let down = f(&work)?.0;
            work.value_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grads.at(id, k), numeric));
        }
        groups.push(GroupCheck {
            group: group.to_string(),
            max_rel_error: worst,
            coordinates: picked.len(),
        });
    }
    Ok(GradCheckReport { groups })
}

/// The seeded tiny setup used to check every backward path of the model:
/// `d=8, L=6`, one block per branch, two heads, two experts, dropout off,
/// contrastive loss and richness weighting on. Parameters are jittered away
/// from their symmetric initial values.
pub struct TinyProbe {
    pub model: Blade<f64>,
    pub examples: Vec<TrainExample>,
    pub stats: BehaviorStats,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub aux_index: usize,
}

impl TinyProbe {
    pub fn new(fusion: crate::encoder::FusionMode, seed: u64) -> Result<Self> {
        use crate::data::{generate_synthetic, SynthConfig};
        let synth = SynthConfig {
            users: 4,
            items: 14,
            clusters: 2,
            min_len: 5,
            max_len: 7,
            marginals: vec![0.8, 0.5, 0.3, 0.3],
            ..Default::default()
        };
        let ds = generate_synthetic(&synth, seed)?;
        let data = TrainData::new(&ds);
        let enc = EncoderConfig {
            d: 8,
            max_len: 6,
            blocks: 1,
            heads: 2,
            experts: 2,
            dropout: 0.0,
            fusion,
            ..Default::default()
        };
        let mut model = Blade::<f64>::new(enc, data.dims, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for p in &mut model.params.params {
            for v in &mut p.value.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        Ok(Self {
            examples: data.examples(6),
            model,
            stats: data.stats,
            loss: LossConfig {
                lambda: 0.5,
                ..Default::default()
            },
            augment: AugmentConfig {
                method: AugmentMethod::CooccurAdd,
                rho: 0.4,
                ..Default::default()
            },
            aux_index: data.aux_index,
        })
    }

    pub fn settings(&self) -> StepSettings<'_> {
        StepSettings {
            loss: &self.loss,
            augment: &self.augment,
            stats: &self.stats,
            aux_index: self.aux_index,
            seed: 3,
            epoch: 1,
            dropout: false,
        }
    }

    /// Loss and gradients at `params`.
    pub fn eval(&self, params: &ParamStore<f64>) -> Result<(f64, Grads<f64>)> {
        let model = Blade {
            params: params.clone(),
            ..self.model.clone()
        };
        let batch: Vec<&TrainExample> = self.examples.iter().collect();
        let step = batch_loss(&model, &batch, &self.settings())?;
        let grads = step.graph.backward(step.loss);
        Ok((step.graph.scalar(step.loss), grads))
    }

    pub fn check(&self, epsilon: f64, per_group: usize) -> Result<GradCheckReport> {
        gradient_check(&self.model.params, epsilon, per_group, 17, |p| self.eval(p))
    }
}
