//! Flat `section.key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a valid configuration.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::data::{generate_synthetic, load_dataset, BehaviorSet, BehaviorVocab, Dataset, SynthConfig};
use crate::encoder::{CausalMask, EncoderConfig};
use crate::error::{BladeError, Result};
use crate::eval::{Conditioning, EvalOptions, TailCounting};
use crate::objective::LossConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the root under which run directories are created.
pub const RUN_ROOT_ENV: &str = "BLADE_RUN_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    File,
    Synth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub aux: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub options: EvalOptions,
    pub tail_behaviors: Vec<String>,
    pub tail_threshold: f64,
    pub tail_counting: TailCounting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub synth: SynthConfig,
    pub synth_seed: u64,
    pub model: EncoderConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                source: DataSource::Synth,
                path: None,
                vocab: None,
                aux: "click".into(),
            },
            synth: SynthConfig::default(),
            synth_seed: 1,
            model: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            eval: EvalSection {
                options: EvalOptions::default(),
                tail_behaviors: vec!["share".into(), "follow".into()],
                tail_threshold: 0.8,
                tail_counting: TailCounting::Interaction,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| BladeError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, allowed: &str) -> BladeError {
    BladeError::Config(format!("{key}: {value:?} is not one of {allowed}"))
}

impl RunConfig {
    /// Read a config file, then apply `overrides` (later wins).
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| BladeError::Config(format!("{}: {e}", p.display())))?;
            for (key, value) in parse_lines(&text, p)? {
                cfg.set(&key, &value)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.source" => {
                self.data.source = match v {
                    "file" => DataSource::File,
                    "synth" => DataSource::Synth,
                    _ => return Err(bad(key, v, "file, synth")),
                }
            }
            "data.path" => self.data.path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.vocab" => self.data.vocab = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.aux" => self.data.aux = v.to_string(),
            "data.max_len" => self.model.max_len = parse(key, v)?,

            "synth.users" => self.synth.users = parse(key, v)?,
            "synth.items" => self.synth.items = parse(key, v)?,
            "synth.behaviors" => self.synth.behavior_names = parse_list(key, v)?,
            "synth.aux_index" => self.synth.aux_index = parse(key, v)?,
            "synth.marginals" => self.synth.marginals = parse_list(key, v)?,
            "synth.coupling" => self.synth.coupling = parse(key, v)?,
            "synth.min_len" => self.synth.min_len = parse(key, v)?,
            "synth.max_len" => self.synth.max_len = parse(key, v)?,
            "synth.clusters" => self.synth.clusters = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.seed" => self.synth_seed = parse(key, v)?,

            "model.d" => self.model.d = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.experts" => self.model.experts = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.alpha" => self.model.alpha = parse(key, v)?,
            "model.fusion" => self.model.fusion = parse(key, v)?,
            "model.ffn_mult" => self.model.ffn_mult = parse(key, v)?,
            "model.causal_mask" => {
                self.model.causal_mask = match v {
                    "pre" => CausalMask::PreSoftmax,
                    "post" => CausalMask::PostSoftmax,
                    _ => return Err(bad(key, v, "pre, post")),
                }
            }

            "augment.method" => self.augment.method = parse(key, v)?,
            "augment.rho" => self.augment.rho = parse(key, v)?,
            "augment.c" => self.augment.c = parse(key, v)?,
            "augment.seed" => self.augment.seed = parse(key, v)?,
            "augment.guard" => self.augment.nonempty_guard = parse(key, v)?,

            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.tau" => self.loss.tau = parse(key, v)?,
            "loss.negatives" => self.loss.negatives_per_positive = parse(key, v)?,
            "loss.brw" => self.loss.brw_enabled = parse(key, v)?,
            "loss.cl" => self.loss.cl_enabled = parse(key, v)?,

            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.learning_rate = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.patience" => {
                let p: usize = parse(key, v)?;
                self.train.patience = (p > 0).then_some(p);
            }
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.ablation" => self.train.ablation = parse(key, v)?,
            "train.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, v, "f32, f64")),
                }
            }

            "eval.ks" => self.eval.options.ks = parse_list(key, v)?,
            "eval.exclude_history" => self.eval.options.exclude_history = parse(key, v)?,
            "eval.conditioning" => {
                self.eval.options.conditioning = match v {
                    "target" => Conditioning::GroundTruth,
                    "aux" => Conditioning::AuxOnly,
                    _ => return Err(bad(key, v, "target, aux")),
                }
            }
            "eval.tail_behaviors" => self.eval.tail_behaviors = parse_list(key, v)?,
            "eval.tail_threshold" => self.eval.tail_threshold = parse(key, v)?,
            "eval.tail_counting" => {
                self.eval.tail_counting = match v {
                    "interaction" => TailCounting::Interaction,
                    "occurrence" => TailCounting::Occurrence,
                    _ => return Err(bad(key, v, "interaction, occurrence")),
                }
            }
            _ => return Err(BladeError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let m = &self.model;
        vec![
            ("data.source", if self.data.source == DataSource::File { "file" } else { "synth" }.into()),
            ("data.path", opt_path(&self.data.path)),
            ("data.vocab", opt_path(&self.data.vocab)),
            ("data.aux", self.data.aux.clone()),
            ("data.max_len", m.max_len.to_string()),
            ("synth.users", self.synth.users.to_string()),
            ("synth.items", self.synth.items.to_string()),
            ("synth.behaviors", self.synth.behavior_names.join(",")),
            ("synth.aux_index", self.synth.aux_index.to_string()),
            ("synth.marginals", join(&self.synth.marginals)),
            ("synth.coupling", self.synth.coupling.to_string()),
            ("synth.min_len", self.synth.min_len.to_string()),
            ("synth.max_len", self.synth.max_len.to_string()),
            ("synth.clusters", self.synth.clusters.to_string()),
            ("synth.noise", self.synth.noise.to_string()),
            ("synth.seed", self.synth_seed.to_string()),
            ("model.d", m.d.to_string()),
            ("model.blocks", m.blocks.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.experts", m.experts.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.alpha", m.alpha.to_string()),
            ("model.fusion", m.fusion.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            (
                "model.causal_mask",
                if m.causal_mask == CausalMask::PreSoftmax { "pre" } else { "post" }.into(),
            ),
            ("augment.method", self.augment.method.to_string()),
            ("augment.rho", self.augment.rho.to_string()),
            ("augment.c", self.augment.c.to_string()),
            ("augment.seed", self.augment.seed.to_string()),
            ("augment.guard", self.augment.nonempty_guard.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.tau", self.loss.tau.to_string()),
            ("loss.negatives", self.loss.negatives_per_positive.to_string()),
            ("loss.brw", self.loss.brw_enabled.to_string()),
            ("loss.cl", self.loss.cl_enabled.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch", self.train.batch_size.to_string()),
            ("train.lr", self.train.learning_rate.to_string()),
            ("train.beta1", self.train.beta1.to_string()),
            ("train.beta2", self.train.beta2.to_string()),
            ("train.eps", self.train.eps.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.patience", self.train.patience.unwrap_or(0).to_string()),
            ("train.eval_every", self.train.eval_every.to_string()),
            ("train.ablation", self.train.ablation.names().join(",")),
            (
                "train.precision",
                if self.precision == Precision::F32 { "f32" } else { "f64" }.into(),
            ),
            ("eval.ks", join(&self.eval.options.ks)),
            ("eval.exclude_history", self.eval.options.exclude_history.to_string()),
            (
                "eval.conditioning",
                if self.eval.options.conditioning == Conditioning::GroundTruth { "target" } else { "aux" }.into(),
            ),
            ("eval.tail_behaviors", self.eval.tail_behaviors.join(",")),
            ("eval.tail_threshold", self.eval.tail_threshold.to_string()),
            (
                "eval.tail_counting",
                if self.eval.tail_counting == TailCounting::Interaction { "interaction" } else { "occurrence" }.into(),
            ),
        ]
    }

    /// The effective configuration as a config file.
    pub fn echo(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Short hash of the settings that determine a trained model (everything
    /// except the training seed and the `eval.*` keys).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if k != "train.seed" && !k.starts_with("eval.") {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// `<root>/<hash>-s<seed>`, with root from [`RUN_ROOT_ENV`] or `runs`.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{}-s{}", self.hash(), self.train.seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.train.ablation.no_ef && self.train.ablation.no_if {
            return Err(BladeError::Config("train.ablation: no_ef and no_if cannot be combined".into()));
        }
        if self.eval.options.ks.is_empty() || self.eval.options.ks.contains(&0) {
            return Err(BladeError::Config("eval.ks needs positive cutoffs".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.tail_threshold) {
            return Err(BladeError::Config("eval.tail_threshold must be in [0, 1]".into()));
        }
        match self.data.source {
            DataSource::Synth => self.synth.validate()?,
            DataSource::File => {
                for (name, p) in [("data.path", &self.data.path), ("data.vocab", &self.data.vocab)] {
                    match p {
                        None => return Err(BladeError::Config(format!("{name} is required for data.source=file"))),
                        Some(p) if !p.is_file() => {
                            return Err(BladeError::Config(format!("{name}: {} does not exist", p.display())))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synth => generate_synthetic(&self.synth, self.synth_seed),
            DataSource::File => {
                let vocab_path = self.data.vocab.as_deref().expect("validated");
                let vocab = BehaviorVocab::load(vocab_path, &self.data.aux)?;
                load_dataset(self.data.path.as_deref().expect("validated"), &vocab)
            }
        }
    }

    /// Tail behavior names resolved against `vocab`.
    pub fn tail_set(&self, vocab: &BehaviorVocab) -> Result<BehaviorSet> {
        let mut set = BehaviorSet::EMPTY;
        for name in &self.eval.tail_behaviors {
            let i = vocab
                .index_of(name)
                .ok_or_else(|| BladeError::Config(format!("eval.tail_behaviors: unknown behavior {name:?}")))?;
            set = set.with(i);
        }
        Ok(set)
    }
}

fn parse_lines(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| BladeError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: "expected key=value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| BladeError::Config(format!("override {s:?} is not key=value")))
}
