//! Behavior-set interaction data: vocabularies, ingestion, padding,
//! leave-one-out splitting and a synthetic long-tail generator.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BladeError, Result};

/// Reserved item index for left padding.
pub const PAD_ITEM: usize = 0;

/// Upper bound on |B| imposed by the bitmask representation.
pub const MAX_BEHAVIORS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorVocab {
    names: Vec<String>,
    aux_index: usize,
}

impl BehaviorVocab {
    pub fn new(names: Vec<String>, aux_index: usize) -> Result<Self> {
        if names.len() < 2 {
            return Err(BladeError::Config(format!(
                "behavior vocabulary needs at least 2 behaviors, got {}",
                names.len()
            )));
        }
        if names.len() > MAX_BEHAVIORS {
            return Err(BladeError::Config(format!("at most {MAX_BEHAVIORS} behaviors are supported")));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', '\t']) {
                return Err(BladeError::Config(format!("invalid behavior name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(BladeError::Config(format!("duplicate behavior name {n:?}")));
            }
        }
        if aux_index >= names.len() {
            return Err(BladeError::Config(format!("aux index {aux_index} out of range")));
        }
        Ok(Self { names, aux_index })
    }

    /// Vocabulary with the auxiliary behavior given by name.
    pub fn with_aux_name(names: Vec<String>, aux: &str) -> Result<Self> {
        let idx = names
            .iter()
            .position(|n| n == aux)
            .ok_or_else(|| BladeError::Config(format!("auxiliary behavior {aux:?} not in vocabulary")))?;
        Self::new(names, idx)
    }

    /// One behavior name per line; blank lines are skipped.
    pub fn load(path: &Path, aux: &str) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if names.is_empty() {
            return Err(BladeError::EmptyFile(path.to_path_buf()));
        }
        Self::with_aux_name(names, aux)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn aux_index(&self) -> usize {
        self.aux_index
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parse_set(&self, field: &str) -> std::result::Result<BehaviorSet, String> {
        let mut set = BehaviorSet::EMPTY;
        for name in field.split(',').map(str::trim) {
            match self.index_of(name) {
                Some(i) => set = set.with(i),
                None => return Err(format!("unknown behavior {name:?}")),
            }
        }
        Ok(set)
    }

    pub fn format_set(&self, set: BehaviorSet) -> String {
        set.iter()
            .map(|i| self.names[i].as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Multi-hot behavior vector stored as a bitmask (bit `i` = behavior `i`).
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BehaviorSet(pub u64);

impl BehaviorSet {
    pub const EMPTY: BehaviorSet = BehaviorSet(0);

    pub fn from_indices(idx: &[usize]) -> Self {
        idx.iter().fold(Self::EMPTY, |s, &i| s.with(i))
    }

    /// From a 0/1 vector.
    pub fn from_bits(bits: &[u8]) -> Self {
        let mut s = Self::EMPTY;
        for (i, &b) in bits.iter().enumerate() {
            if b != 0 {
                s = s.with(i);
            }
        }
        s
    }

    pub fn full(n: usize) -> Self {
        if n == 64 {
            Self(u64::MAX)
        } else {
            Self((1u64 << n) - 1)
        }
    }

    #[inline]
    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    #[inline]
    pub fn with(self, i: usize) -> Self {
        Self(self.0 | 1 << i)
    }

    #[inline]
    pub fn without(self, i: usize) -> Self {
        Self(self.0 & !(1 << i))
    }

    #[inline]
    pub fn toggled(self, i: usize) -> Self {
        Self(self.0 ^ 1 << i)
    }

    /// `||b||_0`
    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.contains(i))
    }

    pub fn to_bits(self, n: usize) -> Vec<u8> {
        (0..n).map(|i| self.contains(i) as u8).collect()
    }
}

impl fmt::Debug for BehaviorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BehaviorSet{:?}", self.iter().collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub item: usize,
    pub behaviors: BehaviorSet,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(item: usize, behaviors: BehaviorSet) -> Self {
        Self {
            item,
            behaviors,
            timestamp: 0,
        }
    }
}

/// Fixed-length, left-padded sequence: real interactions occupy a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub behaviors: Vec<BehaviorSet>,
    pub valid_mask: Vec<bool>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Index of the first real position.
    pub fn first_valid(&self) -> usize {
        self.len() - self.valid_len()
    }
}

/// Keep the most recent `max_len` interactions and left-pad the rest.
pub fn truncate_pad(user: usize, interactions: &[Interaction], max_len: usize) -> UserSequence {
    let start = interactions.len().saturating_sub(max_len);
    let kept = &interactions[start..];
    let pad = max_len - kept.len();
    let mut items = vec![PAD_ITEM; pad];
    let mut behaviors = vec![BehaviorSet::EMPTY; pad];
    let mut valid_mask = vec![false; pad];
    for it in kept {
        items.push(it.item);
        behaviors.push(it.behaviors);
        valid_mask.push(true);
    }
    UserSequence {
        user,
        items,
        behaviors,
        valid_mask,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub users: Vec<String>,
    /// Item names; index 0 is the padding item.
    pub items: Vec<String>,
    pub behaviors: BehaviorVocab,
    /// Per-user interactions sorted by `(timestamp, file order)`.
    pub histories: Vec<Vec<Interaction>>,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Catalog size including the padding row.
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    /// Write in the ingestion TSV schema.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for (u, hist) in self.histories.iter().enumerate() {
            for it in hist {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    self.users[u],
                    self.items[it.item],
                    it.timestamp,
                    self.behaviors.format_set(it.behaviors)
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_vocab(&self, path: &Path) -> Result<()> {
        let mut text = self.behaviors.names().join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Read an interaction TSV (`user, item, timestamp, behaviors`, no header).
pub fn load_dataset(path: &Path, behaviors: &BehaviorVocab) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut users: Vec<String> = Vec::new();
    let mut user_ix: HashMap<String, usize> = HashMap::new();
    let mut items: Vec<String> = vec!["<pad>".to_string()];
    let mut item_ix: HashMap<String, usize> = HashMap::new();
    let mut histories: Vec<Vec<Interaction>> = Vec::new();
    let err = |line: usize, msg: String| BladeError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut rows = 0usize;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(line, format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        let (user, item) = (cols[0].trim(), cols[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(err(line, "empty user or item id".into()));
        }
        let timestamp: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad timestamp {:?}", cols[2])))?;
        let set = behaviors.parse_set(cols[3]).map_err(|m| err(line, m))?;

        let u = *user_ix.entry(user.to_string()).or_insert_with(|| {
            users.push(user.to_string());
            histories.push(Vec::new());
            users.len() - 1
        });
        let i = *item_ix.entry(item.to_string()).or_insert_with(|| {
            items.push(item.to_string());
            items.len() - 1
        });
        histories[u].push(Interaction {
            item: i,
            behaviors: set,
            timestamp,
        });
        rows += 1;
    }
    if rows == 0 {
        return Err(BladeError::EmptyFile(path.to_path_buf()));
    }
    // stable sort keeps file order among equal timestamps
    for h in &mut histories {
        h.sort_by_key(|it| it.timestamp);
    }
    Ok(Dataset {
        users,
        items,
        behaviors: behaviors.clone(),
        histories,
    })
}

/// Training prefix of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSeq {
    pub user: usize,
    pub events: Vec<Interaction>,
}

/// A next-item evaluation target with the history preceding it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub history: Vec<Interaction>,
    pub target: Interaction,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<TrainSeq>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

impl Split {
    /// Last training interaction of every user as a target (for fit checks).
    pub fn train_cases(&self) -> Vec<EvalCase> {
        self.train
            .iter()
            .filter(|t| t.events.len() >= 2)
            .map(|t| {
                let n = t.events.len();
                EvalCase {
                    user: t.user,
                    history: t.events[..n - 1].to_vec(),
                    target: t.events[n - 1],
                }
            })
            .collect()
    }

    pub fn train_interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.train.iter().flat_map(|t| t.events.iter())
    }
}

/// Last interaction → test, second-to-last → validation, rest → train.
/// Users with fewer than 3 interactions are kept for training only.
pub fn leave_one_out_split(dataset: &Dataset) -> Split {
    let mut split = Split::default();
    for (user, hist) in dataset.histories.iter().enumerate() {
        let n = hist.len();
        if n < 3 {
            split.train.push(TrainSeq {
                user,
                events: hist.clone(),
            });
            continue;
        }
        split.train.push(TrainSeq {
            user,
            events: hist[..n - 2].to_vec(),
        });
        split.valid.push(EvalCase {
            user,
            history: hist[..n - 2].to_vec(),
            target: hist[n - 2],
        });
        split.test.push(EvalCase {
            user,
            history: hist[..n - 1].to_vec(),
            target: hist[n - 1],
        });
    }
    split
}

/// Settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    /// Real items (the padding row is added on top).
    pub items: usize,
    pub behavior_names: Vec<String>,
    pub aux_index: usize,
    /// Per-behavior marginal probability of appearing in an interaction.
    pub marginals: Vec<f64>,
    /// Probability that a target behavior shares the latent draw of the
    /// dominant target behavior (drives pairwise co-occurrence).
    pub coupling: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of contiguous item clusters users walk through.
    pub clusters: usize,
    /// Probability of jumping to a random item instead of walking.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 1000,
            behavior_names: ["click", "like", "share", "follow"].map(String::from).to_vec(),
            aux_index: 0,
            marginals: vec![0.9, 0.3, 0.05, 0.05],
            coupling: 0.5,
            min_len: 8,
            max_len: 20,
            clusters: 20,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BladeError::Config(m));
        BehaviorVocab::new(self.behavior_names.clone(), self.aux_index)?;
        if self.marginals.len() != self.behavior_names.len() {
            return bad(format!(
                "{} marginals for {} behaviors",
                self.marginals.len(),
                self.behavior_names.len()
            ));
        }
        for (name, v) in [("coupling", self.coupling), ("noise", self.noise)]
            .into_iter()
            .chain(self.marginals.iter().map(|&m| ("marginal", m)))
        {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0,1]"));
            }
        }
        if self.users == 0 || self.items < 2 {
            return bad("need at least 1 user and 2 items".into());
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.max_len > self.items {
            return bad("max_len exceeds the number of items".into());
        }
        if self.clusters == 0 || self.clusters > self.items {
            return bad(format!("bad cluster count {}", self.clusters));
        }
        Ok(())
    }

    /// Draw one behavior set.
    ///
    /// The auxiliary bit uses a uniform `u`; the dominant target behavior
    /// uses `1 − u`, and every other target reuses `1 − u` with probability
    /// `coupling` or an independent uniform otherwise. Each bit therefore
    /// keeps its exact marginal, and the set can only come out empty when
    /// `p_aux + p_dominant < 1`, in which case the aux bit is set.
    fn draw_behaviors(&self, rng: &mut ChaCha8Rng) -> BehaviorSet {
        let aux = self.aux_index;
        let dominant = (0..self.marginals.len())
            .filter(|&k| k != aux)
            .max_by(|&a, &b| self.marginals[a].total_cmp(&self.marginals[b]).then(b.cmp(&a)))
            .expect("at least two behaviors");
        let u: f64 = rng.gen();
        let anti = 1.0 - u;
        let mut set = BehaviorSet::EMPTY;
        if u < self.marginals[aux] {
            set = set.with(aux);
        }
        for k in 0..self.marginals.len() {
            if k == aux {
                continue;
            }
            let draw = if k == dominant {
                anti
            } else {
                let shared = rng.gen::<f64>() < self.coupling;
                let own: f64 = rng.gen();
                if shared {
                    anti
                } else {
                    own
                }
            };
            if draw < self.marginals[k] {
                set = set.with(k);
            }
        }
        if set.is_empty() {
            set = set.with(aux);
        }
        set
    }
}

/// Deterministic synthetic dataset.
///
/// Items `1..=items` are split into contiguous clusters. Each user picks a
/// cluster and a start item, then walks forward one or two items at a time
/// (wrapping inside the cluster, skipping items already visited); with
/// probability `noise` the next item is drawn uniformly from the catalog.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = BehaviorVocab::new(cfg.behavior_names.clone(), cfg.aux_index)?;
    let block = cfg.items / cfg.clusters;
    let cluster_bounds = |c: usize| {
        let lo = 1 + c * block;
        let hi = if c + 1 == cfg.clusters { cfg.items + 1 } else { lo + block };
        (lo, hi)
    };

    let mut histories = Vec::with_capacity(cfg.users);
    for _ in 0..cfg.users {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let cluster = rng.gen_range(0..cfg.clusters);
        let (lo, hi) = cluster_bounds(cluster);
        let mut visited = vec![false; cfg.items + 1];
        let mut cur = rng.gen_range(lo..hi);
        let mut hist = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 {
                let mut next = if rng.gen::<f64>() < cfg.noise {
                    rng.gen_range(1..=cfg.items)
                } else if (lo..hi).contains(&cur) {
                    lo + (cur - lo + rng.gen_range(1..=2)) % (hi - lo)
                } else {
                    rng.gen_range(lo..hi)
                };
                // linear probe to the next unvisited item
                while visited[next] {
                    next = if next == cfg.items { 1 } else { next + 1 };
                }
                cur = next;
            }
            visited[cur] = true;
            hist.push(Interaction {
                item: cur,
                behaviors: cfg.draw_behaviors(&mut rng),
                timestamp: step as i64,
            });
        }
        histories.push(hist);
    }

    Ok(Dataset {
        users: (0..cfg.users).map(|u| format!("u{u}")).collect(),
        items: std::iter::once("<pad>".to_string())
            .chain((1..=cfg.items).map(|i| format!("i{i}")))
            .collect(),
        behaviors: vocab,
        histories,
    })
}
