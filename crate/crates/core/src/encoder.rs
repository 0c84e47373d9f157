//! Dual item-behavior fusion encoder.
//!
//! Two branches read the same padded sequence. The early branch fuses item
//! and behavior-set embeddings at the input and runs a causal Transformer.
//! The intermediate branch feeds items through behavior-aware self-attention
//! (item and behavior query/key terms summed before the softmax) followed by
//! a dense mixture of experts routed by the behavior-set embeddings. The two
//! outputs are mixed with weight `alpha`, and a causal cross-attention whose
//! queries are the next-step behavior-set embeddings produces the final
//! per-step user representations.
//!
//! Every sub-block is wrapped in a pre-norm residual connection and padding
//! rows are zeroed after each block.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSet, UserSequence};
use crate::error::{BladeError, Result};
use crate::tensor::{Graph, Mat, ParamStore, Scalar, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Sum,
    Concat,
    Gate,
}

impl FromStr for FusionMode {
    type Err = BladeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            "gate" => Ok(Self::Gate),
            o => Err(BladeError::Config(format!("unknown early fusion mode {o:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Concat => "concat",
            Self::Gate => "gate",
        })
    }
}

/// Where the causal mask enters attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalMask {
    /// Future keys get −∞ logits before the softmax.
    PreSoftmax,
    /// Softmax over all valid keys, then multiply by the lower-triangular mask.
    PostSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub experts: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub fusion: FusionMode,
    pub ablate_ef: bool,
    pub ablate_if: bool,
    pub causal_mask: CausalMask,
    /// Hidden width of feed-forward networks and experts, as a multiple of `d`.
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            max_len: 50,
            blocks: 2,
            heads: 2,
            experts: 4,
            dropout: 0.2,
            alpha: 0.5,
            fusion: FusionMode::Sum,
            ablate_ef: false,
            ablate_if: false,
            causal_mask: CausalMask::PreSoftmax,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BladeError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.max_len == 0 || self.blocks == 0 || self.experts == 0 || self.ffn_mult == 0 {
            return bad("max_len, blocks, experts and ffn_mult must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0,1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.ablate_ef && self.ablate_if {
            return bad("ablating both fusion branches leaves no representation path".into());
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.d * self.ffn_mult
    }
}

/// Vocabulary sizes the parameter shapes depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub users: usize,
    /// Including the padding row.
    pub items: usize,
    pub behaviors: usize,
}

#[derive(Clone, Debug)]
pub struct LinearIds {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Clone, Debug)]
pub struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub out: LinearIds,
}

#[derive(Clone, Debug)]
pub struct BasaIds {
    pub wq_item: usize,
    pub wk_item: usize,
    pub wq_behavior: usize,
    pub wk_behavior: usize,
    pub wv: usize,
    pub out: LinearIds,
}

#[derive(Clone, Debug)]
pub struct MoeIds {
    pub router: LinearIds,
    pub experts: Vec<FfnIds>,
}

#[derive(Clone, Debug)]
pub struct EarlyLayer {
    pub norm1: NormIds,
    pub attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub struct InterLayer {
    pub norm1: NormIds,
    pub basa: BasaIds,
    pub norm2: NormIds,
    pub moe: MoeIds,
}

#[derive(Clone, Debug)]
pub struct CrossIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub norm: NormIds,
    pub ffn: FfnIds,
    pub out_norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct EarlyBranch {
    pub fusion: Option<LinearIds>,
    pub layers: Vec<EarlyLayer>,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct InterBranch {
    pub layers: Vec<InterLayer>,
    pub norm: NormIds,
}

/// Parameter indices of every block, derived deterministically from the config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub item_table: usize,
    pub positions: usize,
    pub behavior_table: usize,
    pub preference: usize,
    pub early: Option<EarlyBranch>,
    pub inter: Option<InterBranch>,
    pub cross: CrossIds,
}

/// Records parameter shapes and initial values in layout order.
struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: Option<&'a mut ChaCha8Rng>,
}

enum Init {
    Normal(f64),
    Xavier,
    Const(f64),
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, group: &str, rows: usize, cols: usize, init: Init) -> usize {
        let data: Vec<T> = match (&mut self.rng, init) {
            (None, _) => vec![T::zero(); rows * cols],
            (Some(_), Init::Const(v)) => vec![T::lit(v); rows * cols],
            (Some(rng), Init::Normal(sd)) => (0..rows * cols).map(|_| T::lit(sd * rng.sample::<f64, _>(StandardNormal))).collect(),
            (Some(rng), Init::Xavier) => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols).map(|_| T::lit(rng.gen_range(-a..a))).collect()
            }
        };
        self.store.push(name, group, Mat::from_vec(rows, cols, data))
    }

    fn linear(&mut self, name: &str, group: &str, i: usize, o: usize, bias: bool) -> LinearIds {
        let w = self.add(format!("{name}.w"), group, i, o, Init::Xavier);
        let b = bias.then(|| self.add(format!("{name}.b"), group, 1, o, Init::Const(0.0)));
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, group: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{name}.g"), group, 1, d, Init::Const(1.0)),
            bias: self.add(format!("{name}.b"), group, 1, d, Init::Const(0.0)),
        }
    }

    fn ffn(&mut self, name: &str, group: &str, d: usize, h: usize) -> FfnIds {
        FfnIds {
            up: self.linear(&format!("{name}.up"), group, d, h, true),
            down: self.linear(&format!("{name}.down"), group, h, d, true),
        }
    }

    fn sq(&mut self, name: String, group: &str, d: usize) -> usize {
        self.add(name, group, d, d, Init::Xavier)
    }
}

fn build_layout<T: Scalar>(cfg: &EncoderConfig, dims: &ModelDims, rng: Option<&mut ChaCha8Rng>) -> (Layout, ParamStore<T>) {
    let d = cfg.d;
    let h = cfg.hidden();
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let item_table = b.add("item_table".into(), "item_table", dims.items, d, Init::Normal(0.02));
    let positions = b.add("positions".into(), "positions", cfg.max_len, d, Init::Normal(0.02));
    let behavior_table = b.add("behavior_table".into(), "behavior_table", dims.behaviors, d, Init::Normal(0.02));
    let preference = b.add("preference".into(), "preference", dims.users, dims.behaviors, Init::Const(1.0));

    let early = (!cfg.ablate_ef).then(|| {
        let fusion = match cfg.fusion {
            FusionMode::Sum => None,
            FusionMode::Concat | FusionMode::Gate => Some(b.linear("fusion", "early.fusion", 2 * d, d, true)),
        };
        let layers = (0..cfg.blocks)
            .map(|l| {
                let p = format!("early.{l}");
                EarlyLayer {
                    norm1: b.norm(&format!("{p}.norm1"), "early.norm", d),
                    attn: AttnIds {
                        wq: b.sq(format!("{p}.attn.wq"), "early.attn", d),
                        wk: b.sq(format!("{p}.attn.wk"), "early.attn", d),
                        wv: b.sq(format!("{p}.attn.wv"), "early.attn", d),
                        out: b.linear(&format!("{p}.attn.out"), "early.attn", d, d, true),
                    },
                    norm2: b.norm(&format!("{p}.norm2"), "early.norm", d),
                    ffn: b.ffn(&format!("{p}.ffn"), "early.ffn", d, h),
                }
            })
            .collect();
        EarlyBranch {
            fusion,
            layers,
            norm: b.norm("early.norm", "early.norm", d),
        }
    });

    let inter = (!cfg.ablate_if).then(|| {
        let layers = (0..cfg.blocks)
            .map(|l| {
                let p = format!("inter.{l}");
                InterLayer {
                    norm1: b.norm(&format!("{p}.norm1"), "inter.norm", d),
                    basa: BasaIds {
                        wq_item: b.sq(format!("{p}.basa.wq_item"), "inter.basa", d),
                        wk_item: b.sq(format!("{p}.basa.wk_item"), "inter.basa", d),
                        wq_behavior: b.sq(format!("{p}.basa.wq_behavior"), "inter.basa", d),
                        wk_behavior: b.sq(format!("{p}.basa.wk_behavior"), "inter.basa", d),
                        wv: b.sq(format!("{p}.basa.wv"), "inter.basa", d),
                        out: b.linear(&format!("{p}.basa.out"), "inter.basa", d, d, true),
                    },
                    norm2: b.norm(&format!("{p}.norm2"), "inter.norm", d),
                    moe: MoeIds {
                        router: b.linear(&format!("{p}.moe.router"), "inter.router", d, cfg.experts, true),
                        experts: (0..cfg.experts)
                            .map(|e| b.ffn(&format!("{p}.moe.expert{e}"), "inter.experts", d, h))
                            .collect(),
                    },
                }
            })
            .collect();
        InterBranch {
            layers,
            norm: b.norm("inter.norm", "inter.norm", d),
        }
    });

    let cross = CrossIds {
        wq: b.sq("cross.wq".into(), "cross.attn", d),
        wk: b.sq("cross.wk".into(), "cross.attn", d),
        wv: b.sq("cross.wv".into(), "cross.attn", d),
        norm: b.norm("cross.norm", "cross.norm", d),
        ffn: b.ffn("cross.ffn", "cross.ffn", d, h),
        out_norm: b.norm("cross.out_norm", "cross.norm", d),
    };

    (
        Layout {
            item_table,
            positions,
            behavior_table,
            preference,
            early,
            inter,
            cross,
        },
        b.store,
    )
}

/// Dropout source; `None` (or rate 0) disables dropout.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Mask and geometry shared by all blocks of one forward pass.
pub struct SeqContext<'r> {
    pub valid: Vec<bool>,
    /// `rows × d` matrix that is 1 on valid rows, 0 on padding rows.
    row_mask: Vec<bool>,
    pub causal_mask: CausalMask,
    pub dropout: Option<Dropout<'r>>,
}

impl<'r> SeqContext<'r> {
    pub fn new(valid: Vec<bool>, causal_mask: CausalMask, dropout: Option<Dropout<'r>>) -> Self {
        Self {
            row_mask: valid.clone(),
            valid,
            causal_mask,
            dropout,
        }
    }

    fn len(&self) -> usize {
        self.valid.len()
    }

    /// Allowed (query, key) pairs: key is real and not in the future.
    fn attention_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                m[i * n + j] = self.valid[j];
            }
        }
        m
    }

    fn zero_padding<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        if self.row_mask.iter().all(|&v| v) {
            return x;
        }
        let cols = g.value(x).cols;
        let mut k = Mat::zeros(self.len(), cols);
        for (r, &v) in self.row_mask.iter().enumerate() {
            if v {
                k.row_mut(r).fill(T::one());
            }
        }
        g.mul_const(x, k)
    }

    fn dropout<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let Some(dp) = self.dropout.as_mut() else { return x };
        if dp.rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = T::lit(1.0 / (1.0 - dp.rate));
        let data = (0..r * c)
            .map(|_| if dp.rng.gen::<f64>() < dp.rate { T::zero() } else { keep })
            .collect();
        g.mul_const(x, Mat::from_vec(r, c, data))
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ids: &LinearIds) -> Var {
    let w = g.param(ids.w);
    let y = g.matmul(x, w);
    match ids.b {
        Some(b) => {
            let b = g.param(b);
            g.add_row(y, b)
        }
        None => y,
    }
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ids: &NormIds) -> Var {
    let n = g.normalize(x, T::lit(LN_EPS));
    let gain = g.param(ids.gain);
    let s = g.mul_row(n, gain);
    let bias = g.param(ids.bias);
    g.add_row(s, bias)
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, ctx: &mut SeqContext<'_>, x: Var, ids: &FfnIds) -> Var {
    let h = linear(g, x, &ids.up);
    let h = g.gelu(h);
    let h = ctx.dropout(g, h);
    linear(g, h, &ids.down)
}

/// Masked attention weights from raw logits (already scaled).
pub fn attention_weights<T: Scalar>(g: &mut Graph<'_, T>, ctx: &SeqContext<'_>, logits: Var) -> Var {
    let mask = ctx.attention_mask();
    match ctx.causal_mask {
        CausalMask::PreSoftmax => g.softmax(logits, mask),
        CausalMask::PostSoftmax => {
            let n = ctx.len();
            let keys: Vec<bool> = (0..n * n).map(|k| ctx.valid[k % n]).collect();
            let s = g.softmax(logits, keys);
            let tri = Mat::from_vec(n, n, mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect());
            g.mul_const(s, tri)
        }
    }
}

/// Attention diagnostics collected during a forward pass.
#[derive(Default, Clone, Debug)]
pub struct Probes {
    pub attention: Vec<Var>,
    pub routing: Vec<Var>,
}

/// Causal multi-head self-attention over `x`.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    ctx: &mut SeqContext<'_>,
    x: Var,
    ids: &AttnIds,
    heads: usize,
    probes: &mut Probes,
) -> Var {
    let (wq, wk, wv) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv));
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let d = g.value(x).cols;
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let logits = g.matmul_t(qh, kh);
        let logits = g.scale(logits, scale);
        let w = attention_weights(g, ctx, logits);
        probes.attention.push(w);
        let w = ctx.dropout(g, w);
        outs.push(g.matmul(w, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, cat, &ids.out)
}

/// Behavior-aware self-attention: per head
/// `softmax((Q_x K_xᵀ + Q_b K_bᵀ) / √d_h) V_x`, heads concatenated and projected.
pub fn basa<T: Scalar>(
    g: &mut Graph<'_, T>,
    ctx: &mut SeqContext<'_>,
    x: Var,
    b: Var,
    ids: &BasaIds,
    heads: usize,
    probes: &mut Probes,
) -> Var {
    let p = |g: &mut Graph<'_, T>, src: Var, id: usize| {
        let w = g.param(id);
        g.matmul(src, w)
    };
    let qx = p(g, x, ids.wq_item);
    let kx = p(g, x, ids.wk_item);
    let qb = p(g, b, ids.wq_behavior);
    let kb = p(g, b, ids.wk_behavior);
    let vx = p(g, x, ids.wv);
    let d = g.value(x).cols;
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let sl = |g: &mut Graph<'_, T>, m: Var| g.slice_cols(m, h * dh, dh);
        let (qxh, kxh, qbh, kbh, vh) = (sl(g, qx), sl(g, kx), sl(g, qb), sl(g, kb), sl(g, vx));
        let a_item = g.matmul_t(qxh, kxh);
        let a_beh = g.matmul_t(qbh, kbh);
        let a = g.add(a_item, a_beh);
        let a = g.scale(a, scale);
        let w = attention_weights(g, ctx, a);
        probes.attention.push(w);
        let w = ctx.dropout(g, w);
        outs.push(g.matmul(w, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, cat, &ids.out)
}

/// Dense behavior-routed mixture: `Σ_i softmax(B W_r + b_r)_i · e_i(R)`.
pub fn bgmoe<T: Scalar>(
    g: &mut Graph<'_, T>,
    ctx: &mut SeqContext<'_>,
    r: Var,
    b: Var,
    ids: &MoeIds,
    probes: &mut Probes,
) -> Var {
    let logits = linear(g, b, &ids.router);
    let (rows, n) = g.value(logits).shape();
    let phi = g.softmax(logits, vec![true; rows * n]);
    probes.routing.push(phi);
    let mut out: Option<Var> = None;
    for (i, expert) in ids.experts.iter().enumerate() {
        let e = feed_forward(g, ctx, r, expert);
        let w = g.slice_cols(phi, i, 1);
        let term = g.mul_col(e, w);
        out = Some(match out {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    out.expect("at least one expert")
}

/// Combine item and behavior-set embeddings at the input.
pub fn early_fusion<T: Scalar>(g: &mut Graph<'_, T>, e: Var, b: Var, mode: FusionMode, proj: Option<&LinearIds>) -> Var {
    match (mode, proj) {
        (FusionMode::Sum, _) => g.add(e, b),
        (FusionMode::Concat, Some(p)) => {
            let cat = g.concat_cols(&[e, b]);
            linear(g, cat, p)
        }
        (FusionMode::Gate, Some(p)) => {
            let cat = g.concat_cols(&[e, b]);
            let z = linear(g, cat, p);
            let gate = g.sigmoid(z);
            // gate ⊙ E + (1 − gate) ⊙ B = B + gate ⊙ (E − B)
            let diff = g.sub(e, b);
            let gd = g.mul(gate, diff);
            g.add(b, gd)
        }
        (m, None) => panic!("fusion mode {m} needs a projection"),
    }
}

/// Personalised behavior-set embeddings for a run of sets:
/// `softmax over present behaviors of f_u`, then a weighted sum of rows of `G`.
/// Empty sets map to the zero vector.
pub fn behavior_set_embeddings<T: Scalar>(
    g: &mut Graph<'_, T>,
    sets: &[BehaviorSet],
    user: usize,
    preference: usize,
    behavior_table: usize,
) -> Var {
    let nb = g.params().value(behavior_table).rows;
    let logits = g.gather(preference, &vec![user; sets.len()]);
    let mask: Vec<bool> = sets.iter().flat_map(|s| (0..nb).map(move |k| s.contains(k))).collect();
    let weights = g.softmax(logits, mask);
    let table = g.param(behavior_table);
    g.matmul(weights, table)
}

/// Output handles of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final representations `U`, `L × d`.
    pub user: Var,
    /// Early-branch output `F` (absent when ablated).
    pub early: Option<Var>,
    /// Intermediate-branch output `O` (absent when ablated).
    pub inter: Option<Var>,
    /// Aggregated `Ǔ`.
    pub fused: Var,
    /// Next-step behavior embeddings `T`.
    pub next_behaviors: Var,
    /// Behavior-set embeddings `B`.
    pub behaviors: Var,
    pub probes: Probes,
}

/// Plain-value copies of the encoder intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub user: Mat<T>,
    pub early: Option<Mat<T>>,
    pub inter: Option<Mat<T>>,
    pub fused: Mat<T>,
    pub attention: Vec<Mat<T>>,
    pub routing: Vec<Mat<T>>,
}

/// The encoder: configuration, vocabulary sizes, parameters and their layout.
#[derive(Clone, Debug)]
pub struct Blade<T: Scalar> {
    pub cfg: EncoderConfig,
    pub dims: ModelDims,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> Blade<T> {
    /// Freshly initialised model.
    pub fn new(cfg: EncoderConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_dims(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&cfg, &dims, Some(&mut rng));
        Ok(Self {
            cfg,
            dims,
            params,
            layout,
        })
    }

    /// Wrap existing parameters, checking names and shapes against the layout.
    pub fn from_params(cfg: EncoderConfig, dims: ModelDims, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_dims(&dims)?;
        let (layout, expected) = build_layout::<T>(&cfg, &dims, None);
        if expected.len() != params.len() {
            return Err(BladeError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.params.iter().zip(&params.params) {
            if e.name != p.name || e.value.shape() != p.value.shape() {
                return Err(BladeError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        let mut params = params;
        for (e, p) in expected.params.iter().zip(params.params.iter_mut()) {
            p.group.clone_from(&e.group);
        }
        Ok(Self {
            cfg,
            dims,
            params,
            layout,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Blade<U> {
        Blade {
            cfg: self.cfg.clone(),
            dims: self.dims,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Record the encoder on `g`. `target` is the behavior set the final
    /// step is conditioned on.
    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        seq: &UserSequence,
        target: Option<BehaviorSet>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Encoded> {
        let cfg = &self.cfg;
        let lay = &self.layout;
        let n = cfg.max_len;
        if seq.len() != n {
            return Err(BladeError::Data(format!("sequence length {} != max_len {n}", seq.len())));
        }
        if seq.user >= self.dims.users {
            return Err(BladeError::Data(format!("user {} out of range", seq.user)));
        }
        for (i, (&valid, b)) in seq.valid_mask.iter().zip(&seq.behaviors).enumerate() {
            if valid && b.is_empty() {
                return Err(BladeError::EmptyBehaviorSet { user: seq.user, step: i });
            }
            if seq.items[i] >= self.dims.items {
                return Err(BladeError::Data(format!("item {} out of range", seq.items[i])));
            }
        }
        let target = match target {
            Some(t) if !t.is_empty() => t,
            _ => return Err(BladeError::MissingTargetBehavior { user: seq.user }),
        };

        let mut ctx = SeqContext::new(seq.valid_mask.clone(), cfg.causal_mask, dropout);
        let mut probes = Probes::default();

        let emb = g.gather(lay.item_table, &seq.items);
        let emb = ctx.zero_padding(g, emb);
        let emb = ctx.dropout(g, emb);
        let beh = behavior_set_embeddings(g, &seq.behaviors, seq.user, lay.preference, lay.behavior_table);
        let pos = g.param(lay.positions);

        let early = lay.early.as_ref().map(|br| {
            let fused = early_fusion(g, emb, beh, cfg.fusion, br.fusion.as_ref());
            let x = g.add(fused, pos);
            let mut x = ctx.zero_padding(g, x);
            for layer in &br.layers {
                let h = layer_norm(g, x, &layer.norm1);
                let a = self_attention(g, &mut ctx, h, &layer.attn, cfg.heads, &mut probes);
                let a = ctx.dropout(g, a);
                let y = g.add(x, a);
                x = ctx.zero_padding(g, y);
                let h = layer_norm(g, x, &layer.norm2);
                let f = feed_forward(g, &mut ctx, h, &layer.ffn);
                let f = ctx.dropout(g, f);
                let y = g.add(x, f);
                x = ctx.zero_padding(g, y);
            }
            let out = layer_norm(g, x, &br.norm);
            ctx.zero_padding(g, out)
        });

        let inter = lay.inter.as_ref().map(|br| {
            let x = g.add(emb, pos);
            let mut x = ctx.zero_padding(g, x);
            for layer in &br.layers {
                let h = layer_norm(g, x, &layer.norm1);
                let r = basa(g, &mut ctx, h, beh, &layer.basa, cfg.heads, &mut probes);
                let r = ctx.dropout(g, r);
                let y = g.add(x, r);
                x = ctx.zero_padding(g, y);
                let h = layer_norm(g, x, &layer.norm2);
                let o = bgmoe(g, &mut ctx, h, beh, &layer.moe, &mut probes);
                let o = ctx.dropout(g, o);
                let y = g.add(x, o);
                x = ctx.zero_padding(g, y);
            }
            let out = layer_norm(g, x, &br.norm);
            ctx.zero_padding(g, out)
        });

        let fused = match (inter, early) {
            (Some(o), Some(f)) => {
                let a = g.scale(o, T::lit(cfg.alpha));
                let b = g.scale(f, T::lit(1.0 - cfg.alpha));
                g.add(a, b)
            }
            (Some(o), None) => o,
            (None, Some(f)) => f,
            (None, None) => unreachable!("config validation rejects double ablation"),
        };

        // T = [β², …, β^L, β^{L+1}]
        let mut next_sets: Vec<BehaviorSet> = seq.behaviors[1..].to_vec();
        next_sets.push(target);
        let next = behavior_set_embeddings(g, &next_sets, seq.user, lay.preference, lay.behavior_table);

        let cr = &lay.cross;
        let (wq, wk, wv) = (g.param(cr.wq), g.param(cr.wk), g.param(cr.wv));
        let q = g.matmul(next, wq);
        let k = g.matmul(fused, wk);
        let v = g.matmul(fused, wv);
        let logits = g.matmul_t(q, k);
        let logits = g.scale(logits, T::lit(1.0 / (cfg.d as f64).sqrt()));
        let w = attention_weights(g, &ctx, logits);
        probes.attention.push(w);
        let w = ctx.dropout(g, w);
        let c = g.matmul(w, v);
        let x = g.add(fused, c);
        let x = ctx.zero_padding(g, x);
        let h = layer_norm(g, x, &cr.norm);
        let f = feed_forward(g, &mut ctx, h, &cr.ffn);
        let f = ctx.dropout(g, f);
        let x = g.add(x, f);
        let u = layer_norm(g, x, &cr.out_norm);
        let user = ctx.zero_padding(g, u);

        Ok(Encoded {
            user,
            early,
            inter,
            fused,
            next_behaviors: next,
            behaviors: beh,
            probes,
        })
    }

    /// Inference forward (no dropout): per-step user representations `U`.
    pub fn forward(&self, seq: &UserSequence, target: Option<BehaviorSet>) -> Result<Mat<T>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, seq, target, None)?;
        Ok(g.value(enc.user).clone())
    }

    /// Inference forward returning intermediates.
    pub fn trace(&self, seq: &UserSequence, target: Option<BehaviorSet>) -> Result<ForwardTrace<T>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, seq, target, None)?;
        let val = |v: Var| g.value(v).clone();
        Ok(ForwardTrace {
            user: val(enc.user),
            early: enc.early.map(val),
            inter: enc.inter.map(val),
            fused: val(enc.fused),
            attention: enc.probes.attention.iter().map(|&v| val(v)).collect(),
            routing: enc.probes.routing.iter().map(|&v| val(v)).collect(),
        })
    }

    /// Personalised embedding of one behavior set (plain values).
    pub fn encode_behavior_set(&self, b: BehaviorSet, user: usize) -> Result<Vec<T>> {
        if b.is_empty() {
            return Err(BladeError::EmptyBehaviorSet { user, step: 0 });
        }
        let mut g = Graph::new(&self.params);
        let v = behavior_set_embeddings(&mut g, &[b], user, self.layout.preference, self.layout.behavior_table);
        Ok(g.value(v).data.clone())
    }

    /// Row `item` of the item table.
    pub fn item_embedding(&self, item: usize) -> &[T] {
        self.params.value(self.layout.item_table).row(item)
    }

    /// Names of parameters belonging to the early branch (including fusion).
    pub fn is_early_param(name: &str) -> bool {
        name.starts_with("early.") || name.starts_with("fusion.")
    }

    pub fn is_inter_param(name: &str) -> bool {
        name.starts_with("inter.")
    }
}

fn check_dims(d: &ModelDims) -> Result<()> {
    if d.users == 0 || d.items < 2 || d.behaviors < 2 {
        return Err(BladeError::Config(format!("degenerate model dims {d:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{truncate_pad, Interaction};
    use proptest::prelude::*;

    fn dims() -> ModelDims {
        ModelDims {
            users: 3,
            items: 12,
            behaviors: 4,
        }
    }

    fn tiny(cfg: EncoderConfig) -> Blade<f64> {
        Blade::new(cfg, dims(), 5).unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            max_len: 5,
            blocks: 1,
            heads: 2,
            experts: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn seq(user: usize, events: &[(usize, &[usize])], max_len: usize) -> UserSequence {
        let ev: Vec<Interaction> = events
            .iter()
            .map(|&(i, b)| Interaction::new(i, BehaviorSet::from_indices(b)))
            .collect();
        truncate_pad(user, &ev, max_len)
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn beta_single_behavior_is_table_row() {
        let m = tiny(small_cfg());
        let beta = m.encode_behavior_set(BehaviorSet::from_indices(&[1]), 0).unwrap();
        let g = m.params.value(m.layout.behavior_table);
        assert_eq!(beta, g.row(1));
    }

    #[test]
    fn beta_weights_follow_preference_softmax() {
        let mut m = tiny(small_cfg());
        let pref = m.layout.preference;
        m.params.value_mut(pref).row_mut(1).copy_from_slice(&[2f64.ln(), 0.0, 0.7, -1.0]);
        let beta = m.encode_behavior_set(BehaviorSet::from_indices(&[0, 1]), 1).unwrap();
        let g = m.params.value(m.layout.behavior_table);
        for c in 0..8 {
            let want = 2.0 / 3.0 * g.get(0, c) + 1.0 / 3.0 * g.get(1, c);
            assert!((beta[c] - want).abs() < 1e-12);
        }
        // uniform factors give the midpoint
        let beta = m.encode_behavior_set(BehaviorSet::from_indices(&[0, 1]), 0).unwrap();
        for c in 0..8 {
            assert!((beta[c] - (g.get(0, c) + g.get(1, c)) / 2.0).abs() < 1e-12);
        }
        assert!(m.encode_behavior_set(BehaviorSet::EMPTY, 0).is_err());
    }

    /// Least-squares coefficients of `x` in the span of `rows`, by normal equations.
    fn ls_coefficients(rows: &[&[f64]], x: &[f64]) -> Vec<f64> {
        let k = rows.len();
        let mut a = vec![vec![0.0; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                a[i][j] = rows[i].iter().zip(rows[j]).map(|(p, q)| p * q).sum();
            }
            a[i][k] = rows[i].iter().zip(x).map(|(p, q)| p * q).sum();
        }
        for c in 0..k {
            let p = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            for r in 0..k {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for j in c..=k {
                        a[r][j] -= f * a[c][j];
                    }
                }
            }
        }
        (0..k).map(|i| a[i][k] / a[i][i]).collect()
    }

    proptest! {
        #[test]
        fn beta_lies_in_convex_hull(bits in 1u64..16, f in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let mut m = tiny(small_cfg());
            let pref = m.layout.preference;
            m.params.value_mut(pref).row_mut(2).copy_from_slice(&f);
            let b = BehaviorSet(bits);
            prop_assume!(b.count() <= 3);
            let beta = m.encode_behavior_set(b, 2).unwrap();
            let g = m.params.value(m.layout.behavior_table);
            let rows: Vec<&[f64]> = b.iter().map(|k| g.row(k)).collect();
            let w = ls_coefficients(&rows, &beta);
            let mut recon = vec![0.0; 8];
            for (wi, r) in w.iter().zip(&rows) {
                for c in 0..8 {
                    recon[c] += wi * r[c];
                }
            }
            for c in 0..8 {
                prop_assert!((recon[c] - beta[c]).abs() < 1e-9);
            }
            prop_assert!(w.iter().all(|&x| x >= -1e-9));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_modes_match_hand_computation() {
        let e = Mat::<f64>::from_f64(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let b = Mat::<f64>::from_f64(2, 2, &[0.3, -0.2, 0.1, 0.4]);
        let mut store = ParamStore::new();
        // projection [I; 2I] with bias (0.1, -0.1)
        let w = store.push("w", "x", Mat::from_f64(4, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]));
        let bias = store.push("b", "x", Mat::from_f64(1, 2, &[0.1, -0.1]));
        let proj = LinearIds { w, b: Some(bias) };
        let mut g = Graph::new(&store);
        let (ev, bv) = (g.constant(e.clone()), g.constant(b.clone()));
        let zero = g.constant(Mat::zeros(2, 2));

        let s = early_fusion(&mut g, ev, zero, FusionMode::Sum, None);
        assert_eq!(g.value(s), &e);

        let c = early_fusion(&mut g, ev, bv, FusionMode::Concat, Some(&proj));
        for r in 0..2 {
            for k in 0..2 {
                let want = e.get(r, k) + 2.0 * b.get(r, k) + [0.1, -0.1][k];
                assert!((g.value(c).get(r, k) - want).abs() < 1e-12);
            }
        }

        let gt = early_fusion(&mut g, ev, bv, FusionMode::Gate, Some(&proj));
        for r in 0..2 {
            for k in 0..2 {
                let z = e.get(r, k) + 2.0 * b.get(r, k) + [0.1, -0.1][k];
                let s = 1.0 / (1.0 + (-z).exp());
                let want = s * e.get(r, k) + (1.0 - s) * b.get(r, k);
                assert!((g.value(gt).get(r, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_gate_passes_items_through() {
        let e = Mat::<f64>::from_f64(1, 2, &[0.7, -0.3]);
        let b = Mat::<f64>::from_f64(1, 2, &[0.2, 0.9]);
        let mut store = ParamStore::new();
        let w = store.push("w", "x", Mat::zeros(4, 2));
        let bias = store.push("b", "x", Mat::from_f64(1, 2, &[60.0, 60.0]));
        let mut g = Graph::new(&store);
        let (ev, bv) = (g.constant(e.clone()), g.constant(b));
        let out = early_fusion(&mut g, ev, bv, FusionMode::Gate, Some(&LinearIds { w, b: Some(bias) }));
        assert!(g.value(out).max_abs_diff(&e) < 1e-12);
    }

    #[test]
    fn basa_two_step_oracle() {
        let x = [vec![0.5, -1.0], vec![1.5, 0.25]];
        let bb = [vec![0.2, 0.4], vec![-0.6, 0.1]];
        let w = |v: &[f64]| Mat::<f64>::from_f64(2, 2, v);
        let (wqx, wkx, wqb, wkb, wv, wo) = (
            [0.3, -0.2, 0.8, 0.5],
            [1.1, 0.4, -0.7, 0.2],
            [0.6, 0.1, -0.3, 0.9],
            [-0.4, 0.7, 0.5, 0.3],
            [0.9, -0.5, 0.2, 1.2],
            [1.0, 0.3, -0.2, 0.8],
        );
        let mut store = ParamStore::new();
        let ids = BasaIds {
            wq_item: store.push("a", "x", w(&wqx)),
            wk_item: store.push("b", "x", w(&wkx)),
            wq_behavior: store.push("c", "x", w(&wqb)),
            wk_behavior: store.push("d", "x", w(&wkb)),
            wv: store.push("e", "x", w(&wv)),
            out: LinearIds {
                w: store.push("f", "x", w(&wo)),
                b: None,
            },
        };
        let mut g = Graph::new(&store);
        let xv = g.constant(Mat::from_f64(2, 2, &[0.5, -1.0, 1.5, 0.25]));
        let bv = g.constant(Mat::from_f64(2, 2, &[0.2, 0.4, -0.6, 0.1]));
        let mut ctx = SeqContext::new(vec![true, true], CausalMask::PreSoftmax, None);
        let mut probes = Probes::default();
        let out = basa(&mut g, &mut ctx, xv, bv, &ids, 1, &mut probes);

        let m2 = |v: [f64; 4]| vec![vec![v[0], v[1]], vec![v[2], v[3]]];
        let qx = matmul(&x, &m2(wqx));
        let kx = matmul(&x, &m2(wkx));
        let qb = matmul(&bb, &m2(wqb));
        let kb = matmul(&bb, &m2(wkb));
        let v = matmul(&x, &m2(wv));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let logit = |i: usize, j: usize| (dot(&qx[i], &kx[j]) + dot(&qb[i], &kb[j])) / 2f64.sqrt();
        let att = [vec![1.0, 0.0], softmax(&[logit(1, 0), logit(1, 1)])];
        let ctxv = matmul(&att, &v);
        let want = matmul(&ctxv, &m2(wo));

        let a = g.value(probes.attention[0]);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - att[i][j]).abs() < 1e-12);
                assert!((g.value(out).get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basa_without_behavior_term_is_self_attention() {
        let m = tiny(small_cfg());
        let mut store = m.params.clone();
        let layer = &m.layout.inter.as_ref().unwrap().layers[0];
        store.value_mut(layer.basa.wq_behavior).data.fill(0.0);
        let attn = AttnIds {
            wq: layer.basa.wq_item,
            wk: layer.basa.wk_item,
            wv: layer.basa.wv,
            out: layer.basa.out.clone(),
        };
        let mut g = Graph::new(&store);
        let x = g.gather(m.layout.item_table, &[0, 3, 4, 7, 1]);
        let b = g.gather(m.layout.item_table, &[5, 6, 8, 9, 2]);
        let valid = vec![false, true, true, true, true];
        let mut ctx = SeqContext::new(valid, CausalMask::PreSoftmax, None);
        let mut probes = Probes::default();
        let o1 = basa(&mut g, &mut ctx, x, b, &layer.basa, 2, &mut probes);
        let o2 = self_attention(&mut g, &mut ctx, x, &attn, 2, &mut probes);
        assert!(g.value(o1).max_abs_diff(g.value(o2)) < 1e-12);
    }

    #[test]
    fn bgmoe_oracles() {
        let (d, h) = (2, 3);
        let mut store = ParamStore::<f64>::new();
        let ffn = |store: &mut ParamStore<f64>, seed: f64| FfnIds {
            up: LinearIds {
                w: store.push("u", "x", Mat::from_f64(d, h, &[0.3 * seed, -0.5, 0.2, 0.7, 0.1 * seed, -0.4])),
                b: Some(store.push("ub", "x", Mat::from_f64(1, h, &[0.05, -0.1, 0.2]))),
            },
            down: LinearIds {
                w: store.push("d", "x", Mat::from_f64(h, d, &[0.6, -0.2, 0.3 * seed, 0.9, -0.7, 0.4])),
                b: Some(store.push("db", "x", Mat::from_f64(1, d, &[0.01, -0.02]))),
            },
        };
        let e0 = ffn(&mut store, 1.0);
        let e1 = ffn(&mut store, -2.0);
        let router = LinearIds {
            w: store.push("r", "x", Mat::from_f64(d, 2, &[0.5, -0.3, 0.8, 0.2])),
            b: Some(store.push("rb", "x", Mat::from_f64(1, 2, &[0.1, 0.0]))),
        };
        let r = [0.4, -0.9];
        let bvec = [1.2, -0.3];

        let expert = |store: &ParamStore<f64>, ids: &FfnIds| -> Vec<f64> {
            let up = store.value(ids.up.w);
            let ub = store.value(ids.up.b.unwrap());
            let hid: Vec<f64> = (0..h).map(|j| gelu(r[0] * up.get(0, j) + r[1] * up.get(1, j) + ub.get(0, j))).collect();
            let dn = store.value(ids.down.w);
            let db = store.value(ids.down.b.unwrap());
            (0..d).map(|k| (0..h).map(|j| hid[j] * dn.get(j, k)).sum::<f64>() + db.get(0, k)).collect()
        };
        let run = |store: &ParamStore<f64>, moe: &MoeIds| -> Vec<f64> {
            let mut g = Graph::new(store);
            let rv = g.constant(Mat::from_f64(1, d, &r));
            let bv = g.constant(Mat::from_f64(1, d, &bvec));
            let mut ctx = SeqContext::new(vec![true], CausalMask::PreSoftmax, None);
            let out = bgmoe(&mut g, &mut ctx, rv, bv, moe, &mut Probes::default());
            g.value(out).data.clone()
        };

        // dense n=2
        let moe = MoeIds {
            router: router.clone(),
            experts: vec![e0.clone(), e1.clone()],
        };
        let logits = [
            bvec[0] * 0.5 + bvec[1] * 0.8 + 0.1,
            bvec[0] * -0.3 + bvec[1] * 0.2,
        ];
        let phi = softmax(&logits);
        let (o0, o1) = (expert(&store, &e0), expert(&store, &e1));
        let got = run(&store, &moe);
        for k in 0..d {
            assert!((got[k] - (phi[0] * o0[k] + phi[1] * o1[k])).abs() < 1e-12);
        }

        // one expert: routing is irrelevant
        let single = MoeIds {
            router: LinearIds {
                w: store.push("r1", "x", Mat::from_f64(d, 1, &[3.0, -2.0])),
                b: None,
            },
            experts: vec![e1.clone()],
        };
        let got = run(&store, &single);
        for k in 0..d {
            assert!((got[k] - o1[k]).abs() < 1e-12);
        }

        // router saturated on expert 1
        store.value_mut(router.b.unwrap()).data.copy_from_slice(&[-80.0, 80.0]);
        let got = run(&store, &moe);
        for k in 0..d {
            assert!((got[k] - o1[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_endpoints_select_branch() {
        let s = seq(1, &[(3, &[0]), (5, &[0, 1]), (7, &[0, 2])], 5);
        let target = Some(BehaviorSet::from_indices(&[0, 3]));
        for (alpha, pick_inter) in [(1.0, true), (0.0, false)] {
            let m = tiny(EncoderConfig { alpha, ..small_cfg() });
            let t = m.trace(&s, target).unwrap();
            let want = if pick_inter { t.inter.as_ref() } else { t.early.as_ref() };
            assert_eq!(&t.fused, want.unwrap());
        }
        let m = tiny(EncoderConfig {
            ablate_ef: true,
            ..small_cfg()
        });
        let t = m.trace(&s, target).unwrap();
        assert!(t.early.is_none());
        assert_eq!(&t.fused, t.inter.as_ref().unwrap());
    }

    #[test]
    fn attention_and_routing_rows_are_distributions() {
        let s = seq(0, &[(3, &[0]), (5, &[0, 1]), (7, &[2])], 5);
        for mode in [FusionMode::Sum, FusionMode::Gate] {
            let m = tiny(EncoderConfig { fusion: mode, ..small_cfg() });
            let t = m.trace(&s, Some(BehaviorSet::from_indices(&[1]))).unwrap();
            assert!(!t.attention.is_empty() && !t.routing.is_empty());
            for a in &t.attention {
                for r in 0..a.rows {
                    let row = a.row(r);
                    if s.valid_mask[r] {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                    for (c, &w) in row.iter().enumerate() {
                        if !s.valid_mask[c] || c > r {
                            assert_eq!(w, 0.0);
                        }
                    }
                }
            }
            for phi in &t.routing {
                for r in 0..phi.rows {
                    assert!(phi.row(r).iter().all(|&w| w >= 0.0));
                    assert!((phi.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    /// Row `l` is queried by the behavior set at `l + 1`, so only items after
    /// `l`, behavior sets after `l + 1` and the target may change.
    #[test]
    fn future_changes_do_not_leak() {
        let m = tiny(small_cfg());
        let base = seq(2, &[(1, &[0]), (4, &[0, 1]), (6, &[2]), (8, &[0, 3]), (9, &[1])], 5);
        let target = Some(BehaviorSet::from_indices(&[0]));
        let u0 = m.forward(&base, target).unwrap();
        for l in 0..4 {
            let mut s = base.clone();
            for p in l + 1..5 {
                s.items[p] = 11 - p;
                if p > l + 1 {
                    s.behaviors[p] = BehaviorSet::from_indices(&[1, 2, 3]);
                }
            }
            let u1 = m.forward(&s, Some(BehaviorSet::from_indices(&[2, 3]))).unwrap();
            for r in 0..=l {
                assert_eq!(u0.row(r), u1.row(r), "row {r} changed by positions after {l}");
            }
            assert_ne!(u0.row(4), u1.row(4));
        }
    }

    #[test]
    fn padding_rows_are_zero() {
        let m = tiny(small_cfg());
        let s = seq(0, &[(3, &[0]), (5, &[1])], 5);
        let u = m.forward(&s, Some(BehaviorSet::from_indices(&[0]))).unwrap();
        for r in 0..3 {
            assert!(u.row(r).iter().all(|&x| x == 0.0));
        }
        assert!(u.row(4).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let m = tiny(small_cfg());
        let mut s = seq(0, &[(3, &[0]), (5, &[1])], 5);
        assert!(matches!(m.forward(&s, None), Err(BladeError::MissingTargetBehavior { .. })));
        assert!(m.forward(&s, Some(BehaviorSet::EMPTY)).is_err());
        s.behaviors[4] = BehaviorSet::EMPTY;
        assert!(matches!(
            m.forward(&s, Some(BehaviorSet::from_indices(&[0]))),
            Err(BladeError::EmptyBehaviorSet { step: 4, .. })
        ));
        let both = EncoderConfig {
            ablate_ef: true,
            ablate_if: true,
            ..small_cfg()
        };
        assert!(Blade::<f64>::new(both, dims(), 0).is_err());
    }

    #[test]
    fn ablation_removes_exact_parameter_groups() {
        let full = tiny(EncoderConfig { fusion: FusionMode::Gate, ..small_cfg() });
        let no_ef = tiny(EncoderConfig {
            fusion: FusionMode::Gate,
            ablate_ef: true,
            ..small_cfg()
        });
        let no_if = tiny(EncoderConfig {
            fusion: FusionMode::Gate,
            ablate_if: true,
            ..small_cfg()
        });
        let size = |pred: fn(&str) -> bool| -> usize {
            full.params.params.iter().filter(|p| pred(&p.name)).map(|p| p.value.len()).sum()
        };
        let early = size(Blade::<f64>::is_early_param);
        let inter = size(Blade::<f64>::is_inter_param);
        assert!(early > 0 && inter > 0);
        assert_eq!(full.parameter_count() - no_ef.parameter_count(), early);
        assert_eq!(full.parameter_count() - no_if.parameter_count(), inter);
    }

    #[test]
    fn post_softmax_mask_option_runs() {
        let m = tiny(EncoderConfig {
            causal_mask: CausalMask::PostSoftmax,
            ..small_cfg()
        });
        let s = seq(0, &[(3, &[0]), (5, &[0, 1]), (7, &[2])], 5);
        let t = m.trace(&s, Some(BehaviorSet::from_indices(&[1]))).unwrap();
        assert!(t.user.all_finite());
        let a = &t.attention[0];
        assert_eq!(a.get(2, 3), 0.0);
    }
}
