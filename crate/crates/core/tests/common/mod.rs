//! Shared test helpers: an independent dense re-implementation of the encoder
//! forward pass and small dataset builders.

#![allow(dead_code)]

use blade::data::{BehaviorSet, UserSequence};
use blade::encoder::{Blade, CausalMask, FusionMode};
use blade::tensor::Scalar;

type M = Vec<Vec<f64>>;

/// Parameter `name` as nested rows of f64.
fn p<T: Scalar>(model: &Blade<T>, name: &str) -> M {
    let id = model.params.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let v = model.params.value(id);
    (0..v.rows)
        .map(|r| v.row(r).iter().map(|x| x.to_f64().unwrap()).collect())
        .collect()
}

fn row<T: Scalar>(model: &Blade<T>, name: &str) -> Vec<f64> {
    p(model, name).remove(0)
}

fn mm(a: &M, b: &M) -> M {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for k in 0..b.len() {
            for j in 0..b[0].len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

fn zero_pad(a: &M, valid: &[bool]) -> M {
    a.iter()
        .zip(valid)
        .map(|(r, &v)| if v { r.clone() } else { vec![0.0; r.len()] })
        .collect()
}

fn layer_norm(a: &M, g: &[f64], b: &[f64]) -> M {
    a.iter()
        .map(|x| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + 1e-6).sqrt();
            x.iter().enumerate().map(|(i, v)| (v - mean) * s * g[i] + b[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax over the allowed entries; rows with nothing allowed are zero.
fn masked_softmax(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits.iter().zip(allowed).map(|(&x, &a)| if a { (x - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn attention(q: &M, k: &M, v: &M, valid: &[bool], scale: f64, mode: CausalMask) -> M {
    let n = q.len();
    let mut out = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let w = match mode {
            CausalMask::PreSoftmax => {
                let allowed: Vec<bool> = (0..n).map(|j| j <= i && valid[j]).collect();
                masked_softmax(&logits, &allowed)
            }
            CausalMask::PostSoftmax => {
                let s = masked_softmax(&logits, valid);
                s.iter().enumerate().map(|(j, &x)| if j <= i && valid[j] { x } else { 0.0 }).collect()
            }
        };
        for j in 0..n {
            for c in 0..v[0].len() {
                out[i][c] += w[j] * v[j][c];
            }
        }
    }
    out
}

fn cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn ffn<T: Scalar>(model: &Blade<T>, x: &M, name: &str) -> M {
    let h = add_bias(&mm(x, &p(model, &format!("{name}.up.w"))), &row(model, &format!("{name}.up.b")));
    let h: M = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add_bias(&mm(&h, &p(model, &format!("{name}.down.w"))), &row(model, &format!("{name}.down.b")))
}

fn norm<T: Scalar>(model: &Blade<T>, x: &M, name: &str) -> M {
    layer_norm(x, &row(model, &format!("{name}.g")), &row(model, &format!("{name}.b")))
}

fn behavior_rows<T: Scalar>(model: &Blade<T>, sets: &[BehaviorSet], user: usize) -> M {
    let f = &p(model, "preference")[user];
    let g = p(model, "behavior_table");
    sets.iter()
        .map(|s| {
            let allowed: Vec<bool> = (0..f.len()).map(|k| s.contains(k)).collect();
            let w = masked_softmax(f, &allowed);
            (0..g[0].len()).map(|c| (0..g.len()).map(|k| w[k] * g[k][c]).sum()).collect()
        })
        .collect()
}

fn multi_head(q: &M, k: &M, v: &M, heads: usize, valid: &[bool], mode: CausalMask) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![Vec::with_capacity(d); q.len()];
    for h in 0..heads {
        let o = attention(
            &cols(q, h * dh, dh),
            &cols(k, h * dh, dh),
            &cols(v, h * dh, dh),
            valid,
            1.0 / (dh as f64).sqrt(),
            mode,
        );
        for (r, orow) in out.iter_mut().zip(o) {
            r.extend(orow);
        }
    }
    out
}

/// Dense re-implementation of `Blade::forward` in f64.
pub fn oracle_forward<T: Scalar>(model: &Blade<T>, seq: &UserSequence, target: BehaviorSet) -> M {
    let cfg = &model.cfg;
    let valid = &seq.valid_mask;
    let table = p(model, "item_table");
    let e: M = seq.items.iter().map(|&i| table[i].clone()).collect();
    let e = zero_pad(&e, valid);
    let b = behavior_rows(model, &seq.behaviors, seq.user);
    let pos = p(model, "positions");

    let early = (!cfg.ablate_ef).then(|| {
        let fused = match cfg.fusion {
            FusionMode::Sum => add(&e, &b),
            mode => {
                let cat: M = e.iter().zip(&b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect();
                let z = add_bias(&mm(&cat, &p(model, "fusion.w")), &row(model, "fusion.b"));
                if mode == FusionMode::Concat {
                    z
                } else {
                    z.iter()
                        .zip(e.iter().zip(&b))
                        .map(|(zr, (er, br))| {
                            (0..zr.len()).map(|c| sigmoid(zr[c]) * er[c] + (1.0 - sigmoid(zr[c])) * br[c]).collect()
                        })
                        .collect()
                }
            }
        };
        let mut x = zero_pad(&add(&fused, &pos), valid);
        for l in 0..cfg.blocks {
            let n = format!("early.{l}");
            let h = norm(model, &x, &format!("{n}.norm1"));
            let q = mm(&h, &p(model, &format!("{n}.attn.wq")));
            let k = mm(&h, &p(model, &format!("{n}.attn.wk")));
            let v = mm(&h, &p(model, &format!("{n}.attn.wv")));
            let a = multi_head(&q, &k, &v, cfg.heads, valid, cfg.causal_mask);
            let a = add_bias(&mm(&a, &p(model, &format!("{n}.attn.out.w"))), &row(model, &format!("{n}.attn.out.b")));
            x = zero_pad(&add(&x, &a), valid);
            let h = norm(model, &x, &format!("{n}.norm2"));
            x = zero_pad(&add(&x, &ffn(model, &h, &format!("{n}.ffn"))), valid);
        }
        zero_pad(&norm(model, &x, "early.norm"), valid)
    });

    let inter = (!cfg.ablate_if).then(|| {
        let mut x = zero_pad(&add(&e, &pos), valid);
        for l in 0..cfg.blocks {
            let n = format!("inter.{l}");
            let h = norm(model, &x, &format!("{n}.norm1"));
            let w = |s: &str| p(model, &format!("{n}.basa.{s}"));
            let qx = mm(&h, &w("wq_item"));
            let kx = mm(&h, &w("wk_item"));
            let qb = mm(&b, &w("wq_behavior"));
            let kb = mm(&b, &w("wk_behavior"));
            let v = mm(&h, &w("wv"));
            // concatenating [Q_x, Q_b] and [K_x, K_b] per head sums the two logit terms
            let dh = cfg.d / cfg.heads;
            let mut heads_out = vec![Vec::new(); x.len()];
            for hd in 0..cfg.heads {
                let q: M = cols(&qx, hd * dh, dh).into_iter().zip(cols(&qb, hd * dh, dh)).map(|(a, c)| [a, c].concat()).collect();
                let k: M = cols(&kx, hd * dh, dh).into_iter().zip(cols(&kb, hd * dh, dh)).map(|(a, c)| [a, c].concat()).collect();
                let o = attention(&q, &k, &cols(&v, hd * dh, dh), valid, 1.0 / (dh as f64).sqrt(), cfg.causal_mask);
                for (r, orow) in heads_out.iter_mut().zip(o) {
                    r.extend(orow);
                }
            }
            let r = add_bias(&mm(&heads_out, &w("out.w")), &w("out.b")[0]);
            x = zero_pad(&add(&x, &r), valid);
            let h = norm(model, &x, &format!("{n}.norm2"));
            let logits = add_bias(&mm(&b, &p(model, &format!("{n}.moe.router.w"))), &row(model, &format!("{n}.moe.router.b")));
            let mut o = vec![vec![0.0; cfg.d]; x.len()];
            let experts: Vec<M> = (0..cfg.experts).map(|i| ffn(model, &h, &format!("{n}.moe.expert{i}"))).collect();
            for r in 0..x.len() {
                let phi = masked_softmax(&logits[r], &vec![true; cfg.experts]);
                for (i, ex) in experts.iter().enumerate() {
                    for c in 0..cfg.d {
                        o[r][c] += phi[i] * ex[r][c];
                    }
                }
            }
            x = zero_pad(&add(&x, &o), valid);
        }
        zero_pad(&norm(model, &x, "inter.norm"), valid)
    });

    let fused = match (&inter, &early) {
        (Some(o), Some(f)) => o
            .iter()
            .zip(f)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| cfg.alpha * x + (1.0 - cfg.alpha) * y).collect())
            .collect(),
        (Some(o), None) => o.clone(),
        (None, Some(f)) => f.clone(),
        _ => unreachable!(),
    };

    let mut next_sets = seq.behaviors[1..].to_vec();
    next_sets.push(target);
    let t = behavior_rows(model, &next_sets, seq.user);
    let q = mm(&t, &p(model, "cross.wq"));
    let k = mm(&fused, &p(model, "cross.wk"));
    let v = mm(&fused, &p(model, "cross.wv"));
    let c = attention(&q, &k, &v, valid, 1.0 / (cfg.d as f64).sqrt(), cfg.causal_mask);
    let x = zero_pad(&add(&fused, &c), valid);
    let h = norm(model, &x, "cross.norm");
    let x = add(&x, &ffn(model, &h, "cross.ffn"));
    zero_pad(&norm(model, &x, "cross.out_norm"), valid)
}

/// Max absolute difference between the model output and the oracle.
pub fn max_abs_diff<T: Scalar>(got: &blade::tensor::Mat<T>, want: &M) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, wr) in want.iter().enumerate() {
        for (c, w) in wr.iter().enumerate() {
            worst = worst.max((got.get(r, c).to_f64().unwrap() - w).abs());
        }
    }
    worst
}
