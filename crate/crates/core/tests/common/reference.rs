//! Straight-line star-encoder reference on nested `Vec`s.
//!
//! Shares no code with the library beyond reading parameter values: it has
//! its own cosine, softmax, sort-free entmax bisection and projection loops.

#![allow(dead_code)]

use ast_core::attention::{HeadActivation, ScoreFn};
use ast_core::encoder::{RingReading, StarEncoder};
use ast_core::numeric::{ParamId, ParamStore};

pub type Mat = Vec<Vec<f64>>;

pub struct RefHeads {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub alphas: Vec<f64>,
    pub n_heads: usize,
    pub activation: HeadActivation,
    pub score_fn: ScoreFn,
}

fn to_mat(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.value(id);
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j]).collect()).collect()
}

impl RefHeads {
    pub fn from_store(store: &ParamStore, mha: &ast_core::attention::MultiHeadAttention) -> Self {
        let alphas = store
            .value(mha.alpha_raw)
            .data()
            .iter()
            .map(|&b| 1.0 + 1.0 / (1.0 + (-b).exp()))
            .collect();
        Self {
            wq: to_mat(store, mha.wq),
            wk: to_mat(store, mha.wk),
            wv: to_mat(store, mha.wv),
            alphas,
            n_heads: mha.cfg.n_heads,
            activation: mha.cfg.activation,
            score_fn: mha.cfg.score_fn,
        }
    }
}

pub fn project(x: &[f64], w: &Mat, cols: std::ops::Range<usize>) -> Vec<f64> {
    cols.map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i][j]).sum())
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    dot / (na * nb)
}

pub fn ref_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Bisection on τ over `[min − 1, max]` of the scaled scores.
pub fn ref_entmax(z: &[f64], alpha: f64) -> Vec<f64> {
    let x: Vec<f64> = z.iter().map(|v| v * (alpha - 1.0)).collect();
    let p_at = |tau: f64| -> Vec<f64> {
        x.iter()
            .map(|&v| if v > tau { (v - tau).powf(1.0 / (alpha - 1.0)) } else { 0.0 })
            .collect()
    };
    let mut lo = x.iter().cloned().fold(f64::MAX, f64::min) - 1.0;
    let mut hi = x.iter().cloned().fold(f64::MIN, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p_at(mid).iter().sum::<f64>() > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = p_at(0.5 * (lo + hi));
    let s: f64 = p.iter().sum();
    p.iter().map(|v| v / s).collect()
}

/// Sparsemax by bisection, the α = 2 case of [`ref_entmax`].
pub fn ref_sparsemax(z: &[f64]) -> Vec<f64> {
    ref_entmax(z, 2.0)
}

/// Multi-head attention of a single query row over `ctx` rows.
pub fn ref_mhatt_row(heads: &RefHeads, query: &[f64], ctx: &[Vec<f64>]) -> Vec<f64> {
    let d = query.len();
    let dh = d / heads.n_heads;
    let mut out = Vec::with_capacity(d);
    for h in 0..heads.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let q = project(query, &heads.wq, cols.clone());
        let keys: Vec<Vec<f64>> = ctx.iter().map(|r| project(r, &heads.wk, cols.clone())).collect();
        let vals: Vec<Vec<f64>> = ctx.iter().map(|r| project(r, &heads.wv, cols.clone())).collect();
        let z: Vec<f64> = keys
            .iter()
            .map(|k| match heads.score_fn {
                ScoreFn::Cosine => cosine(&q, k),
                ScoreFn::ScaledDot => {
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                }
            })
            .collect();
        let p = match heads.activation {
            HeadActivation::Softmax => ref_softmax(&z),
            HeadActivation::Sparsemax => ref_sparsemax(&z),
            HeadActivation::Entmax => ref_entmax(&z, heads.alphas[h]),
        };
        for c in 0..dh {
            out.push(p.iter().zip(&vals).map(|(w, v)| w * v[c]).sum());
        }
    }
    out
}

pub struct RefEncoded {
    pub states: Mat,
    pub relay: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Reference encoder under either ring reading.
pub fn ref_encode(store: &ParamStore, enc: &StarEncoder, e: &Mat) -> RefEncoded {
    let ring = RefHeads::from_store(store, &enc.ring);
    let star = RefHeads::from_store(store, &enc.star);
    let n = e.len();
    let d = e[0].len();
    let c = enc.cfg.radius;
    let mut h: Mat = e.clone();
    let mut s: Vec<f64> = (0..d).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    for _ in 0..enc.cfg.iterations {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let lo = i.saturating_sub(c);
            let hi = (i + c).min(n - 1);
            let mut ctx: Mat = h[lo..=hi].to_vec();
            ctx.push(s.clone());
            let row = match enc.cfg.reading {
                RingReading::TokenQuery => ref_mhatt_row(&ring, &h[i], &ctx),
                // Each context row queries the lone key h_i: the weight is 1,
                // so every output row (including slot i) is h_i's value.
                RingReading::ContextQuery => ref_mhatt_row(&ring, &ctx[i - lo], &[h[i].clone()]),
            };
            next.push(row);
        }
        h = next;
        s = match enc.cfg.reading {
            RingReading::TokenQuery => ref_mhatt_row(&star, &s, &h),
            RingReading::ContextQuery => {
                let rows: Mat = h.iter().map(|r| ref_mhatt_row(&star, r, &[s.clone()])).collect();
                (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect()
            }
        };
    }
    let pooled = (0..d)
        .map(|j| {
            let m = h.iter().map(|r| r[j]).fold(f64::MIN, f64::max);
            (m + s[j]) / 2.0
        })
        .collect();
    RefEncoded {
        states: h,
        relay: s,
        pooled,
    }
}
