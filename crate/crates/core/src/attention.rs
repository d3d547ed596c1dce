//! Cosine-scored attention and adaptively sparse multi-head attention.
//!
//! Each head owns a trainable sparsity parameter `α_h = 1 + sigmoid(β_h)`
//! and normalises its scores with α_h-entmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{
    self, check_alpha, entmax_rows, entmax_vjp, softmax_rows, softmax_vjp, sparsemax_rows,
    sparsemax_vjp, AlphaParameter,
};
use crate::error::{Error, Result};
use crate::numeric::{concat, ParamId, ParamStore, Tape, Tensor, Var};

/// Added to every norm in a cosine denominator.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFn {
    Cosine,
    /// `q·k / √d`.
    ScaledDot,
}

/// Normaliser applied to each head's scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Softmax,
    Sparsemax,
    /// α-entmax with a trainable α per head.
    Entmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionInit {
    /// `U(−1/√D, 1/√D)`.
    Uniform,
    /// Each head's projection is the matching column block of the identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub score_fn: ScoreFn,
    pub activation: HeadActivation,
    /// Initial α per head.
    pub alpha_init: Vec<f64>,
}

impl MultiHeadConfig {
    /// Cosine scoring, entmax heads initialised at α = 1.5.
    pub fn new(model_dim: usize, n_heads: usize) -> Self {
        Self {
            model_dim,
            n_heads,
            score_fn: ScoreFn::Cosine,
            activation: HeadActivation::Entmax,
            alpha_init: vec![1.5; n_heads],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("model_dim and n_heads must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.alpha_init.len() != self.n_heads {
            return Err(Error::Config(format!(
                "{} alpha values for {} heads",
                self.alpha_init.len(),
                self.n_heads
            )));
        }
        for &a in &self.alpha_init {
            // α = 2 needs an infinite logit, so the trainable range is open.
            if check_alpha(a).is_err() || a >= 2.0 {
                return Err(Error::Config(format!("initial alpha {a} outside (1, 2)")));
            }
        }
        Ok(())
    }
}

/// Normaliser for [`attend`]; `Entmax` carries a one-element α variable.
#[derive(Clone, Copy, Debug)]
pub enum AttnActivation<'t> {
    Softmax,
    Sparsemax,
    Entmax(Var<'t>),
}

/// Row `i`, column `j` holds the cosine between `q_i` and `k_j`.
pub fn cosine_scores<'t>(q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("cosine_scores", &qs, &ks));
    }
    let qn = q.div(q.norm_axis(1, true)?.add_scalar(NORM_EPS))?;
    let kn = k.div(k.norm_axis(1, true)?.add_scalar(NORM_EPS))?;
    qn.matmul(kn.transpose()?)
}

pub fn scaled_dot_scores<'t>(q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("scaled_dot_scores", &qs, &ks));
    }
    Ok(q.matmul(k.transpose()?)?.scale(1.0 / (qs[1] as f64).sqrt()))
}

pub fn scores<'t>(q: Var<'t>, k: Var<'t>, score_fn: ScoreFn) -> Result<Var<'t>> {
    match score_fn {
        ScoreFn::Cosine => cosine_scores(q, k),
        ScoreFn::ScaledDot => scaled_dot_scores(q, k),
    }
}

/// Attention weights `activation(f(Q, K))`, one row per query.
pub fn attention_weights<'t>(
    q: Var<'t>,
    k: Var<'t>,
    score_fn: ScoreFn,
    activation: AttnActivation<'t>,
) -> Result<Var<'t>> {
    let s = scores(q, k, score_fn)?;
    match activation {
        AttnActivation::Softmax => softmax_rows(s),
        AttnActivation::Sparsemax => sparsemax_rows(s),
        AttnActivation::Entmax(alpha) => entmax_rows(s, alpha),
    }
}

/// `activation(f(Q, K)) · V`.
pub fn attend<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    score_fn: ScoreFn,
    activation: AttnActivation<'t>,
) -> Result<Var<'t>> {
    let (ks, vs) = (k.shape(), v.shape());
    if ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::shape("attend", &ks, &vs));
    }
    attention_weights(q, k, score_fn, activation)?.matmul(v)
}

/// Parameters of one multi-head attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub cfg: MultiHeadConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Unconstrained α logits, one per head.
    pub alpha_raw: ParamId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: MultiHeadConfig,
        init: ProjectionInit,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut proj = |suffix: &str, rng: &mut R| {
            let t = match init {
                ProjectionInit::Identity => {
                    let mut t = Tensor::zeros(&[d, d]);
                    for i in 0..d {
                        t.data_mut()[i * d + i] = 1.0;
                    }
                    t
                }
                ProjectionInit::Uniform => {
                    let bound = 1.0 / (d as f64).sqrt();
                    let data = (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(vec![d, d], data).expect("square projection")
                }
            };
            store.add(format!("{name}.{suffix}"), t, true)
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let raw = cfg
            .alpha_init
            .iter()
            .map(|&a| AlphaParameter::new(a).map(|p| p.raw))
            .collect::<Result<Vec<_>>>()?;
        let trainable = cfg.activation == HeadActivation::Entmax;
        let alpha_raw = store.add(format!("{name}.alpha_raw"), Tensor::vector(raw), trainable);
        Ok(Self {
            cfg,
            wq,
            wk,
            wv,
            alpha_raw,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.alpha_raw]
    }

    /// Current α of every head.
    pub fn alphas(&self, store: &ParamStore) -> Vec<f64> {
        store
            .value(self.alpha_raw)
            .data()
            .iter()
            .map(|&r| activations::alpha_from_raw(r))
            .collect()
    }

    /// Records the parameters on `tape` for use by [`BoundAttention`].
    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundAttention<'t> {
        let alphas = match self.cfg.activation {
            HeadActivation::Entmax => {
                Some(tape.param(store, self.alpha_raw).sigmoid().add_scalar(1.0))
            }
            _ => None,
        };
        BoundAttention {
            cfg: self.cfg.clone(),
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            alphas,
        }
    }
}

/// Multi-head attention parameters recorded on one tape.
pub struct BoundAttention<'t> {
    pub cfg: MultiHeadConfig,
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    /// α per head (a vector), present for entmax heads.
    pub alphas: Option<Var<'t>>,
}

impl<'t> BoundAttention<'t> {
    fn head_activation(&self, head: usize) -> Result<AttnActivation<'t>> {
        Ok(match self.cfg.activation {
            HeadActivation::Softmax => AttnActivation::Softmax,
            HeadActivation::Sparsemax => AttnActivation::Sparsemax,
            HeadActivation::Entmax => {
                let a = self.alphas.expect("entmax heads carry alphas");
                AttnActivation::Entmax(a.slice(0, head, head + 1)?)
            }
        })
    }

    /// `[a_1; …; a_h]` with `a_i = attend(Q W_Qi, K W_Ki, V W_Vi)`.
    pub fn forward(&self, q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let d = self.cfg.model_dim;
        for x in [q, k, v] {
            let s = x.shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape("multi_head_attend", &s, &[d]));
            }
        }
        let qp = q.matmul(self.wq)?;
        let kp = k.matmul(self.wk)?;
        let vp = v.matmul(self.wv)?;
        let dh = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let cols = |x: Var<'t>| x.slice(1, h * dh, (h + 1) * dh);
            heads.push(attend(
                cols(qp)?,
                cols(kp)?,
                cols(vp)?,
                self.cfg.score_fn,
                self.head_activation(h)?,
            )?);
        }
        concat(&heads, 1)
    }

    /// Every row `h_i` of `tokens` attends over its clipped window
    /// `h_{i−c..=i+c}` plus the relay row, in all heads at once.
    pub fn forward_windowed(&self, tokens: Var<'t>, relay: Var<'t>, radius: usize) -> Result<Var<'t>> {
        let d = self.cfg.model_dim;
        let ts = tokens.shape();
        if ts.len() != 2 || ts[1] != d {
            return Err(Error::shape("windowed_attend", &ts, &[d]));
        }
        if relay.shape() != [1, d] {
            return Err(Error::shape("windowed_attend", &relay.shape(), &[1, d]));
        }
        let qp = tokens.matmul(self.wq)?;
        let kp = tokens.matmul(self.wk)?;
        let vp = tokens.matmul(self.wv)?;
        let ks = relay.matmul(self.wk)?;
        let vs = relay.matmul(self.wv)?;
        windowed_kernel(&self.cfg, qp, kp, vp, ks, vs, self.alphas, radius)
    }
}

#[derive(Clone, Copy)]
enum RowAct {
    Softmax,
    Sparsemax,
    Entmax(f64),
}

impl RowAct {
    fn forward(self, z: &[f64]) -> Vec<f64> {
        match self {
            RowAct::Softmax => activations::softmax(z),
            RowAct::Sparsemax => activations::sparsemax(z),
            RowAct::Entmax(a) => activations::entmax(z, a).expect("alpha checked before the row loop"),
        }
    }

    fn vjp(self, z: &[f64], p: &[f64], dp: &[f64]) -> (Vec<f64>, f64) {
        match self {
            RowAct::Softmax => (softmax_vjp(p, dp), 0.0),
            RowAct::Sparsemax => (sparsemax_vjp(p, dp), 0.0),
            RowAct::Entmax(a) => entmax_vjp(z, p, a, dp),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn row_score(q: &[f64], k: &[f64], score_fn: ScoreFn) -> f64 {
    match score_fn {
        ScoreFn::Cosine => dot(q, k) / ((norm(q) + NORM_EPS) * (norm(k) + NORM_EPS)),
        ScoreFn::ScaledDot => dot(q, k) / (q.len() as f64).sqrt(),
    }
}

/// Adds `ds · ∂score(q, k)/∂q` into `dq` and `ds · ∂score/∂k` into `dk`.
fn row_score_vjp(q: &[f64], k: &[f64], s: f64, ds: f64, score_fn: ScoreFn, dq: &mut [f64], dk: &mut [f64]) {
    match score_fn {
        ScoreFn::Cosine => {
            let (qn, kn) = (norm(q), norm(k));
            let (qd, kd) = (qn + NORM_EPS, kn + NORM_EPS);
            let cq = if qn > 0.0 { s / (qd * qn) } else { 0.0 };
            let ck = if kn > 0.0 { s / (kd * kn) } else { 0.0 };
            let inv = 1.0 / (qd * kd);
            for j in 0..q.len() {
                dq[j] += ds * (k[j] * inv - cq * q[j]);
                dk[j] += ds * (q[j] * inv - ck * k[j]);
            }
        }
        ScoreFn::ScaledDot => {
            let c = ds / (q.len() as f64).sqrt();
            for j in 0..q.len() {
                dq[j] += c * k[j];
                dk[j] += c * q[j];
            }
        }
    }
}

/// Window of row `i` as an index range into the token rows.
pub fn window(i: usize, len: usize, radius: usize) -> std::ops::Range<usize> {
    i.saturating_sub(radius)..(i + radius + 1).min(len)
}

#[allow(clippy::too_many_arguments)]
fn windowed_kernel<'t>(
    cfg: &MultiHeadConfig,
    qp: Var<'t>,
    kp: Var<'t>,
    vp: Var<'t>,
    ks: Var<'t>,
    vs: Var<'t>,
    alphas: Option<Var<'t>>,
    radius: usize,
) -> Result<Var<'t>> {
    let (q, k, v, ksv, vsv) = (qp.value(), kp.value(), vp.value(), ks.value(), vs.value());
    let (len, d) = (q.shape()[0], q.shape()[1]);
    let (n_heads, dh, score_fn, act_kind) = (cfg.n_heads, cfg.head_dim(), cfg.score_fn, cfg.activation);
    let alpha_vals: Vec<f64> = alphas.map(|a| a.value().data().to_vec()).unwrap_or_default();
    alpha_vals.iter().try_for_each(|&a| check_alpha(a))?;
    let row_act = move |h: usize, alpha_vals: &[f64]| match act_kind {
        HeadActivation::Softmax => RowAct::Softmax,
        HeadActivation::Sparsemax => RowAct::Sparsemax,
        HeadActivation::Entmax => RowAct::Entmax(alpha_vals[h]),
    };

    let mut out = vec![0.0; len * d];
    // Scores and weights per (row, head), window rows first, relay last.
    let mut cache: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(len * n_heads);
    for i in 0..len {
        let win = window(i, len, radius);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qi = &q.row(i)[cols.clone()];
            let mut z: Vec<f64> = win
                .clone()
                .map(|j| row_score(qi, &k.row(j)[cols.clone()], score_fn))
                .collect();
            z.push(row_score(qi, &ksv.row(0)[cols.clone()], score_fn));
            let p = row_act(h, &alpha_vals).forward(&z);
            let dst = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (w, j) in p.iter().zip(win.clone()) {
                for (o, x) in dst.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += w * x;
                }
            }
            let wr = p[p.len() - 1];
            for (o, x) in dst.iter_mut().zip(&vsv.row(0)[cols.clone()]) {
                *o += wr * x;
            }
            cache.push((z, p));
        }
    }

    let mut inputs = vec![qp, kp, vp, ks, vs];
    if let Some(a) = alphas {
        inputs.push(a);
    }
    let tape = qp.tape();
    Ok(tape.record(
        "windowed_attend",
        &inputs,
        Tensor::new(vec![len, d], out)?,
        Box::new(move |g, inp, _| {
            let (q, k, v, ksv, vsv) = (inp[0], inp[1], inp[2], inp[3], inp[4]);
            let mut dq = vec![0.0; len * d];
            let mut dk = vec![0.0; len * d];
            let mut dv = vec![0.0; len * d];
            let mut dks = vec![0.0; d];
            let mut dvs = vec![0.0; d];
            let mut dalpha = vec![0.0; n_heads];
            for i in 0..len {
                let win = window(i, len, radius);
                for h in 0..n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let (z, p) = &cache[i * n_heads + h];
                    let gout = &g.row(i)[cols.clone()];
                    let mut dp: Vec<f64> = win.clone().map(|j| dot(gout, &v.row(j)[cols.clone()])).collect();
                    dp.push(dot(gout, &vsv.row(0)[cols.clone()]));
                    for (w, j) in p.iter().zip(win.clone()) {
                        for (dst, gx) in dv[j * d + cols.start..j * d + cols.end].iter_mut().zip(gout) {
                            *dst += w * gx;
                        }
                    }
                    let wr = p[p.len() - 1];
                    for (dst, gx) in dvs[cols.clone()].iter_mut().zip(gout) {
                        *dst += wr * gx;
                    }
                    let (dz, da) = row_act(h, &alpha_vals).vjp(z, p, &dp);
                    dalpha[h] += da;
                    let qi = &q.row(i)[cols.clone()];
                    let mut dqi = vec![0.0; dh];
                    let mut dkj = vec![0.0; dh];
                    for (slot, j) in win.clone().enumerate() {
                        dkj.fill(0.0);
                        row_score_vjp(qi, &k.row(j)[cols.clone()], z[slot], dz[slot], score_fn, &mut dqi, &mut dkj);
                        for (dst, x) in dk[j * d + cols.start..j * d + cols.end].iter_mut().zip(&dkj) {
                            *dst += x;
                        }
                    }
                    let last = z.len() - 1;
                    dkj.fill(0.0);
                    row_score_vjp(qi, &ksv.row(0)[cols.clone()], z[last], dz[last], score_fn, &mut dqi, &mut dkj);
                    for (dst, x) in dks[cols.clone()].iter_mut().zip(&dkj) {
                        *dst += x;
                    }
                    for (dst, x) in dq[i * d + cols.start..i * d + cols.end].iter_mut().zip(&dqi) {
                        *dst += x;
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new(vec![len, d], dq).unwrap()),
                Some(Tensor::new(vec![len, d], dk).unwrap()),
                Some(Tensor::new(vec![len, d], dv).unwrap()),
                Some(Tensor::new(vec![1, d], dks).unwrap()),
                Some(Tensor::new(vec![1, d], dvs).unwrap()),
            ];
            if inp.len() == 6 {
                grads.push(Some(Tensor::new(inp[5].shape().to_vec(), dalpha).unwrap()));
            }
            grads
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRole {
    /// Per-token window update.
    Ring,
    /// Relay update.
    Star,
}

impl HeadRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadRole::Ring => "ring",
            HeadRole::Star => "star",
        }
    }
}

/// One learned α, as reported for inspection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaRow {
    pub head_index: usize,
    pub role: HeadRole,
    pub alpha: f64,
}
