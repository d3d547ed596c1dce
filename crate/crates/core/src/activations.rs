//! Softmax, sparsemax and α-entmax with exact forward and backward passes.
//!
//! All three map a score vector onto the probability simplex. For α > 1,
//! entmax is `p_i = [(α−1)z_i − τ]_+^{1/(α−1)}` with τ chosen so that the
//! entries sum to one; α = 2 is sparsemax and α → 1 approaches softmax.
//! On the support the Jacobian is `diag(g) − g gᵀ / Σg` with `g_i = p_i^{2−α}`.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tensor, Var};

/// Bisection steps used to locate the entmax threshold.
pub const ENTMAX_BISECT_ITERS: usize = 50;

/// Sparsity parameter α of one attention head, stored as the unconstrained
/// logit β with `α = 1 + sigmoid(β)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParameter {
    pub raw: f64,
    pub trainable: bool,
}

impl AlphaParameter {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let s = alpha - 1.0;
        Ok(Self {
            raw: (s / (1.0 - s)).ln(),
            trainable: true,
        })
    }

    pub fn value(&self) -> f64 {
        alpha_from_raw(self.raw)
    }
}

pub fn alpha_from_raw(raw: f64) -> f64 {
    1.0 + 1.0 / (1.0 + (-raw).exp())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha <= 2.0 {
        Ok(())
    } else {
        Err(Error::AlphaDomain(alpha))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softmax,
    Sparsemax,
    Entmax { alpha: f64 },
}

impl Activation {
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Activation::Softmax => Ok(softmax(z)),
            Activation::Sparsemax => Ok(sparsemax(z)),
            Activation::Entmax { alpha } => entmax(z, alpha),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Activation::Softmax => "softmax".into(),
            Activation::Sparsemax => "sparsemax".into(),
            Activation::Entmax { alpha } => format!("entmax{alpha}"),
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x /= total;
    }
    p
}

/// Euclidean projection onto the simplex via the sorted-threshold rule.
/// Ties in the sort keep original index order.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    let tau = sparsemax_threshold(z);
    z.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Threshold τ with `Σ max(z_i − τ, 0) = 1`.
pub fn sparsemax_threshold(z: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += z[i];
        let rank = (k + 1) as f64;
        if 1.0 + rank * z[i] > cumsum {
            support = k + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// α-entmax by bisection on the threshold.
pub fn entmax(z: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    Ok(entmax_unchecked(z, alpha))
}

fn entmax_unchecked(z: &[f64], alpha: f64) -> Vec<f64> {
    let am1 = alpha - 1.0;
    let inv = 1.0 / am1;
    let n = z.len() as f64;
    let scaled: Vec<f64> = z.iter().map(|&x| x * am1).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // The largest entry alone bounds τ from below; an even split bounds it
    // from above.
    let mut lo = max - 1.0;
    let mut hi = max - (1.0 / n).powf(am1);
    let mass = |tau: f64| -> f64 {
        scaled
            .iter()
            .map(|&x| {
                let u = x - tau;
                if u > 0.0 {
                    u.powf(inv)
                } else {
                    0.0
                }
            })
            .sum()
    };
    for _ in 0..ENTMAX_BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut p: Vec<f64> = scaled
        .iter()
        .map(|&x| {
            let u = x - tau;
            if u > 0.0 {
                u.powf(inv)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x /= total;
    }
    p
}

/// `dz` given `dp` for softmax output `p`.
pub fn softmax_vjp(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

/// `dz` given `dp` for sparsemax output `p`.
pub fn sparsemax_vjp(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (&pi, &gi) in p.iter().zip(dp) {
        if pi > 0.0 {
            sum += gi;
            count += 1;
        }
    }
    let mean = sum / count.max(1) as f64;
    p.iter()
        .zip(dp)
        .map(|(&pi, &gi)| if pi > 0.0 { gi - mean } else { 0.0 })
        .collect()
}

/// `(dz, dα)` given `dp` for entmax output `p` computed from scores `z`.
pub fn entmax_vjp(z: &[f64], p: &[f64], alpha: f64, dp: &[f64]) -> (Vec<f64>, f64) {
    let am1 = alpha - 1.0;
    let g: Vec<f64> = p
        .iter()
        .map(|&pi| if pi > 0.0 { pi.powf(2.0 - alpha) } else { 0.0 })
        .collect();
    let gsum: f64 = g.iter().sum();
    let gdp: f64 = g.iter().zip(dp).map(|(a, b)| a * b).sum();
    let dz = g
        .iter()
        .zip(dp)
        .map(|(&gi, &di)| gi * di - gi * gdp / gsum)
        .collect();

    // Differentiating the normalisation condition in α gives
    // dτ/dα = (Σ g_i z_i − Σ p_i ln p_i) / Σ g_i, and then
    // dp_i/dα = (g_i (z_i − dτ/dα) − p_i ln p_i) / (α − 1).
    let plogp = |pi: f64| if pi > 0.0 { pi * pi.ln() } else { 0.0 };
    let gz: f64 = g.iter().zip(z).map(|(a, b)| a * b).sum();
    let ent: f64 = p.iter().map(|&pi| plogp(pi)).sum();
    let dtau = (gz - ent) / gsum;
    let dalpha = p
        .iter()
        .zip(&g)
        .zip(z.iter().zip(dp))
        .map(|((&pi, &gi), (&zi, &di))| di * (gi * (zi - dtau) - plogp(pi)) / am1)
        .sum();
    (dz, dalpha)
}

fn rowwise(x: &Tensor) -> Result<(usize, usize)> {
    x.dims2()
}

/// Softmax along the last axis of a vector or matrix.
pub fn softmax_rows<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let v = x.value();
    let (_, cols) = rowwise(&v)?;
    let mut out = Vec::with_capacity(v.numel());
    for row in v.data().chunks(cols.max(1)) {
        out.extend(softmax(row));
    }
    let value = Tensor::new(v.shape().to_vec(), out)?;
    Ok(x.tape().record(
        "softmax",
        &[x],
        value,
        Box::new(move |g, _, p| {
            let mut d = Vec::with_capacity(p.numel());
            for (pr, gr) in p.data().chunks(cols.max(1)).zip(g.data().chunks(cols.max(1))) {
                d.extend(softmax_vjp(pr, gr));
            }
            vec![Some(Tensor::new(p.shape().to_vec(), d).unwrap())]
        }),
    ))
}

/// Sparsemax along the last axis of a vector or matrix.
pub fn sparsemax_rows<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let v = x.value();
    let (_, cols) = rowwise(&v)?;
    let mut out = Vec::with_capacity(v.numel());
    for row in v.data().chunks(cols.max(1)) {
        out.extend(sparsemax(row));
    }
    let value = Tensor::new(v.shape().to_vec(), out)?;
    Ok(x.tape().record(
        "sparsemax",
        &[x],
        value,
        Box::new(move |g, _, p| {
            let mut d = Vec::with_capacity(p.numel());
            for (pr, gr) in p.data().chunks(cols.max(1)).zip(g.data().chunks(cols.max(1))) {
                d.extend(sparsemax_vjp(pr, gr));
            }
            vec![Some(Tensor::new(p.shape().to_vec(), d).unwrap())]
        }),
    ))
}

/// α-entmax along the last axis; `alpha` is a one-element variable and
/// receives a gradient.
pub fn entmax_rows<'t>(x: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let v = x.value();
    let a = alpha.value();
    if a.numel() != 1 {
        return Err(Error::shape("entmax", v.shape(), a.shape()));
    }
    let a = a.item();
    check_alpha(a)?;
    let (_, cols) = rowwise(&v)?;
    let mut out = Vec::with_capacity(v.numel());
    for row in v.data().chunks(cols.max(1)) {
        out.extend(entmax_unchecked(row, a));
    }
    let value = Tensor::new(v.shape().to_vec(), out)?;
    Ok(x.tape().record(
        "entmax",
        &[x, alpha],
        value,
        Box::new(move |g, inputs, p| {
            let z = inputs[0];
            let alpha = inputs[1].item();
            let mut dz = Vec::with_capacity(p.numel());
            let mut dalpha = 0.0;
            let c = cols.max(1);
            for ((zr, pr), gr) in z.data().chunks(c).zip(p.data().chunks(c)).zip(g.data().chunks(c)) {
                let (d, da) = entmax_vjp(zr, pr, alpha, gr);
                dz.extend(d);
                dalpha += da;
            }
            vec![
                Some(Tensor::new(p.shape().to_vec(), dz).unwrap()),
                Some(Tensor::full(inputs[1].shape(), dalpha)),
            ]
        }),
    ))
}

/// Number of exactly-nonzero entries.
pub fn support_size(p: &[f64]) -> usize {
    p.iter().filter(|&&x| x > 0.0).count()
}

/// Shannon entropy divided by `ln S`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h / (p.len() as f64).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpSumEstimate {
    pub seq_len: usize,
    pub samples: usize,
    pub estimate: f64,
    pub analytic: f64,
}

impl ExpSumEstimate {
    pub fn ratio(&self) -> f64 {
        self.estimate / self.analytic
    }
}

/// `E[e^z]` for `z ~ U(−1, 1)`, i.e. `(e² − 1) / (2e)`.
pub fn expsum_per_token() -> f64 {
    let e = std::f64::consts::E;
    (e * e - 1.0) / (2.0 * e)
}

/// Monte Carlo mean of `Σ_{j≤S} e^{z_j}` with `z_j ~ U(−1, 1)` i.i.d.,
/// alongside its closed form `S (e² − 1) / (2e)`.
pub fn verify_expsum_expectation(seq_len: usize, samples: usize, seed: u64) -> Result<ExpSumEstimate> {
    if seq_len == 0 || samples == 0 {
        return Err(Error::invalid(
            "verify_expsum_expectation",
            "sequence length and sample count must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let mut s = 0.0;
        for _ in 0..seq_len {
            let z: f64 = rng.gen_range(-1.0..=1.0);
            s += z.exp();
        }
        total += s;
    }
    Ok(ExpSumEstimate {
        seq_len,
        samples,
        estimate: total / samples as f64,
        analytic: seq_len as f64 * expsum_per_token(),
    })
}

/// Dimension and distribution of the random embeddings used by
/// [`uniformity_experiment`]: 64-dimensional standard normal.
pub const UNIFORMITY_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityResult {
    pub seq_len: usize,
    pub activation: String,
    /// Attention weights of the first query over all positions.
    pub weights: Vec<f64>,
    pub max_weight: f64,
    pub normalized_entropy: f64,
    pub support_size: usize,
}

/// Single-head cosine self-attention over `seq_len` random embeddings;
/// reports the weights of the first query and their summary statistics.
pub fn uniformity_experiment(
    seq_len: usize,
    dim: usize,
    seed: u64,
    activation: Activation,
) -> Result<UniformityResult> {
    if seq_len < 2 || dim == 0 {
        return Err(Error::invalid(
            "uniformity_experiment",
            "need at least two positions and a positive dimension",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb: Vec<Vec<f64>> = (0..seq_len)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt() + crate::attention::NORM_EPS;
    let q = &emb[0];
    let scores: Vec<f64> = emb
        .iter()
        .map(|k| {
            let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            dot / (norm(q) * norm(k))
        })
        .collect();
    let weights = activation.apply(&scores)?;
    Ok(UniformityResult {
        seq_len,
        activation: activation.name(),
        max_weight: weights.iter().copied().fold(0.0, f64::max),
        normalized_entropy: normalized_entropy(&weights),
        support_size: support_size(&weights),
        weights,
    })
}

/// Means of [`uniformity_experiment`] over `n_seeds` consecutive seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityPoint {
    pub seq_len: usize,
    pub activation: String,
    pub mean_max_weight: f64,
    pub mean_normalized_entropy: f64,
    pub mean_support_size: f64,
}

pub fn uniformity_curve(
    seq_lens: &[usize],
    dim: usize,
    n_seeds: u64,
    first_seed: u64,
    activation: Activation,
) -> Result<Vec<UniformityPoint>> {
    if n_seeds == 0 {
        return Err(Error::invalid("uniformity_curve", "need at least one seed"));
    }
    seq_lens
        .iter()
        .map(|&s| {
            let (mut mw, mut ent, mut sup) = (0.0, 0.0, 0.0);
            for seed in first_seed..first_seed + n_seeds {
                let r = uniformity_experiment(s, dim, seed, activation)?;
                mw += r.max_weight;
                ent += r.normalized_entropy;
                sup += r.support_size as f64;
            }
            let n = n_seeds as f64;
            Ok(UniformityPoint {
                seq_len: s,
                activation: activation.name(),
                mean_max_weight: mw / n,
                mean_normalized_entropy: ent / n,
                mean_support_size: sup / n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        assert!(close(&softmax(&[0.0; 4]), &[0.25; 4], 1e-15));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|x| x.exp()).sum();
        let direct: Vec<f64> = z.iter().map(|x| x.exp() / denom).collect();
        assert!(close(&softmax(&z), &direct, 1e-15));
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = z.iter().map(|x| x + 7.0).collect();
        assert!(close(&softmax(&z), &softmax(&shifted), 1e-15));
    }

    #[test]
    fn sparsemax_hand_cases() {
        assert_eq!(sparsemax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(sparsemax(&[2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(sparsemax(&[0.5, 0.0]), vec![0.75, 0.25]);
        assert_eq!(sparsemax_threshold(&[2.0, 0.0]), 1.0);
        assert_eq!(sparsemax_threshold(&[0.5, 0.0]), -0.25);
    }

    #[test]
    fn entmax_rejects_alpha_outside_domain() {
        assert!(matches!(entmax(&[1.0, 2.0], 1.0), Err(Error::AlphaDomain(_))));
        assert!(matches!(entmax(&[1.0, 2.0], 2.5), Err(Error::AlphaDomain(_))));
        assert!(entmax(&[1.0, 2.0], 2.0).is_ok());
    }

    #[test]
    fn alpha_reparameterisation_roundtrip() {
        let a = AlphaParameter::new(1.5).unwrap();
        assert_eq!(a.raw, 0.0);
        assert_eq!(a.value(), 1.5);
        let b = AlphaParameter::new(1.8).unwrap();
        assert!((b.value() - 1.8).abs() < 1e-14);
        assert!(AlphaParameter::new(0.9).is_err());
    }

    #[test]
    fn expsum_closed_form() {
        assert!((expsum_per_token() - 1.1752).abs() < 5e-5);
        let r = verify_expsum_expectation(25, 10, 0).unwrap();
        assert!((r.analytic - 29.380).abs() < 1e-3);
    }

    #[test]
    fn normalized_entropy_bounds() {
        assert!((normalized_entropy(&[0.25; 4]) - 1.0).abs() < 1e-15);
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn uniformity_weights_normalised() {
        for act in [Activation::Softmax, Activation::Sparsemax, Activation::Entmax { alpha: 1.5 }] {
            let r = uniformity_experiment(25, UNIFORMITY_DIM, 3, act).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
