//! Finite-difference checks for every differentiable kernel.

use ast_core::activations::{entmax, entmax_rows, softmax_rows, sparsemax, sparsemax_rows};
use ast_core::attention::{
    attend, cosine_scores, AttnActivation, HeadActivation, MultiHeadAttention, MultiHeadConfig,
    ProjectionInit, ScoreFn,
};
use ast_core::encoder::{RingReading, StarEncoder, StarEncoderConfig};
use ast_core::numeric::gradcheck::{check_inputs, check_params};
use ast_core::numeric::{concat, ParamStore, Tape, Tensor};
use ast_core::siamese::{triplet_loss, TripletBatch};
use super::{randn, rng};

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

pub fn composite_tensor_graph() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let inputs = [randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2]), randn(&mut r, &[1, 2])];
        let err = check_inputs(&inputs, |_, v| {
            let (x, w, b) = (v[0], v[1], v[2]);
            let a = x.matmul(w)?.add(b)?;
            let c = a.sigmoid().mul(a)?.div(a.exp()?.add_scalar(1.0))?;
            let m = concat(&[c, a.slice(1, 0, 1)?], 1)?.gather_rows(&[2, 0, 2])?;
            let unit = m.div(m.norm_axis(1, true)?)?.sum_axis(0, false)?;
            let mx = a.max_axis(0, false)?;
            let hinge = a.sub(b)?.max_scalar(0.1).sum()?;
            let t = x.transpose()?.mean_axis(1, false)?.scale(3.0).sum()?;
            unit.sum()?
                .add(mx.mul(mx)?.sum()?)?
                .add(a.mean_axis(1, true)?.sum()?)?
                .add(hinge)?
                .add(t)
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

/// Scores whose scaled distance to the threshold is under 1e-3 sit on a
/// support boundary where the Jacobian jumps.
fn near_boundary(z: &[f64], alpha: f64) -> bool {
    let p = entmax(z, alpha).unwrap();
    let k = p.iter().position(|&x| x > 0.0).unwrap();
    let tau = (alpha - 1.0) * z[k] - p[k].powf(alpha - 1.0);
    z.iter().any(|&zi| ((alpha - 1.0) * zi - tau).abs() < 1e-3)
}

fn sparse_instances(seed0: u64, alpha: f64) -> Vec<(Tensor, Tensor)> {
    let mut out = Vec::new();
    let mut seed = seed0;
    while out.len() < INSTANCES as usize {
        let mut r = rng(seed);
        seed += 1;
        let z = randn(&mut r, &[3, 6]);
        if z.rows().any(|row| near_boundary(row, alpha)) {
            continue;
        }
        out.push((z, randn(&mut r, &[3, 6])));
    }
    out
}

pub fn softmax_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (z, w) = (randn(&mut r, &[3, 6]), randn(&mut r, &[3, 6]));
        let err = check_inputs(&[z], |t, v| softmax_rows(v[0])?.mul(t.constant(w.clone()))?.sum()).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn sparsemax_gradient_off_boundary() {
    for (z, w) in sparse_instances(200, 2.0) {
        let p = sparsemax(z.row(0));
        assert!(p.iter().any(|&x| x == 0.0) || p.iter().all(|&x| x > 0.0));
        let err = check_inputs(&[z], |t, v| sparsemax_rows(v[0])?.mul(t.constant(w.clone()))?.sum()).unwrap();
        assert!(err < TOL, "{err}");
    }
}

pub fn entmax_gradient_wrt_scores_and_alpha() {
    for alpha in [1.2, 1.5, 1.8] {
        for (z, w) in sparse_instances(300, alpha) {
            // α enters through its logit, as in a trained head.
            let raw = Tensor::vector(vec![((alpha - 1.0) / (2.0 - alpha)).ln()]);
            let err = check_inputs(&[z, raw], |t, v| {
                let a = v[1].sigmoid().add_scalar(1.0);
                entmax_rows(v[0], a)?.mul(t.constant(w.clone()))?.sum()
            })
            .unwrap();
            assert!(err < TOL, "alpha {alpha}: {err}");
        }
    }
}

pub fn cosine_scores_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let inputs = [randn(&mut r, &[3, 5]), randn(&mut r, &[4, 5])];
        let w = randn(&mut r, &[3, 4]);
        let err = check_inputs(&inputs, |t, v| cosine_scores(v[0], v[1])?.mul(t.constant(w.clone()))?.sum()).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn attend_gradient_all_activations() {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let inputs = [
            randn(&mut r, &[2, 4]),
            randn(&mut r, &[5, 4]),
            randn(&mut r, &[5, 3]),
            Tensor::vector(vec![0.3]),
        ];
        let w = randn(&mut r, &[2, 3]);
        for which in 0..3 {
            for score_fn in [ScoreFn::Cosine, ScoreFn::ScaledDot] {
                let err = check_inputs(&inputs, |t, v| {
                    let act = match which {
                        0 => AttnActivation::Softmax,
                        1 => AttnActivation::Sparsemax,
                        _ => AttnActivation::Entmax(v[3].sigmoid().add_scalar(1.0)),
                    };
                    attend(v[0], v[1], v[2], score_fn, act)?.mul(t.constant(w.clone()))?.sum()
                })
                .unwrap();
                assert!(err < TOL, "seed {seed} act {which} {score_fn:?}: {err}");
            }
        }
    }
}

pub fn multi_head_parameter_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let mut store = ParamStore::new();
        let mut cfg = MultiHeadConfig::new(4, 2);
        cfg.alpha_init = vec![1.3, 1.7];
        let mha = MultiHeadAttention::new(&mut store, "m", cfg, ProjectionInit::Uniform, &mut r).unwrap();
        let (q, kv, w) = (randn(&mut r, &[3, 4]), randn(&mut r, &[5, 4]), randn(&mut r, &[3, 4]));
        let report = check_params(&mut store, &mha.param_ids(), |tape, store| {
            let b = mha.bind(tape, store);
            let kv = tape.constant(kv.clone());
            b.forward(tape.constant(q.clone()), kv, kv)?.mul(tape.constant(w.clone()))?.sum()
        })
        .unwrap();
        for (id, err) in report {
            assert!(err < TOL, "seed {seed} {}: {err}", store.get(id).name);
        }
    }
}

fn windowed_loss<'t>(
    tape: &'t Tape,
    mha: &MultiHeadAttention,
    store: &ParamStore,
    tokens: ast_core::numeric::Var<'t>,
    relay: ast_core::numeric::Var<'t>,
    w: &Tensor,
    radius: usize,
    fused: bool,
) -> ast_core::Result<ast_core::numeric::Var<'t>> {
    let b = mha.bind(tape, store);
    let out = if fused {
        b.forward_windowed(tokens, relay, radius)?
    } else {
        let n = tokens.shape()[0];
        let mut rows = Vec::new();
        for i in 0..n {
            let win = ast_core::attention::window(i, n, radius);
            let ctx = concat(&[tokens.slice(0, win.start, win.end)?, relay], 0)?;
            rows.push(b.forward(tokens.slice(0, i, i + 1)?, ctx, ctx)?);
        }
        concat(&rows, 0)?
    };
    out.mul(tape.constant(w.clone()))?.sum()
}

pub fn fused_window_kernel_matches_composed_route() {
    for seed in 0..INSTANCES {
        for (activation, score_fn) in [
            (HeadActivation::Entmax, ScoreFn::Cosine),
            (HeadActivation::Softmax, ScoreFn::ScaledDot),
            (HeadActivation::Sparsemax, ScoreFn::Cosine),
        ] {
            let mut r = rng(700 + seed);
            let mut store = ParamStore::new();
            let mut cfg = MultiHeadConfig::new(6, 3);
            cfg.activation = activation;
            cfg.score_fn = score_fn;
            cfg.alpha_init = vec![1.2, 1.5, 1.9];
            let mha = MultiHeadAttention::new(&mut store, "m", cfg, ProjectionInit::Uniform, &mut r).unwrap();
            let n = 1 + (seed as usize % 7);
            let (h, s, w) = (randn(&mut r, &[n, 6]), randn(&mut r, &[1, 6]), randn(&mut r, &[n, 6]));
            let radius = seed as usize % 3;

            let mut results = Vec::new();
            for fused in [true, false] {
                let tape = Tape::new();
                let hv = tape.leaf(h.clone(), true);
                let sv = tape.leaf(s.clone(), true);
                let loss = windowed_loss(&tape, &mha, &store, hv, sv, &w, radius, fused).unwrap();
                tape.backward(loss).unwrap();
                let mut grads = vec![tape.grad(hv).unwrap(), tape.grad(sv).unwrap()];
                let mut pg = tape.param_grads();
                pg.sort_by_key(|(id, _)| *id);
                grads.extend(pg.into_iter().map(|(_, g)| g));
                results.push((loss.item(), grads));
            }
            let (a, b) = (&results[0], &results[1]);
            assert!((a.0 - b.0).abs() < 1e-10, "forward differs: {} vs {}", a.0, b.0);
            assert_eq!(a.1.len(), b.1.len());
            for (ga, gb) in a.1.iter().zip(&b.1) {
                assert!(ga.max_abs_diff(gb) < 1e-9, "gradient differs by {}", ga.max_abs_diff(gb));
            }
        }
    }
}

pub fn fused_window_kernel_finite_differences() {
    for seed in 0..INSTANCES {
        let mut r = rng(800 + seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "m", MultiHeadConfig::new(4, 2), ProjectionInit::Uniform, &mut r).unwrap();
        let (h, s, w) = (randn(&mut r, &[5, 4]), randn(&mut r, &[1, 4]), randn(&mut r, &[5, 4]));
        let err = check_inputs(&[h, s], |tape, v| windowed_loss(tape, &mha, &store, v[0], v[1], &w, 1, true)).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn star_encoder_end_to_end() {
    for seed in 0..INSTANCES {
        for reading in [RingReading::TokenQuery, RingReading::ContextQuery] {
            let mut r = rng(900 + seed);
            let mut store = ParamStore::new();
            let mut cfg = StarEncoderConfig::with_dims(4, 2, 1, 2);
            cfg.reading = reading;
            let enc = StarEncoder::new(&mut store, cfg, &mut r).unwrap();
            let (e, w) = (randn(&mut r, &[4, 4]), randn(&mut r, &[1, 4]));
            let err = check_inputs(&[e.clone()], |tape, v| {
                enc.encode(tape, &store, v[0])?.pooled.mul(tape.constant(w.clone()))?.sum()
            })
            .unwrap();
            assert!(err < TOL, "seed {seed} {reading:?} embeddings: {err}");
            let ids = enc.param_ids();
            let report = check_params(&mut store, &ids, |tape, store| {
                let ev = tape.constant(e.clone());
                enc.encode(tape, store, ev)?.pooled.mul(tape.constant(w.clone()))?.sum()
            })
            .unwrap();
            for (id, err) in report {
                assert!(err < TOL, "seed {seed} {reading:?} {}: {err}", store.get(id).name);
            }
        }
    }
}

pub fn triplet_loss_gradient() {
    let mut checked = 0;
    for seed in 0.. {
        if checked == INSTANCES {
            break;
        }
        let mut r = rng(50 + seed);
        let inputs = [randn(&mut r, &[4, 5]), randn(&mut r, &[4, 5]), randn(&mut r, &[4, 5])];
        // Keep every hinge away from its kink.
        let b = TripletBatch::new(inputs[0].clone(), inputs[1].clone(), inputs[2].clone(), 0.0).unwrap();
        let margin = 0.2;
        let kinked = (0..4).any(|i| {
            let d = |x: &Tensor| b.anchors.row(i).iter().zip(x.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            (d(&b.positives) - d(&b.negatives) + margin).abs() < 1e-3
        });
        if kinked {
            continue;
        }
        let err = check_inputs(&inputs, |_, v| triplet_loss(v[0], v[1], v[2], margin)).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
        checked += 1;
    }
}

/// Every check with its name, for runners outside libtest.
pub const ALL: &[(&str, fn())] = &[
    ("composite_tensor_graph", composite_tensor_graph),
    ("softmax_gradient", softmax_gradient),
    ("sparsemax_gradient_off_boundary", sparsemax_gradient_off_boundary),
    ("entmax_gradient_wrt_scores_and_alpha", entmax_gradient_wrt_scores_and_alpha),
    ("cosine_scores_gradient", cosine_scores_gradient),
    ("attend_gradient_all_activations", attend_gradient_all_activations),
    ("multi_head_parameter_gradients", multi_head_parameter_gradients),
    ("fused_window_kernel_matches_composed_route", fused_window_kernel_matches_composed_route),
    ("fused_window_kernel_finite_differences", fused_window_kernel_finite_differences),
    ("star_encoder_end_to_end", star_encoder_end_to_end),
    ("triplet_loss_gradient", triplet_loss_gradient),
];
