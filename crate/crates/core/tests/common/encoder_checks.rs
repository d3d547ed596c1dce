//! The encoder against the straight-line reference.

use ast_core::attention::{HeadActivation, ProjectionInit, ScoreFn};
use ast_core::encoder::{RingReading, StarEncoder, StarEncoderConfig};
use ast_core::numeric::{ParamStore, Tensor};
use rand::Rng;

use super::reference::ref_encode;
use super::{randn, rng, rows};

fn random_config(r: &mut impl Rng) -> StarEncoderConfig {
    let heads = [1, 2, 3][r.gen_range(0..3)];
    let mut cfg = StarEncoderConfig::with_dims(heads * 2, heads, r.gen_range(0..=2), r.gen_range(1..=2));
    let act = [HeadActivation::Entmax, HeadActivation::Softmax, HeadActivation::Sparsemax][r.gen_range(0..3)];
    let score = [ScoreFn::Cosine, ScoreFn::ScaledDot][r.gen_range(0..2)];
    for mh in [&mut cfg.ring, &mut cfg.star] {
        mh.activation = act;
        mh.score_fn = score;
        mh.alpha_init = (0..heads).map(|_| r.gen_range(1.1..1.9)).collect();
    }
    cfg
}

pub fn encoder_matches_reference_on_random_instances() {
    for seed in 0..50u64 {
        for reading in [RingReading::TokenQuery, RingReading::ContextQuery] {
            let mut r = rng(seed);
            let mut cfg = random_config(&mut r);
            cfg.reading = reading;
            let d = cfg.model_dim;
            let mut store = ParamStore::new();
            let enc = StarEncoder::new(&mut store, cfg, &mut r).unwrap();
            let n = r.gen_range(1..=8);
            let e = randn(&mut r, &[n, d]);
            let got = enc.encode_values(&store, &e).unwrap();
            let want = ref_encode(&store, &enc, &rows(&e));
            for (a, b) in rows(&got.states).iter().flatten().zip(want.states.iter().flatten()) {
                assert!((a - b).abs() < 1e-10, "seed {seed} {reading:?} states {a} vs {b}");
            }
            for (a, b) in got.relay.iter().zip(&want.relay) {
                assert!((a - b).abs() < 1e-10, "seed {seed} {reading:?} relay");
            }
            for (a, b) in got.pooled.iter().zip(&want.pooled) {
                assert!((a - b).abs() < 1e-10, "seed {seed} {reading:?} pooled");
            }
        }
    }
}


/// A lone token with identity projections attends only to itself and to a
/// relay equal to it, so every stage returns the token unchanged.
pub fn single_token_fixed_point() {
    for reading in [RingReading::TokenQuery, RingReading::ContextQuery] {
        let mut cfg = StarEncoderConfig::with_dims(4, 2, 1, 1);
        cfg.init = ProjectionInit::Identity;
        cfg.reading = reading;
        let mut store = ParamStore::new();
        let enc = StarEncoder::new(&mut store, cfg, &mut rng(0)).unwrap();
        let e = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let out = enc.encode_values(&store, &e).unwrap();
        assert_eq!(out.states.data(), e.data(), "{reading:?}");
        assert_eq!(out.pooled, e.data(), "{reading:?}");
    }
}
