//! Star Transformer sequence-to-vector encoder.
//!
//! Token states start at the input embeddings and the relay starts at their
//! mean. Each of `T` iterations first updates every token from its clipped
//! window of radius `c` plus the relay (ring heads), then updates the relay
//! from all token states (star heads). The pooled output is
//! `(rowwise max of H + s) / 2`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, window, AlphaRow, AttnActivation, HeadRole, MultiHeadAttention, MultiHeadConfig,
    ProjectionInit, ScoreFn,
};
use crate::error::{Error, Result};
use crate::numeric::{concat, ParamId, ParamStore, Tape, Tensor, Var};

/// How the ring update `h_i := MHAtt(C_i, h_i, h_i)` assigns query and
/// key/value roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingReading {
    /// `h_i` queries its context `C_i`; the relay queries `H`.
    TokenQuery,
    /// `C_i` queries the single key/value `h_i` and the row in position
    /// `i`'s slot becomes the new `h_i`; `H` queries the relay and the rows
    /// are averaged. Every head then sees exactly one key.
    ContextQuery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PositionEmbedding {
    None,
    Learned { max_len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    None,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarEncoderConfig {
    pub model_dim: usize,
    /// Window radius `c`.
    pub radius: usize,
    /// Iterations `T`.
    pub iterations: usize,
    pub ring: MultiHeadConfig,
    pub star: MultiHeadConfig,
    pub positions: PositionEmbedding,
    pub reading: RingReading,
    pub nonlinearity: Nonlinearity,
    pub init: ProjectionInit,
}

impl Default for StarEncoderConfig {
    fn default() -> Self {
        Self::with_dims(300, 6, 3, 2)
    }
}

impl StarEncoderConfig {
    pub fn with_dims(model_dim: usize, n_heads: usize, radius: usize, iterations: usize) -> Self {
        Self {
            model_dim,
            radius,
            iterations,
            ring: MultiHeadConfig::new(model_dim, n_heads),
            star: MultiHeadConfig::new(model_dim, n_heads),
            positions: PositionEmbedding::None,
            reading: RingReading::TokenQuery,
            nonlinearity: Nonlinearity::None,
            init: ProjectionInit::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ring.validate()?;
        self.star.validate()?;
        if self.ring.model_dim != self.model_dim || self.star.model_dim != self.model_dim {
            return Err(Error::Config(format!(
                "ring ({}) and star ({}) widths must equal model_dim {}",
                self.ring.model_dim, self.star.model_dim, self.model_dim
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if let PositionEmbedding::Learned { max_len: 0 } = self.positions {
            return Err(Error::Config("learned positions need max_len >= 1".into()));
        }
        Ok(())
    }
}

/// Final token states, relay state and pooled vector of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub states: Tensor,
    pub relay: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Tape variables produced by [`StarEncoder::encode`].
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars<'t> {
    /// `S × D`.
    pub states: Var<'t>,
    /// `1 × D`.
    pub relay: Var<'t>,
    /// `1 × D`.
    pub pooled: Var<'t>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarEncoder {
    pub cfg: StarEncoderConfig,
    pub ring: MultiHeadAttention,
    pub star: MultiHeadAttention,
    pub positions: Option<ParamId>,
}

impl StarEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: StarEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ring = MultiHeadAttention::new(store, "ring", cfg.ring.clone(), cfg.init, rng)?;
        let star = MultiHeadAttention::new(store, "star", cfg.star.clone(), cfg.init, rng)?;
        let positions = match cfg.positions {
            PositionEmbedding::None => None,
            PositionEmbedding::Learned { max_len } => {
                let d = cfg.model_dim;
                let data = (0..max_len * d)
                    .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Some(store.add("positions", Tensor::new(vec![max_len, d], data)?, true))
            }
        };
        Ok(Self {
            cfg,
            ring,
            star,
            positions,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ring.param_ids().into_iter().collect();
        ids.extend(self.star.param_ids());
        ids.extend(self.positions);
        ids
    }

    pub fn report_alphas(&self, store: &ParamStore) -> Vec<AlphaRow> {
        let rows = |role: HeadRole, alphas: Vec<f64>| {
            alphas
                .into_iter()
                .enumerate()
                .map(move |(i, alpha)| AlphaRow {
                    head_index: i + 1,
                    role,
                    alpha,
                })
        };
        rows(HeadRole::Ring, self.ring.alphas(store))
            .chain(rows(HeadRole::Star, self.star.alphas(store)))
            .collect()
    }

    /// Encodes an `S × D` embedding matrix recorded on `tape`.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, embeddings: Var<'t>) -> Result<EncodedVars<'t>> {
        let shape = embeddings.shape();
        let d = self.cfg.model_dim;
        if shape.len() != 2 {
            return Err(Error::shape("encode", &shape, &[0, d]));
        }
        let len = shape[0];
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if shape[1] != d {
            return Err(Error::shape("encode", &shape, &[len, d]));
        }

        let mut states = match self.positions {
            None => embeddings,
            Some(pid) => {
                let table = tape.param(store, pid);
                let max_len = store.value(pid).shape()[0];
                let idx: Vec<usize> = (0..len).map(|i| i.min(max_len - 1)).collect();
                embeddings.add(table.gather_rows(&idx)?)?
            }
        };
        let mut relay = states.mean_axis(0, true)?;
        let ring = self.ring.bind(tape, store);
        let star = self.star.bind(tape, store);
        let radius = self.cfg.radius;

        for _ in 0..self.cfg.iterations {
            states = match self.cfg.reading {
                RingReading::TokenQuery => ring.forward_windowed(states, relay, radius)?,
                RingReading::ContextQuery => {
                    let mut rows = Vec::with_capacity(len);
                    for i in 0..len {
                        let win = window(i, len, radius);
                        let ctx = concat(&[states.slice(0, win.start, win.end)?, relay], 0)?;
                        let hi = states.slice(0, i, i + 1)?;
                        let out = ring.forward(ctx, hi, hi)?;
                        let slot = i - win.start;
                        rows.push(out.slice(0, slot, slot + 1)?);
                    }
                    concat(&rows, 0)?
                }
            };
            states = self.activate(states);
            relay = match self.cfg.reading {
                RingReading::TokenQuery => star.forward(relay, states, states)?,
                RingReading::ContextQuery => star.forward(states, relay, relay)?.mean_axis(0, true)?,
            };
            relay = self.activate(relay);
        }

        let pooled = states.max_axis(0, true)?.add(relay)?.scale(0.5);
        Ok(EncodedVars {
            states,
            relay,
            pooled,
        })
    }

    fn activate<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self.cfg.nonlinearity {
            Nonlinearity::None => x,
            Nonlinearity::Relu => x.max_scalar(0.0),
        }
    }

    /// Forward pass outside of any training graph.
    pub fn encode_values(&self, store: &ParamStore, embeddings: &Tensor) -> Result<EncodedSequence> {
        let tape = Tape::new();
        let e = tape.constant(embeddings.clone());
        let out = self.encode(&tape, store, e)?;
        Ok(EncodedSequence {
            states: (*out.states.value()).clone(),
            relay: out.relay.value().data().to_vec(),
            pooled: out.pooled.value().data().to_vec(),
        })
    }
}

/// Median forward wall time per sequence length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub seq_len: usize,
    pub median_ms_star: f64,
    pub median_ms_full: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the star encoder against one full `S × S` softmax attention over
/// the same random embeddings.
pub fn measure_scaling(
    seq_lens: &[usize],
    cfg: &StarEncoderConfig,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    if seq_lens.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("measure_scaling", "sequence lengths must be ascending"));
    }
    if repeats == 0 {
        return Err(Error::invalid("measure_scaling", "repeats must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = StarEncoder::new(&mut store, cfg.clone(), &mut rng)?;
    let d = cfg.model_dim;
    let mut rows = Vec::with_capacity(seq_lens.len());
    for &len in seq_lens {
        let data = (0..len * d).map(|_| rng.sample(StandardNormal)).collect();
        let emb = Tensor::new(vec![len, d], data)?;
        let mut star_ms = Vec::with_capacity(repeats);
        let mut full_ms = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let out = encoder.encode_values(&store, &emb)?;
            star_ms.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);

            let start = Instant::now();
            let tape = Tape::new();
            let x = tape.constant(emb.clone());
            let out = attend(x, x, x, ScoreFn::Cosine, AttnActivation::Softmax)?;
            std::hint::black_box(out.value());
            full_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(ScalingRow {
            seq_len: len,
            median_ms_star: median(star_ms),
            median_ms_full: median(full_ms),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(len: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![len, d], (0..len * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn build(cfg: StarEncoderConfig) -> (ParamStore, StarEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = StarEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, enc) = build(StarEncoderConfig::with_dims(4, 2, 1, 1));
        assert!(matches!(
            enc.encode_values(&store, &Tensor::zeros(&[0, 4])),
            Err(Error::EmptySequence)
        ));
        assert!(matches!(
            enc.encode_values(&store, &Tensor::zeros(&[3, 5])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pooled_is_mean_of_max_and_relay() {
        let (store, enc) = build(StarEncoderConfig::with_dims(6, 3, 1, 2));
        let out = enc.encode_values(&store, &random(5, 6, 1)).unwrap();
        for j in 0..6 {
            let max = (0..5).map(|i| out.states.get2(i, j)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out.pooled[j], (max + out.relay[j]) * 0.5);
        }
    }

    #[test]
    fn single_token_fixed_point() {
        for reading in [RingReading::TokenQuery, RingReading::ContextQuery] {
            let mut cfg = StarEncoderConfig::with_dims(4, 2, 1, 1);
            cfg.init = ProjectionInit::Identity;
            cfg.reading = reading;
            let (store, enc) = build(cfg);
            let e = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
            let out = enc.encode_values(&store, &e).unwrap();
            assert_eq!(out.states.data(), e.data());
            assert_eq!(out.pooled, e.data());
        }
    }

    #[test]
    fn config_rejects_mismatched_widths() {
        let mut cfg = StarEncoderConfig::with_dims(6, 3, 1, 1);
        cfg.star = MultiHeadConfig::new(4, 2);
        assert!(cfg.validate().is_err());
        let mut cfg = StarEncoderConfig::with_dims(6, 3, 1, 1);
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_config_matches_documented_defaults() {
        let cfg = StarEncoderConfig::default();
        assert_eq!((cfg.model_dim, cfg.radius, cfg.iterations), (300, 3, 2));
        assert_eq!((cfg.ring.n_heads, cfg.star.n_heads), (6, 6));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn scaling_rejects_unsorted_lengths() {
        let cfg = StarEncoderConfig::with_dims(4, 2, 1, 1);
        assert!(measure_scaling(&[8, 4], &cfg, 1, 0).is_err());
        let rows = measure_scaling(&[4, 8], &cfg, 1, 0).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
