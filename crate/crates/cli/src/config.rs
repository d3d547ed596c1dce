//! Run configuration loaded from TOML.
//!
//! Every random component draws its seed from the root `seed` through
//! [`derive_seed`] with a fixed stream number from [`streams`].

use std::path::{Path, PathBuf};

use ast_core::attention::{HeadActivation, ScoreFn};
use ast_core::corpus::{derive_seed, TopicModelSpec};
use ast_core::encoder::{Nonlinearity, PositionEmbedding, RingReading, StarEncoderConfig};
use ast_core::eval::DEFAULT_R_VALUES;
use ast_core::siamese::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Stream numbers for [`derive_seed`].
pub mod streams {
    pub const CORPUS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const TRAINING: u64 = 4;
    pub const UNIFORMITY: u64 = 5;
    pub const APPENDIX: u64 = 6;
    pub const SCALING: u64 = 7;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_articles: usize,
    pub comments_per_article: usize,
    /// Share of articles (with their comments) used for training; the rest
    /// are held out for scoring.
    pub train_fraction: f64,
    pub n_topics: usize,
    pub vocab_size: usize,
    pub article_len: (usize, usize),
    pub comment_len: (usize, usize),
    pub topics_per_article: (usize, usize),
    pub topic_words: usize,
    pub concentration: f64,
    pub background_weight: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let s = TopicModelSpec::default();
        Self {
            n_articles: 200,
            comments_per_article: 2,
            train_fraction: 0.5,
            n_topics: s.n_topics,
            vocab_size: s.vocab_size,
            article_len: s.article_len,
            comment_len: s.comment_len,
            topics_per_article: s.topics_per_article,
            topic_words: s.topic_words,
            concentration: s.concentration,
            background_weight: s.background_weight,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self, seed: u64) -> TopicModelSpec {
        TopicModelSpec {
            n_topics: self.n_topics,
            vocab_size: self.vocab_size,
            article_len: self.article_len,
            comment_len: self.comment_len,
            topics_per_article: self.topics_per_article,
            topic_words: self.topic_words,
            concentration: self.concentration,
            background_weight: self.background_weight,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub radius: usize,
    pub iterations: usize,
    pub score_fn: ScoreFn,
    pub activation: HeadActivation,
    pub alpha_init: f64,
    pub reading: RingReading,
    /// Length of a learned position table; zero disables positions.
    pub learned_positions: usize,
    pub nonlinearity: Nonlinearity,
    pub max_article_len: usize,
    /// Standard deviation of randomly initialized word vectors.
    pub embedding_std: f64,
    /// Optional word-vector text file; its vocabulary replaces the corpus one.
    pub word_vectors: Option<PathBuf>,
    /// Overrides whether the embedding table is trained.
    pub train_embeddings: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 300,
            n_heads: 6,
            radius: 3,
            iterations: 2,
            score_fn: ScoreFn::Cosine,
            activation: HeadActivation::Entmax,
            alpha_init: 1.5,
            reading: RingReading::TokenQuery,
            learned_positions: 0,
            nonlinearity: Nonlinearity::None,
            max_article_len: 512,
            embedding_std: 3.0,
            word_vectors: None,
            train_embeddings: None,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> StarEncoderConfig {
        let mut cfg = StarEncoderConfig::with_dims(self.model_dim, self.n_heads, self.radius, self.iterations);
        for heads in [&mut cfg.ring, &mut cfg.star] {
            heads.score_fn = self.score_fn;
            heads.activation = self.activation;
            heads.alpha_init = vec![self.alpha_init; self.n_heads];
        }
        cfg.reading = self.reading;
        cfg.nonlinearity = self.nonlinearity;
        if self.learned_positions > 0 {
            cfg.positions = PositionEmbedding::Learned {
                max_len: self.learned_positions,
            };
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub margin: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            margin: t.margin,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub r_values: Vec<usize>,
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_values: DEFAULT_R_VALUES.to_vec(),
            tau: 0.7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn seed_for(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.train.margin,
            epsilon: self.train.epsilon,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            seed: self.seed_for(streams::TRAINING),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        self.corpus.spec(0).validate()?;
        if self.corpus.n_articles < 2 {
            return usage("corpus.n_articles must be at least 2".into());
        }
        if self.corpus.comments_per_article == 0 {
            return usage("corpus.comments_per_article must be positive".into());
        }
        if !(self.corpus.train_fraction > 0.0 && self.corpus.train_fraction <= 1.0) {
            return usage("corpus.train_fraction must lie in (0, 1]".into());
        }
        self.model.encoder().validate()?;
        if self.model.max_article_len == 0 {
            return usage("model.max_article_len must be positive".into());
        }
        if !(self.model.embedding_std > 0.0 && self.model.embedding_std.is_finite()) {
            return usage("model.embedding_std must be positive".into());
        }
        self.train_config().validate()?;
        if self.eval.r_values.is_empty() || self.eval.r_values.contains(&0) {
            return usage("eval.r_values must be a nonempty list of positive integers".into());
        }
        if !(-1.0..=1.0).contains(&self.eval.tau) {
            return usage("eval.tau must lie in [-1, 1]".into());
        }
        Ok(())
    }
}
