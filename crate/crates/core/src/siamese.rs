//! Shared-weight comment/article embedding, triplet loss, batch mining and
//! the training loop.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::alpha_from_raw;
use crate::attention::AlphaRow;
use crate::encoder::{StarEncoder, StarEncoderConfig};
use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::Vocabulary;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A comment and the article it links to, as token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentPair {
    pub comment_tokens: Vec<usize>,
    pub article_tokens: Vec<usize>,
    pub article_id: String,
    pub pair_id: String,
}

impl DocumentPair {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.comment_tokens.is_empty() || self.article_tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        for &id in self.comment_tokens.iter().chain(&self.article_tokens) {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
            }
        }
        Ok(())
    }
}

/// Where the initial word vectors come from.
pub enum EmbeddingInit {
    /// Normal entries with standard deviation `std`, trainable.
    Random { std: f64 },
    /// Rows aligned with the vocabulary, frozen unless `trainable`.
    Pretrained { vectors: Tensor, trainable: bool },
}

/// Reads whitespace-delimited word vectors: a token then `dim` floats per
/// line. Returns the vocabulary (with `<unk>` prepended) and a matching
/// table whose `<unk>` row is zero.
pub fn read_word_vectors<R: BufRead>(reader: R, dim: usize) -> Result<(Vocabulary, Tensor)> {
    let mut tokens = Vec::new();
    let mut rows = vec![vec![0.0; dim]];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("word vectors line {}: {e}", lineno + 1)))?;
        if values.len() != dim {
            return Err(Error::Parse(format!(
                "word vectors line {}: expected {dim} values, got {}",
                lineno + 1,
                values.len()
            )));
        }
        tokens.push(token.to_string());
        rows.push(values);
    }
    let vocab = Vocabulary::from(tokens);
    if vocab.len() != rows.len() {
        return Err(Error::Parse("word vectors contain duplicate tokens".into()));
    }
    Ok((vocab, Tensor::from_rows(&rows)?))
}

/// Hyperparameters recorded with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub margin: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epoch_losses: Vec<f64>,
}

/// Vocabulary, embedding table and encoder weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub vocab: Vocabulary,
    pub embedding: ParamId,
    pub encoder: StarEncoder,
    pub store: ParamStore,
    /// Documents are truncated to this many tokens before encoding.
    pub max_len: usize,
    pub meta: Option<TrainingMeta>,
}

impl TrainedModel {
    pub fn new<R: Rng>(
        vocab: Vocabulary,
        cfg: StarEncoderConfig,
        init: EmbeddingInit,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let dim = cfg.model_dim;
        let mut store = ParamStore::new();
        let (table, trainable) = match init {
            EmbeddingInit::Random { std } => {
                if !(std > 0.0 && std.is_finite()) {
                    return Err(Error::Config(format!("embedding std must be positive, got {std}")));
                }
                let data = (0..vocab.len() * dim)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (Tensor::new(vec![vocab.len(), dim], data)?, true)
            }
            EmbeddingInit::Pretrained { vectors, trainable } => {
                if vectors.shape() != [vocab.len(), dim] {
                    return Err(Error::shape("embedding table", vectors.shape(), &[vocab.len(), dim]));
                }
                (vectors, trainable)
            }
        };
        let embedding = store.add("embedding", table, trainable);
        let encoder = StarEncoder::new(&mut store, cfg, rng)?;
        Ok(Self {
            version: MODEL_FORMAT_VERSION,
            vocab,
            embedding,
            encoder,
            store,
            max_len,
            meta: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.cfg.model_dim
    }

    fn truncated<'a>(&self, tokens: &'a [usize]) -> Result<&'a [usize]> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let vocab = self.vocab.len();
        if let Some(&id) = tokens.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(&tokens[..tokens.len().min(self.max_len)])
    }

    fn lookup(&self, tokens: &[usize]) -> Tensor {
        let table = self.store.value(self.embedding);
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend_from_slice(table.row(t));
        }
        Tensor::new(vec![tokens.len(), d], data).expect("row count matches")
    }

    /// Pooled embedding of one document.
    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let tokens = self.truncated(tokens)?;
        Ok(self.encoder.encode_values(&self.store, &self.lookup(tokens))?.pooled)
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = crate::text::tokenize(text);
        self.embed(&self.vocab.encode(&tokens))
    }

    /// Encodes both sides of a pair with the one shared parameter set.
    pub fn embed_pair(&self, pair: &DocumentPair) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.embed(&pair.comment_tokens)?, self.embed(&pair.article_tokens)?))
    }

    /// Runs one document on `tape`, returning the embedded-token leaf and the
    /// pooled output.
    fn encode_on<'t>(&self, tape: &'t Tape, tokens: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        let tokens = self.truncated(tokens)?;
        let trainable = self.store.get(self.embedding).trainable;
        let leaf = tape.leaf(self.lookup(tokens), trainable);
        let out = self.encoder.encode(tape, &self.store, leaf)?;
        Ok((leaf, out.pooled))
    }

    /// Backpropagates `seed` (the loss gradient w.r.t. the pooled vector)
    /// through one document and adds the result into the gradient buffers.
    fn accumulate_document_grad(&mut self, tokens: &[usize], seed: &[f64]) -> Result<()> {
        let tape = Tape::new();
        let (leaf, pooled) = self.encode_on(&tape, tokens)?;
        tape.backward_with_seed(pooled, Tensor::new(vec![1, seed.len()], seed.to_vec())?)?;
        self.store.accumulate_from(&tape);
        if let Some(g) = tape.grad(leaf) {
            let tokens = self.truncated(tokens)?;
            let d = self.dim();
            let table_grad = self.store.grad_mut(self.embedding);
            for (row, &t) in tokens.iter().enumerate() {
                let dst = &mut table_grad.data_mut()[t * d..(t + 1) * d];
                for (a, b) in dst.iter_mut().zip(g.row(row)) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn report_alphas(&self) -> Vec<AlphaRow> {
        self.encoder.report_alphas(&self.store)
    }

    /// Current α of every head, ring heads first.
    pub fn alphas(&self) -> Vec<f64> {
        [self.encoder.ring.alpha_raw, self.encoder.star.alpha_raw]
            .iter()
            .flat_map(|&id| self.store.value(id).data().iter().map(|&b| alpha_from_raw(b)).collect::<Vec<_>>())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(s)?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.version
            )));
        }
        model.encoder.cfg.validate()?;
        Ok(model)
    }
}

/// Anchor, positive and negative embeddings with a margin.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    pub margin: f64,
}

impl TripletBatch {
    pub fn new(anchors: Tensor, positives: Tensor, negatives: Tensor, margin: f64) -> Result<Self> {
        if anchors.shape() != positives.shape() || anchors.shape() != negatives.shape() || anchors.ndim() != 2 {
            return Err(Error::shape("triplet batch", anchors.shape(), negatives.shape()));
        }
        if !(margin >= 0.0) {
            return Err(Error::invalid("triplet batch", format!("margin must be >= 0, got {margin}")));
        }
        Ok(Self {
            anchors,
            positives,
            negatives,
            margin,
        })
    }

    /// Mean hinge loss.
    pub fn loss(&self) -> f64 {
        let tape = Tape::new();
        let l = triplet_loss(
            tape.constant(self.anchors.clone()),
            tape.constant(self.positives.clone()),
            tape.constant(self.negatives.clone()),
            self.margin,
        )
        .expect("shapes validated at construction");
        l.item()
    }
}

/// Mean over rows of `max(0, ‖a − p‖² − ‖a − n‖² + margin)`.
pub fn triplet_loss<'t>(anchors: Var<'t>, positives: Var<'t>, negatives: Var<'t>, margin: f64) -> Result<Var<'t>> {
    let dp = anchors.sub(positives)?;
    let dn = anchors.sub(negatives)?;
    let dp = dp.mul(dp)?.sum_axis(1, false)?;
    let dn = dn.mul(dn)?.sum_axis(1, false)?;
    dp.sub(dn)?.add_scalar(margin).max_scalar(0.0).mean()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Picks one negative comment for every (anchor article, positive comment)
/// row of a batch.
///
/// Row `i` pairs `anchors[i]` with `positives[i]`; `article_ids[i]` names
/// the article. Candidates are the comments of other articles whose cosine
/// to the anchor exceeds the anchor's weakest positive similarity minus
/// `epsilon`; the most similar candidate wins. An anchor without candidates
/// falls back to its most similar non-matching comment. Ties go to the
/// lower index.
pub fn mine_multisimilarity(
    anchors: &Tensor,
    positives: &Tensor,
    article_ids: &[String],
    epsilon: f64,
) -> Result<Vec<usize>> {
    let n = article_ids.len();
    if anchors.dims2()?.0 != n || positives.dims2()?.0 != n {
        return Err(Error::shape("mine_multisimilarity", anchors.shape(), positives.shape()));
    }
    if article_ids.iter().all(|a| *a == article_ids[0]) {
        return Err(Error::Mining("batch holds a single article, so no negatives exist".into()));
    }
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let anchor = anchors.row(i);
        let min_pos = (0..n)
            .filter(|&j| article_ids[j] == article_ids[i])
            .map(|j| cosine(anchor, positives.row(j)))
            .fold(f64::INFINITY, f64::min);
        let mut best_admissible: Option<(usize, f64)> = None;
        let mut best_any: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| article_ids[j] != article_ids[i]) {
            let s = cosine(anchor, positives.row(j));
            if best_any.map_or(true, |(_, b)| s > b) {
                best_any = Some((j, s));
            }
            if s > min_pos - epsilon && best_admissible.map_or(true, |(_, b)| s > b) {
                best_admissible = Some((j, s));
            }
        }
        let (j, _) = best_admissible.or(best_any).expect("another article exists");
        negatives.push(j);
    }
    Ok(negatives)
}

/// Optimizer and batching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            epsilon: 0.1,
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be a finite value >= 0");
        }
        if self.epsilon.is_nan() {
            return bad("epsilon must not be NaN");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

struct Momentum {
    velocity: HashMap<ParamId, Tensor>,
}

impl Momentum {
    fn step(&mut self, store: &mut ParamStore, lr: f64, mu: f64) {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
        for id in ids {
            let grad = store.get(id).grad().clone();
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(grad.shape()));
            v.scale_assign(mu);
            v.add_assign(&grad);
            let step = v.clone();
            for (w, s) in store.value_mut(id).data_mut().iter_mut().zip(step.data()) {
                *w -= lr * s;
            }
        }
    }
}

/// Loss and pooled-vector gradients for one mined batch.
struct BatchLoss {
    loss: f64,
    article_grads: Vec<Vec<f64>>,
    comment_grads: Vec<Vec<f64>>,
}

fn batch_loss(
    article_vecs: &[Vec<f64>],
    anchor_index: &[usize],
    comment_vecs: &[Vec<f64>],
    article_ids: &[String],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let anchors_t = Tensor::from_rows(&anchor_index.iter().map(|&a| article_vecs[a].clone()).collect::<Vec<_>>())?;
    let positives_t = Tensor::from_rows(comment_vecs)?;
    let negatives = mine_multisimilarity(&anchors_t, &positives_t, article_ids, cfg.epsilon)?;

    let tape = Tape::new();
    let articles = tape.leaf(Tensor::from_rows(article_vecs)?, true);
    let comments = tape.leaf(positives_t, true);
    let loss = triplet_loss(
        articles.gather_rows(anchor_index)?,
        comments,
        comments.gather_rows(&negatives)?,
        cfg.margin,
    )?;
    tape.backward(loss)?;
    let rows = |v: Var<'_>| -> Vec<Vec<f64>> {
        let g = tape.grad(v).expect("leaf requires grad");
        g.rows().map(<[f64]>::to_vec).collect()
    };
    Ok(BatchLoss {
        loss: loss.item(),
        article_grads: rows(articles),
        comment_grads: rows(comments),
    })
}

/// Fills the gradient buffers of `model` with the gradient of the batch's
/// mean triplet loss and returns that loss, or `None` when every pair links
/// to the same article.
///
/// The batch is embedded without a tape, mined and scored on a small loss
/// tape, then every document is re-encoded on its own tape to push the
/// pooled-vector gradient into the parameters. Documents are processed in
/// batch order so the summed gradient is reproducible.
pub fn batch_gradients(model: &mut TrainedModel, batch: &[&DocumentPair], cfg: &TrainConfig) -> Result<Option<f64>> {
    let ids: Vec<String> = batch.iter().map(|p| p.article_id.clone()).collect();
    if ids.iter().all(|a| *a == ids[0]) {
        return Ok(None);
    }
    let mut article_slot: Vec<usize> = Vec::new();
    let mut anchor_index = Vec::with_capacity(batch.len());
    for (i, p) in batch.iter().enumerate() {
        match article_slot.iter().position(|&j| batch[j].article_id == p.article_id) {
            Some(k) => anchor_index.push(k),
            None => {
                article_slot.push(i);
                anchor_index.push(article_slot.len() - 1);
            }
        }
    }
    let article_vecs = article_slot
        .iter()
        .map(|&i| model.embed(&batch[i].article_tokens))
        .collect::<Result<Vec<_>>>()?;
    let comment_vecs = batch
        .iter()
        .map(|p| model.embed(&p.comment_tokens))
        .collect::<Result<Vec<_>>>()?;
    let bl = batch_loss(&article_vecs, &anchor_index, &comment_vecs, &ids, cfg)?;

    model.store.zero_grad();
    for (k, &i) in article_slot.iter().enumerate() {
        model.accumulate_document_grad(&batch[i].article_tokens, &bl.article_grads[k])?;
    }
    for (p, g) in batch.iter().zip(&bl.comment_grads) {
        model.accumulate_document_grad(&p.comment_tokens, g)?;
    }
    Ok(Some(bl.loss))
}

/// Trains `model` in place with momentum gradient descent over shuffled
/// batches and records the run in its metadata.
pub fn train(
    model: &mut TrainedModel,
    pairs: &[DocumentPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    for p in pairs {
        p.validate(model.vocab.len())?;
    }
    let n_articles = {
        let mut ids: Vec<&str> = pairs.iter().map(|p| p.article_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    if n_articles < 2 {
        return Err(Error::Corpus(format!("training needs at least 2 distinct articles, got {n_articles}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Momentum {
        velocity: HashMap::new(),
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DocumentPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            // A trailing batch drawn from one article has no negatives.
            let diverged = |detail: String| Error::Diverged { epoch, detail };
            let loss = match batch_gradients(model, &batch, cfg) {
                Ok(Some(loss)) if loss.is_finite() => loss,
                Ok(Some(loss)) => return Err(diverged(format!("batch loss {loss}"))),
                Ok(None) => continue,
                // A saturated logit pins alpha to the edge of its domain.
                Err(Error::AlphaDomain(a)) => return Err(diverged(format!("a head's alpha reached {a}"))),
                Err(e) => return Err(e),
            };
            opt.step(&mut model.store, cfg.learning_rate, cfg.momentum);
            total += loss;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            batches,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    model.store.zero_grad();
    model.meta = Some(TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        margin: cfg.margin,
        epsilon: cfg.epsilon,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        epoch_losses: history.iter().map(|s| s.mean_loss).collect(),
    });
    Ok(history)
}
