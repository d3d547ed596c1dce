//! Synthetic article/comment corpora with known gold pairings.
//!
//! Every topic owns a block of content words with Dirichlet weights. Each
//! article draws its own variant of each of its topics, so two articles on
//! the same topic favor different words, and comments sample from one of
//! their article's variants. A Zipf background shared by all documents is
//! mixed into every token stream.

use std::collections::{BTreeMap, HashMap};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::siamese::DocumentPair;
use crate::text::{tokenize, Vocabulary};

/// Independent seed for a named component of a run.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopicModelSpec {
    pub n_topics: usize,
    pub vocab_size: usize,
    pub article_len: (usize, usize),
    pub comment_len: (usize, usize),
    pub topics_per_article: (usize, usize),
    /// Words owned by each topic.
    pub topic_words: usize,
    /// Dirichlet concentration of an article's variant around its topic's
    /// word distribution. Smaller values make articles more distinct.
    pub concentration: f64,
    /// Probability that a token comes from the Zipf background.
    pub background_weight: f64,
    pub seed: u64,
}

impl Default for TopicModelSpec {
    fn default() -> Self {
        Self {
            n_topics: 20,
            vocab_size: 5000,
            article_len: (200, 400),
            comment_len: (8, 20),
            topics_per_article: (1, 3),
            topic_words: 200,
            concentration: 20.0,
            background_weight: 0.3,
            seed: 0,
        }
    }
}

impl TopicModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_topics == 0 {
            return bad("n_topics must be positive".into());
        }
        if self.topic_words == 0 || self.topic_words > self.vocab_size {
            return bad(format!("topic_words must lie in 1..={}", self.vocab_size));
        }
        for (name, (lo, hi)) in [("article_len", self.article_len), ("comment_len", self.comment_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must satisfy 1 <= min <= max, got ({lo}, {hi})"));
            }
        }
        if self.comment_len.1 >= self.article_len.0 {
            return bad(format!(
                "comments must be shorter than articles: comment max {} >= article min {}",
                self.comment_len.1, self.article_len.0
            ));
        }
        let (tlo, thi) = self.topics_per_article;
        if tlo == 0 || tlo > thi || thi > 3 || thi > self.n_topics {
            return bad(format!("topics_per_article ({tlo}, {thi}) must lie within 1..=min(3, n_topics)"));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad("concentration must be positive".into());
        }
        if !(0.0..1.0).contains(&self.background_weight) {
            return bad("background_weight must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn word(index: usize) -> String {
        format!("w{index:04}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Comment,
    Article,
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    /// The linked article for comments, the record's own id for articles.
    pub article_id: String,
    pub kind: RecordKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldPair {
    pub comment_id: String,
    pub article_id: String,
}

/// Articles, comments and the gold comment-to-article links.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub articles: Vec<CorpusRecord>,
    pub comments: Vec<CorpusRecord>,
    pub gold: Vec<GoldPair>,
}

impl Corpus {
    /// Splits records by kind and checks ids and links.
    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self> {
        let mut articles = Vec::new();
        let mut comments = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for r in records {
            if !seen.insert(r.id.clone()) {
                return Err(Error::Corpus(format!("duplicate record id {:?}", r.id)));
            }
            match r.kind {
                RecordKind::Article => {
                    if r.article_id != r.id {
                        return Err(Error::Corpus(format!("article {:?} must link to itself", r.id)));
                    }
                    articles.push(r);
                }
                RecordKind::Comment => comments.push(r),
            }
        }
        let article_ids: std::collections::HashSet<&str> = articles.iter().map(|a| a.id.as_str()).collect();
        for c in &comments {
            if !article_ids.contains(c.article_id.as_str()) {
                return Err(Error::Corpus(format!(
                    "comment {:?} links to unknown article {:?}",
                    c.id, c.article_id
                )));
            }
        }
        let gold = comments
            .iter()
            .map(|c| GoldPair {
                comment_id: c.id.clone(),
                article_id: c.article_id.clone(),
            })
            .collect();
        Ok(Self { articles, comments, gold })
    }

    pub fn records(&self) -> impl Iterator<Item = &CorpusRecord> {
        self.articles.iter().chain(&self.comments)
    }

    /// Vocabulary over every token of the corpus.
    pub fn vocabulary(&self) -> Vocabulary {
        let docs: Vec<Vec<String>> = self.records().map(|r| tokenize(&r.text)).collect();
        Vocabulary::build(docs.iter())
    }

    /// One training pair per comment.
    pub fn pairs(&self, vocab: &Vocabulary) -> Vec<DocumentPair> {
        let articles: HashMap<&str, Vec<usize>> = self
            .articles
            .iter()
            .map(|a| (a.id.as_str(), vocab.encode(&tokenize(&a.text))))
            .collect();
        self.comments
            .iter()
            .map(|c| DocumentPair {
                comment_tokens: vocab.encode(&tokenize(&c.text)),
                article_tokens: articles[c.article_id.as_str()].clone(),
                article_id: c.article_id.clone(),
                pair_id: c.id.clone(),
            })
            .collect()
    }

    /// Partitions by article: a seeded shuffle sends `train_fraction` of the
    /// articles, with all their comments, to the first corpus.
    pub fn split_by_article(&self, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut ids: Vec<&str> = self.articles.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (ids.len() as f64 * train_fraction).round() as usize;
        let train_ids: std::collections::HashSet<&str> = ids[..n_train].iter().copied().collect();
        let pick = |train: bool| -> Result<Corpus> {
            let records = self
                .records()
                .filter(|r| train_ids.contains(r.article_id.as_str()) == train)
                .cloned()
                .collect();
            Corpus::from_records(records)
        };
        Ok((pick(true)?, pick(false)?))
    }
}

/// Expected precision of a uniformly random ranking.
pub fn chance_baseline(corpus: &Corpus) -> f64 {
    let cross = corpus.comments.len() * corpus.articles.len();
    if cross == 0 {
        return 0.0;
    }
    corpus.gold.len() as f64 / cross as f64
}

/// Fraction of comments whose bag-of-words cosine to their own article beats
/// the cosine to one randomly drawn other article.
pub fn bag_of_words_signal(corpus: &Corpus, seed: u64) -> f64 {
    let bow = |text: &str| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for t in tokenize(text) {
            *m.entry(t).or_insert(0.0) += 1.0;
        }
        m
    };
    let cos = |a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>| -> f64 {
        let dot: f64 = a.iter().filter_map(|(k, v)| b.get(k).map(|w| v * w)).sum();
        let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb).max(f64::MIN_POSITIVE)
    };
    if corpus.comments.is_empty() || corpus.articles.len() < 2 {
        return 0.0;
    }
    let articles: Vec<BTreeMap<String, f64>> = corpus.articles.iter().map(|a| bow(&a.text)).collect();
    let index: HashMap<&str, usize> = corpus.articles.iter().enumerate().map(|(i, a)| (a.id.as_str(), i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for c in &corpus.comments {
        let own = index[c.article_id.as_str()];
        let other = loop {
            let j = rng.gen_range(0..articles.len());
            if j != own {
                break j;
            }
        };
        let cb = bow(&c.text);
        if cos(&cb, &articles[own]) > cos(&cb, &articles[other]) {
            wins += 1;
        }
    }
    wins as f64 / corpus.comments.len() as f64
}

/// Minimum [`bag_of_words_signal`] a generated corpus must reach.
pub const MIN_BOW_SIGNAL: f64 = 0.8;

fn dirichlet<R: Rng>(rng: &mut R, shape: &[f64]) -> Vec<f64> {
    let mut draws: Vec<f64> = shape
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // Every gamma draw underflowed; fall back to the mean.
        let s: f64 = shape.iter().sum();
        draws = shape.iter().map(|a| a / s).collect();
    }
    draws
}

struct TopicVariant {
    words: Vec<usize>,
    sampler: WeightedIndex<f64>,
}

/// Generates `n_articles` articles with `comments_per_article` comments each.
///
/// Fails if the corpus does not carry enough lexical signal to be learnable
/// (see [`MIN_BOW_SIGNAL`]).
pub fn generate(spec: &TopicModelSpec, n_articles: usize, comments_per_article: usize) -> Result<Corpus> {
    spec.validate()?;
    if n_articles < 2 {
        return Err(Error::Config(format!("need at least 2 articles, got {n_articles}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));

    let zipf: Vec<f64> = (0..spec.vocab_size).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let background = WeightedIndex::new(&zipf).expect("positive weights");
    let topics: Vec<(Vec<usize>, Vec<f64>)> = (0..spec.n_topics)
        .map(|_| {
            let words = sample(&mut rng, spec.vocab_size, spec.topic_words).into_vec();
            let weights = dirichlet(&mut rng, &vec![1.0; spec.topic_words]);
            (words, weights)
        })
        .collect();

    let mut articles = Vec::with_capacity(n_articles);
    let mut comments = Vec::with_capacity(n_articles * comments_per_article);
    for a in 0..n_articles {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1 + a as u64));
        let k = rng.gen_range(spec.topics_per_article.0..=spec.topics_per_article.1);
        let chosen = sample(&mut rng, spec.n_topics, k).into_vec();
        let variants: Vec<TopicVariant> = chosen
            .iter()
            .map(|&t| {
                let (words, base) = &topics[t];
                let shape: Vec<f64> = base.iter().map(|w| (spec.concentration * w).max(1e-3)).collect();
                let weights = dirichlet(&mut rng, &shape);
                TopicVariant {
                    words: words.clone(),
                    sampler: WeightedIndex::new(&weights).expect("normalized weights"),
                }
            })
            .collect();
        let mixture = WeightedIndex::new(dirichlet(&mut rng, &vec![1.0; k])).expect("normalized weights");

        let draw = |rng: &mut ChaCha8Rng, variant: Option<usize>| -> String {
            if rng.gen::<f64>() < spec.background_weight {
                return TopicModelSpec::word(background.sample(rng));
            }
            let v = &variants[variant.unwrap_or_else(|| mixture.sample(rng))];
            TopicModelSpec::word(v.words[v.sampler.sample(rng)])
        };

        let article_id = format!("a{a:04}");
        let len = rng.gen_range(spec.article_len.0..=spec.article_len.1);
        let text: Vec<String> = (0..len).map(|_| draw(&mut rng, None)).collect();
        articles.push(CorpusRecord {
            id: article_id.clone(),
            text: text.join(" "),
            article_id: article_id.clone(),
            kind: RecordKind::Article,
        });
        for c in 0..comments_per_article {
            let topic = rng.gen_range(0..k);
            let len = rng.gen_range(spec.comment_len.0..=spec.comment_len.1);
            let text: Vec<String> = (0..len).map(|_| draw(&mut rng, Some(topic))).collect();
            comments.push(CorpusRecord {
                id: format!("c{a:04}_{c}"),
                text: text.join(" "),
                article_id: article_id.clone(),
                kind: RecordKind::Comment,
            });
        }
    }
    let mut records = articles;
    records.extend(comments);
    let corpus = Corpus::from_records(records)?;
    if !corpus.comments.is_empty() {
        let signal = bag_of_words_signal(&corpus, derive_seed(spec.seed, u64::MAX));
        if signal < MIN_BOW_SIGNAL {
            return Err(Error::Corpus(format!(
                "bag-of-words signal {signal:.3} is below {MIN_BOW_SIGNAL}; raise the topic sharpness"
            )));
        }
    }
    Ok(corpus)
}
