//! Cross-pair scoring, ranking metrics and threshold retrieval.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::siamese::TrainedModel;

/// Thresholds averaged by [`mean_r_precision`] unless told otherwise.
pub const DEFAULT_R_VALUES: [usize; 7] = [50, 100, 200, 500, 1000, 2000, 3000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub comment_id: String,
    pub article_id: String,
    pub score: f64,
    pub relevant: bool,
}

/// Comment/article pairs sorted by descending score, ties broken by
/// `(comment_id, article_id)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RankedRetrieval {
    pairs: Vec<ScoredPair>,
}

impl RankedRetrieval {
    pub fn new(mut pairs: Vec<ScoredPair>) -> Self {
        pairs.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.comment_id.cmp(&b.comment_id))
                .then_with(|| a.article_id.cmp(&b.article_id))
        });
        Self { pairs }
    }

    /// Builds a ranking from bare scores and labels, naming pair `i` by its
    /// zero-padded index.
    pub fn from_scores(scores: &[f64], relevant: &[bool]) -> Self {
        let pairs = scores
            .iter()
            .zip(relevant)
            .enumerate()
            .map(|(i, (&score, &relevant))| ScoredPair {
                comment_id: format!("{i:08}"),
                article_id: String::new(),
                score,
                relevant,
            })
            .collect();
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[ScoredPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_relevant(&self) -> usize {
        self.pairs.iter().filter(|p| p.relevant).count()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Ranks precomputed embeddings against each other.
pub fn rank_embeddings(
    comments: &[(String, Vec<f64>)],
    articles: &[(String, Vec<f64>)],
    gold: &HashSet<(String, String)>,
) -> Result<RankedRetrieval> {
    if comments.is_empty() || articles.is_empty() {
        return Err(Error::invalid("score_all", "need at least one comment and one article"));
    }
    let mut pairs = Vec::with_capacity(comments.len() * articles.len());
    for (cid, cv) in comments {
        for (aid, av) in articles {
            pairs.push(ScoredPair {
                comment_id: cid.clone(),
                article_id: aid.clone(),
                score: cosine(cv, av),
                relevant: gold.contains(&(cid.clone(), aid.clone())),
            });
        }
    }
    Ok(RankedRetrieval::new(pairs))
}

/// Embeds every document of `corpus` once and ranks all cross pairs.
pub fn score_all(model: &TrainedModel, corpus: &Corpus) -> Result<RankedRetrieval> {
    let embed = |recs: &[crate::corpus::CorpusRecord]| -> Result<Vec<(String, Vec<f64>)>> {
        recs.iter().map(|r| Ok((r.id.clone(), model.embed_text(&r.text)?))).collect()
    };
    let gold = corpus
        .gold
        .iter()
        .map(|g| (g.comment_id.clone(), g.article_id.clone()))
        .collect();
    rank_embeddings(&embed(&corpus.comments)?, &embed(&corpus.articles)?, &gold)
}

/// Percentage of relevant pairs among the top `r`.
pub fn r_precision(ranked: &RankedRetrieval, r: usize) -> Result<f64> {
    if r == 0 || r > ranked.len() {
        return Err(Error::invalid(
            "r_precision",
            format!("r = {r} outside 1..={}", ranked.len()),
        ));
    }
    let hits = ranked.pairs[..r].iter().filter(|p| p.relevant).count();
    Ok(100.0 * hits as f64 / r as f64)
}

pub fn mean_r_precision(ranked: &RankedRetrieval, r_values: &[usize]) -> Result<f64> {
    if r_values.is_empty() {
        return Err(Error::invalid("mean_r_precision", "no thresholds given"));
    }
    let mut total = 0.0;
    for &r in r_values {
        total += r_precision(ranked, r)?;
    }
    Ok(total / r_values.len() as f64)
}

fn average_precision<'a>(labels: impl Iterator<Item = &'a ScoredPair>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, p) in labels.enumerate() {
        if p.relevant {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Average precision of the single global ranking, as a percentage.
pub fn mean_average_precision(ranked: &RankedRetrieval) -> Result<f64> {
    average_precision(ranked.pairs.iter())
        .map(|ap| 100.0 * ap)
        .ok_or_else(|| Error::UndefinedMetric("average precision needs a relevant pair".into()))
}

/// Mean over articles of the AP of each article's own comment ranking.
/// Articles without a relevant comment are skipped.
pub fn mean_average_precision_per_article(ranked: &RankedRetrieval) -> Result<f64> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&ScoredPair>> = HashMap::new();
    for p in &ranked.pairs {
        groups
            .entry(p.article_id.as_str())
            .or_insert_with(|| {
                order.push(p.article_id.as_str());
                Vec::new()
            })
            .push(p);
    }
    let aps: Vec<f64> = order
        .iter()
        .filter_map(|a| average_precision(groups[a].iter().copied()))
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no article has a relevant comment".into()));
    }
    Ok(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Area under the ROC curve via mid-ranks, so ties count one half.
pub fn auc_roc(ranked: &RankedRetrieval) -> Result<f64> {
    let n_pos = ranked.n_relevant();
    let n_neg = ranked.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both relevant and irrelevant pairs".into()));
    }
    // Ascending ranks; the ranking is sorted descending, so walk it backwards.
    let scores: Vec<(f64, bool)> = ranked.pairs.iter().rev().map(|p| (p.score, p.relevant)).collect();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scores.len() {
        let mut j = i;
        while j + 1 < scores.len() && scores[j + 1].0 == scores[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * scores[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pairs scoring at least `tau`, with confusion counts against the gold
/// labels.
pub fn retrieve_by_threshold(ranked: &RankedRetrieval, tau: f64) -> Result<(Vec<ScoredPair>, Confusion)> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::invalid("retrieve_by_threshold", format!("tau {tau} outside [-1, 1]")));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    let mut kept = Vec::new();
    for p in &ranked.pairs {
        let hit = p.score >= tau;
        match (hit, p.relevant) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
        if hit {
            kept.push(p.clone());
        }
    }
    Ok((kept, c))
}

/// Every metric for one ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `(r, percentage)` for each threshold that fits in the ranking.
    pub r_precision: Vec<(usize, f64)>,
    pub mrp: f64,
    pub map_global: f64,
    pub map_per_article: f64,
    pub auc_roc: f64,
    pub n_pairs: usize,
    pub n_relevant: usize,
    pub chance: f64,
}

impl MetricsReport {
    /// Thresholds deeper than the ranking are left out of both the table and
    /// the mean.
    pub fn compute(ranked: &RankedRetrieval, r_values: &[usize]) -> Result<Self> {
        let usable: Vec<usize> = r_values.iter().copied().filter(|&r| r >= 1 && r <= ranked.len()).collect();
        let r_precision = usable
            .iter()
            .map(|&r| Ok((r, r_precision(ranked, r)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mrp: mean_r_precision(ranked, &usable)?,
            r_precision,
            map_global: mean_average_precision(ranked)?,
            map_per_article: mean_average_precision_per_article(ranked)?,
            auc_roc: auc_roc(ranked)?,
            n_pairs: ranked.len(),
            n_relevant: ranked.n_relevant(),
            chance: ranked.n_relevant() as f64 / ranked.len() as f64,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (r, v) in &self.r_precision {
            out.push_str(&format!("r_precision@{r},{v}\n"));
        }
        for (name, v) in [
            ("mrp", self.mrp),
            ("map_global", self.map_global),
            ("map_per_article", self.map_per_article),
            ("auc_roc", self.auc_roc),
            ("n_pairs", self.n_pairs as f64),
            ("n_relevant", self.n_relevant as f64),
            ("chance", self.chance),
        ] {
            out.push_str(&format!("{name},{v}\n"));
        }
        out
    }
}
