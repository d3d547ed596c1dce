mod common;

use ast_core::corpus::{chance_baseline, generate, TopicModelSpec};
use ast_core::eval::*;
use common::metric_checks as checks;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force() {
    checks::metrics_match_brute_force();
}

#[test]
fn metrics_are_rank_invariant() {
    checks::metrics_are_rank_invariant();
}

#[test]
fn threshold_is_monotone() {
    checks::threshold_is_monotone();
}

#[test]
fn simple_fixtures() {
    let perfect = RankedRetrieval::from_scores(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]);
    assert_eq!(r_precision(&perfect, 2).unwrap(), 100.0);
    assert_eq!(mean_average_precision(&perfect).unwrap(), 100.0);
    assert_eq!(auc_roc(&perfect).unwrap(), 1.0);
    assert_eq!(r_precision(&perfect, 4).unwrap(), 50.0);
    let two = RankedRetrieval::from_scores(&[0.9, 0.8, 0.1, 0.0], &[true, false, true, false]);
    assert_eq!(mean_r_precision(&perfect, &[2, 2]).unwrap(), 100.0);
    assert_eq!(mean_r_precision(&two, &[1, 2]).unwrap(), 75.0);
}

#[test]
fn chance_baseline_matches_random_rankings() {
    let corpus = generate(&TopicModelSpec::default(), 50, 2).unwrap();
    let analytic = chance_baseline(&corpus);
    let gold: std::collections::HashSet<(String, String)> =
        corpus.gold.iter().map(|g| (g.comment_id.clone(), g.article_id.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = 100;
    let runs = 100;
    let mut mean = 0.0;
    for _ in 0..runs {
        let mut pairs = Vec::new();
        for c in &corpus.comments {
            for a in &corpus.articles {
                pairs.push(ScoredPair {
                    comment_id: c.id.clone(),
                    article_id: a.id.clone(),
                    score: rng.gen(),
                    relevant: gold.contains(&(c.id.clone(), a.id.clone())),
                });
            }
        }
        mean += r_precision(&RankedRetrieval::new(pairs), r).unwrap() / 100.0;
    }
    mean /= runs as f64;
    let sigma = (analytic * (1.0 - analytic) / (r * runs) as f64).sqrt();
    assert!((mean - analytic).abs() < 3.0 * sigma, "mean {mean} vs analytic {analytic} (sigma {sigma})");
}
