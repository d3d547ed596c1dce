//! Metrics against brute-force oracles written without sorting tricks.

use ast_core::eval::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ranking(rng: &mut ChaCha8Rng) -> (Vec<ScoredPair>, RankedRetrieval) {
    let n = rng.gen_range(2..=50);
    let mut pairs: Vec<ScoredPair> = (0..n)
        .map(|i| ScoredPair {
            comment_id: format!("c{}", i % 7),
            article_id: format!("a{}", i / 7),
            // Coarse scores so ties are common.
            score: (rng.gen_range(-10..=10) as f64) / 10.0,
            relevant: rng.gen_bool(0.3),
        })
        .collect();
    if !pairs.iter().any(|p| p.relevant) {
        pairs[0].relevant = true;
    }
    if pairs.iter().all(|p| p.relevant) {
        pairs[n - 1].relevant = false;
    }
    let ranked = RankedRetrieval::new(pairs.clone());
    (pairs, ranked)
}

/// Position of pair `p` in the ranking, counted from the raw list: how many
/// pairs come strictly before it under the documented order.
fn brute_position(all: &[ScoredPair], p: &ScoredPair) -> usize {
    all.iter()
        .filter(|q| {
            q.score > p.score
                || (q.score == p.score && (q.comment_id.as_str(), q.article_id.as_str()) < (p.comment_id.as_str(), p.article_id.as_str()))
        })
        .count()
}

fn brute_ap(all: &[ScoredPair]) -> f64 {
    let rel: Vec<&ScoredPair> = all.iter().filter(|p| p.relevant).collect();
    let mut total = 0.0;
    for p in &rel {
        let k = brute_position(all, p) + 1;
        let rel_at_k = all.iter().filter(|q| q.relevant && brute_position(all, q) < k).count();
        total += rel_at_k as f64 / k as f64;
    }
    100.0 * total / rel.len() as f64
}

fn brute_auc(all: &[ScoredPair]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in all.iter().filter(|p| p.relevant) {
        for n in all.iter().filter(|n| !n.relevant) {
            den += 1.0;
            num += if p.score > n.score {
                1.0
            } else if p.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}




pub fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let (raw, ranked) = random_ranking(&mut rng);
        for r in 1..=raw.len() {
            let hits = raw.iter().filter(|p| p.relevant && brute_position(&raw, p) < r).count();
            assert!((r_precision(&ranked, r).unwrap() - 100.0 * hits as f64 / r as f64).abs() < 1e-12);
        }
        assert!((mean_average_precision(&ranked).unwrap() - brute_ap(&raw)).abs() < 1e-12);
        assert!((auc_roc(&ranked).unwrap() - brute_auc(&raw)).abs() < 1e-12);

        let mut articles: Vec<&str> = raw.iter().map(|p| p.article_id.as_str()).collect();
        articles.sort_unstable();
        articles.dedup();
        let aps: Vec<f64> = articles
            .iter()
            .map(|a| raw.iter().filter(|p| p.article_id == *a).cloned().collect::<Vec<_>>())
            .filter(|g| g.iter().any(|p| p.relevant))
            .map(|g| brute_ap(&g))
            .collect();
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!((mean_average_precision_per_article(&ranked).unwrap() - want).abs() < 1e-12);
    }
}

pub fn metrics_are_rank_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (raw, ranked) = random_ranking(&mut rng);
        let warped: Vec<ScoredPair> = raw
            .iter()
            .map(|p| ScoredPair {
                score: (3.0 * p.score).tanh() * 0.5 + 0.1,
                ..p.clone()
            })
            .collect();
        let warped = RankedRetrieval::new(warped);
        let r = raw.len().min(5);
        assert_eq!(r_precision(&ranked, r).unwrap(), r_precision(&warped, r).unwrap());
        assert_eq!(mean_average_precision(&ranked).unwrap(), mean_average_precision(&warped).unwrap());
        assert_eq!(
            mean_average_precision_per_article(&ranked).unwrap(),
            mean_average_precision_per_article(&warped).unwrap()
        );
        assert_eq!(auc_roc(&ranked).unwrap(), auc_roc(&warped).unwrap());
    }
}

pub fn threshold_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (raw, ranked) = random_ranking(&mut rng);
        let mut prev = None;
        for step in -10..=10 {
            let tau = step as f64 / 10.0;
            let (kept, c) = retrieve_by_threshold(&ranked, tau).unwrap();
            assert_eq!(c.total(), raw.len());
            assert_eq!(kept.len(), raw.iter().filter(|p| p.score >= tau).count());
            assert_eq!(c.tp, raw.iter().filter(|p| p.score >= tau && p.relevant).count());
            if let Some((fp, fn_)) = prev {
                assert!(c.fp <= fp && c.fn_ >= fn_);
            }
            prev = Some((c.fp, c.fn_));
        }
    }
}
