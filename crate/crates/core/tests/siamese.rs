mod common;

use ast_core::encoder::StarEncoderConfig;
use ast_core::numeric::Tensor;
use ast_core::siamese::*;
use ast_core::text::Vocabulary;
use ast_core::Error;
use common::{randn, rng};
use rand::seq::SliceRandom;
use rand::Rng;

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::from((1..n).map(|i| format!("t{i}")).collect::<Vec<_>>())
}

fn small_model(seed: u64) -> TrainedModel {
    let cfg = StarEncoderConfig::with_dims(8, 2, 1, 2);
    TrainedModel::new(vocab(30), cfg, EmbeddingInit::Random { std: 1.0 }, 64, &mut rng(seed)).unwrap()
}

fn toy_pairs(seed: u64, n_articles: usize) -> Vec<DocumentPair> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for a in 0..n_articles {
        let article: Vec<usize> = (0..12).map(|_| r.gen_range(1..30)).collect();
        for c in 0..2 {
            let comment = article.choose_multiple(&mut r, 3).copied().collect();
            out.push(DocumentPair {
                comment_tokens: comment,
                article_tokens: article.clone(),
                article_id: format!("a{a}"),
                pair_id: format!("c{a}_{c}"),
            });
        }
    }
    out
}

#[test]
fn identical_inputs_embed_identically() {
    let m = small_model(1);
    let tokens = vec![3, 4, 5, 6];
    let pair = DocumentPair {
        comment_tokens: tokens.clone(),
        article_tokens: tokens,
        article_id: "a".into(),
        pair_id: "p".into(),
    };
    let (ft, fa) = m.embed_pair(&pair).unwrap();
    assert_eq!(ft, fa);
}

#[test]
fn embeddings_have_fixed_width() {
    let mut m = small_model(2);
    m.max_len = 2000;
    let mut r = rng(2);
    let long: Vec<usize> = (0..1000).map(|_| r.gen_range(0..30)).collect();
    assert_eq!(m.embed(&[7]).unwrap().len(), 8);
    assert_eq!(m.embed(&long).unwrap().len(), 8);
    assert!(matches!(m.embed(&[]), Err(Error::EmptySequence)));
    assert!(matches!(m.embed(&[30]), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn word_order_matters() {
    let m = small_model(3);
    let mut r = rng(3);
    let a: Vec<usize> = (0..20).map(|_| r.gen_range(1..30)).collect();
    let mut b = a.clone();
    b.shuffle(&mut r);
    assert_ne!(m.embed(&a).unwrap(), m.embed(&b).unwrap());
}


#[test]
fn loss_is_nonnegative_and_monotone_in_margin() {
    for seed in 0..50 {
        let mut r = rng(100 + seed);
        let (a, p, n) = (randn(&mut r, &[6, 3]), randn(&mut r, &[6, 3]), randn(&mut r, &[6, 3]));
        let mut prev = 0.0;
        for m in [0.0, 0.1, 0.5, 1.0, 4.0] {
            let l = TripletBatch::new(a.clone(), p.clone(), n.clone(), m).unwrap().loss();
            assert!(l >= 0.0 && l >= prev);
            prev = l;
        }
    }
}

/// The selection rule evaluated candidate by candidate.
fn brute_force_mining(anchors: &Tensor, positives: &Tensor, ids: &[String], eps: f64) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / ((a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt()) + 1e-12)
    };
    (0..ids.len())
        .map(|i| {
            let min_pos = (0..ids.len())
                .filter(|&j| ids[j] == ids[i])
                .map(|j| cos(anchors.row(i), positives.row(j)))
                .fold(f64::INFINITY, f64::min);
            let negs: Vec<usize> = (0..ids.len()).filter(|&j| ids[j] != ids[i]).collect();
            let admissible: Vec<usize> = negs
                .iter()
                .copied()
                .filter(|&j| cos(anchors.row(i), positives.row(j)) > min_pos - eps)
                .collect();
            let pool = if admissible.is_empty() { negs } else { admissible };
            let best = pool
                .iter()
                .map(|&j| cos(anchors.row(i), positives.row(j)))
                .fold(f64::NEG_INFINITY, f64::max);
            *pool.iter().find(|&&j| cos(anchors.row(i), positives.row(j)) == best).unwrap()
        })
        .collect()
}

#[test]
fn mining_matches_brute_force() {
    for seed in 0..30 {
        let mut r = rng(200 + seed);
        let ids: Vec<String> = ["x", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let (a, p) = (randn(&mut r, &[4, 5]), randn(&mut r, &[4, 5]));
        for eps in [0.0, 0.1, 0.5, f64::INFINITY] {
            let got = mine_multisimilarity(&a, &p, &ids, eps).unwrap();
            assert_eq!(got, brute_force_mining(&a, &p, &ids, eps));
            for (i, &j) in got.iter().enumerate() {
                assert_ne!(ids[i], ids[j], "negative shares the anchor's article");
            }
        }
    }
}

#[test]
fn infinite_epsilon_picks_most_similar_negative() {
    let anchors = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let comments = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.2, 1.0], vec![0.9, 1.0]]).unwrap();
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    assert_eq!(mine_multisimilarity(&anchors, &comments, &ids, f64::INFINITY).unwrap(), [2, 2, 1]);
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    let mut m = small_model(4);
    let pairs = toy_pairs(4, 4);
    let batch: Vec<&DocumentPair> = pairs.iter().collect();
    let cfg = TrainConfig {
        margin: 5.0,
        ..Default::default()
    };
    let loss = batch_gradients(&mut m, &batch, &cfg).unwrap().unwrap();
    assert!(loss > 0.0);
    for (_, p) in m.store.iter().filter(|(_, p)| p.trainable) {
        assert!(p.grad().data().iter().all(|g| g.is_finite()), "{}", p.name);
        assert!(p.grad().data().iter().any(|&g| g != 0.0), "{} has zero gradient", p.name);
    }
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let mut m = small_model(5);
    let pairs = toy_pairs(5, 3);
    let batch: Vec<&DocumentPair> = pairs.iter().collect();
    let cfg = TrainConfig {
        margin: 5.0,
        ..Default::default()
    };
    batch_gradients(&mut m, &batch, &cfg).unwrap();
    let alpha = m.encoder.ring.alpha_raw;
    let analytic = m.store.get(alpha).grad().data()[0];
    let h = 1e-5;
    let eval = |delta: f64| {
        let mut mm = m.clone();
        mm.store.value_mut(alpha).data_mut()[0] += delta;
        batch_gradients(&mut mm, &batch, &cfg).unwrap().unwrap()
    };
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    assert!((analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-8), "{analytic} vs {numeric}");
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let pairs = toy_pairs(6, 5);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut m = small_model(6);
        train(&mut m, &pairs, &cfg, |_| {}).unwrap();
        m
    };
    let (a, b) = (run(), run());
    for id in a.store.ids() {
        assert_eq!(a.store.value(id), b.store.value(id));
    }
    let json = a.to_json().unwrap();
    let back = TrainedModel::from_json(&json).unwrap();
    for p in &pairs {
        assert_eq!(a.embed_pair(p).unwrap(), back.embed_pair(p).unwrap());
    }
    assert_eq!(back.meta.as_ref().unwrap().epoch_losses.len(), 2);
}

#[test]
fn single_article_corpus_is_rejected() {
    let mut m = small_model(7);
    let pairs: Vec<DocumentPair> = toy_pairs(7, 1);
    assert!(matches!(train(&mut m, &pairs, &TrainConfig::default(), |_| {}), Err(Error::Corpus(_))));
}

#[test]
fn saturated_alpha_is_reported_as_divergence() {
    let mut m = small_model(8);
    let ring = m.encoder.ring.alpha_raw;
    m.store.value_mut(ring).data_mut()[0] = -1e3;
    let pairs = toy_pairs(8, 4);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    match train(&mut m, &pairs, &cfg, |_| {}) {
        Err(Error::Diverged { epoch: 1, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn word_vectors_load_frozen() {
    let text = "cat 0.1 0.2 0.3 0.4 0.5 0.6 0.7 0.8\ndog 1 2 3 4 5 6 7 8\n";
    let (v, table) = read_word_vectors(text.as_bytes(), 8).unwrap();
    assert_eq!(v.len(), 3);
    assert_eq!(table.row(0), &[0.0; 8]);
    assert_eq!(table.row(v.id("dog"))[7], 8.0);
    let m = TrainedModel::new(
        v,
        StarEncoderConfig::with_dims(8, 2, 1, 1),
        EmbeddingInit::Pretrained {
            vectors: table,
            trainable: false,
        },
        16,
        &mut rng(0),
    )
    .unwrap();
    assert!(!m.store.get(m.embedding).trainable);
    assert!(read_word_vectors("cat 1 2\n".as_bytes(), 8).is_err());
}
