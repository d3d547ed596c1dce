//! Subcommand definitions and their execution.
//!
//! A [`Command`] is both the clap parse target and the record stored in a
//! run manifest, so [`execute`] can replay it with the recorded
//! configuration.

use std::path::{Path, PathBuf};

use ast_core::activations::{uniformity_curve, verify_expsum_expectation, Activation, UNIFORMITY_DIM};
use ast_core::corpus::{chance_baseline, generate, Corpus};
use ast_core::encoder::measure_scaling;
use ast_core::eval::{retrieve_by_threshold, score_all, MetricsReport, RankedRetrieval};
use ast_core::siamese::{read_word_vectors, train, EmbeddingInit, TrainedModel};
use ast_core::text::{tokenize, Vocabulary};
use clap::{Args, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{streams, RunConfig};
use crate::error::{CliError, CliResult};
use crate::files;
use crate::manifest::Manifest;

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct Common {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Generate a synthetic corpus and its gold pairs.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the training split of a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Write the pooled embedding of every document.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Score every comment/article pair by cosine similarity.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Compute ranking metrics from a score table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Keep pairs scoring at least tau and count the confusion matrix.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        /// Defaults to the configured threshold.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Export the learned alpha of every head.
    Alphas {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Attention-weight uniformity versus sequence length.
    FigureUniformity {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,5,10,25,50,100")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = UNIFORMITY_DIM)]
        dim: usize,
    },
    /// Monte Carlo check of the expected exponential sum.
    VerifyAppendix {
        #[command(flatten)]
        common: Common,
        #[arg(long = "S", value_delimiter = ',', default_value = "5,25,100")]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Forward-pass timing of the encoder against full attention.
    BenchScaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Generate, train, embed, score, evaluate and retrieve in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the command recorded in a manifest into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
    },
}

impl Command {
    pub fn common(&self) -> Option<&Common> {
        match self {
            Command::Generate { common }
            | Command::Train { common, .. }
            | Command::Embed { common, .. }
            | Command::Score { common, .. }
            | Command::Eval { common, .. }
            | Command::Retrieve { common, .. }
            | Command::Alphas { common, .. }
            | Command::FigureUniformity { common, .. }
            | Command::VerifyAppendix { common, .. }
            | Command::BenchScaling { common, .. }
            | Command::Pipeline { common } => Some(common),
            Command::Replay { .. } => None,
        }
    }
}

/// Resolves the configuration, runs the command and writes its manifest.
/// Returns the manifest path.
pub fn run(cmd: &Command) -> CliResult<PathBuf> {
    let (cmd, cfg, out) = match cmd {
        Command::Replay { manifest, out } => {
            let m = Manifest::read(manifest)?;
            (m.command, m.config, out.clone())
        }
        other => {
            let common = other.common().expect("non-replay commands carry common flags");
            let mut cfg = match &common.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            (other.clone(), cfg, common.out.clone())
        }
    };
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let outputs = execute(&cmd, &cfg, &out)?;
    Manifest::new(cmd, cfg, &out, &outputs)?.write(&out)
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn select(corpus: &Corpus, cfg: &RunConfig, split: Split) -> CliResult<Corpus> {
    if split == Split::All {
        return Ok(corpus.clone());
    }
    let (train, test) = corpus.split_by_article(cfg.corpus.train_fraction, cfg.seed_for(streams::SPLIT))?;
    let picked = if split == Split::Train { train } else { test };
    if picked.articles.is_empty() {
        return Err(CliError::Usage(format!(
            "the {split:?} split is empty; lower corpus.train_fraction"
        )));
    }
    Ok(picked)
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    require(path)?;
    let text = std::fs::read_to_string(path)?;
    Ok(TrainedModel::from_json(&text)?)
}

fn generate_corpus(cfg: &RunConfig) -> CliResult<Corpus> {
    let spec = cfg.corpus.spec(cfg.seed_for(streams::CORPUS));
    Ok(generate(&spec, cfg.corpus.n_articles, cfg.corpus.comments_per_article)?)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    mean_loss: f64,
    batches: usize,
}

fn train_model(cfg: &RunConfig, corpus: &Corpus, out: &Path) -> CliResult<Vec<PathBuf>> {
    let train_split = select(corpus, cfg, Split::Train)?;
    let mc = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(streams::MODEL_INIT));
    let mut model = match &mc.word_vectors {
        Some(path) => {
            let (vocab, vectors) = read_word_vectors(files::open(path)?, mc.model_dim)?;
            let init = EmbeddingInit::Pretrained {
                vectors,
                trainable: mc.train_embeddings.unwrap_or(false),
            };
            TrainedModel::new(vocab, mc.encoder(), init, mc.max_article_len, &mut rng)?
        }
        None => {
            let docs: Vec<Vec<String>> = train_split.records().map(|r| tokenize(&r.text)).collect();
            let vocab = Vocabulary::build(docs.iter());
            let init = EmbeddingInit::Random { std: mc.embedding_std };
            let mut m = TrainedModel::new(vocab, mc.encoder(), init, mc.max_article_len, &mut rng)?;
            if let Some(t) = mc.train_embeddings {
                m.store.set_trainable(m.embedding, t);
            }
            m
        }
    };
    let pairs = train_split.pairs(&model.vocab);
    let epochs = cfg.train.epochs;
    let history = train(&mut model, &pairs, &cfg.train_config(), |s| {
        eprintln!("epoch {}/{epochs} mean loss {:.6}", s.epoch, s.mean_loss);
    })?;
    let model_path = out.join("model.json");
    std::fs::write(&model_path, model.to_json()?)?;
    let loss_path = out.join("losses.csv");
    let rows: Vec<LossRow> = history
        .iter()
        .map(|s| LossRow {
            epoch: s.epoch,
            mean_loss: s.mean_loss,
            batches: s.batches,
        })
        .collect();
    files::write_csv(&loss_path, &rows)?;
    Ok(vec![model_path, loss_path])
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    id: &'a str,
    kind: &'a str,
    vector: Vec<f64>,
}

fn embed_corpus(model: &TrainedModel, corpus: &Corpus, path: &Path) -> CliResult<()> {
    use std::io::Write;
    let mut w = files::create(path)?;
    for r in corpus.records() {
        let row = EmbeddingRow {
            id: &r.id,
            kind: match r.kind {
                ast_core::corpus::RecordKind::Article => "article",
                ast_core::corpus::RecordKind::Comment => "comment",
            },
            vector: model.embed_text(&r.text)?,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn eval_scores(cfg: &RunConfig, ranked: &RankedRetrieval, out: &Path) -> CliResult<Vec<PathBuf>> {
    let report = MetricsReport::compute(ranked, &cfg.eval.r_values)?;
    let json = out.join("metrics.json");
    files::write_json(&json, &report)?;
    let csv = out.join("metrics.csv");
    std::fs::write(&csv, report.to_csv())?;
    Ok(vec![json, csv])
}

fn retrieve(ranked: &RankedRetrieval, tau: f64, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (kept, confusion) = retrieve_by_threshold(ranked, tau)?;
    let pairs = out.join("retrieved.csv");
    files::write_pairs(&pairs, &kept)?;
    let counts = out.join("confusion.json");
    files::write_json(
        &counts,
        &serde_json::json!({
            "tau": tau,
            "tp": confusion.tp,
            "fp": confusion.fp,
            "fn": confusion.fn_,
            "tn": confusion.tn,
            "total": confusion.total(),
        }),
    )?;
    Ok(vec![pairs, counts])
}

#[derive(Serialize)]
struct AlphaCsvRow {
    head_index: usize,
    role: &'static str,
    alpha: f64,
}

fn write_alphas(model: &TrainedModel, out: &Path) -> CliResult<Vec<PathBuf>> {
    let rows: Vec<AlphaCsvRow> = model
        .report_alphas()
        .into_iter()
        .map(|r| AlphaCsvRow {
            head_index: r.head_index,
            role: r.role.as_str(),
            alpha: r.alpha,
        })
        .collect();
    let path = out.join("alphas.csv");
    files::write_csv(&path, &rows)?;
    Ok(vec![path])
}

#[derive(Serialize)]
struct PanelRow {
    seq_len: usize,
    softmax: f64,
    sparsemax: f64,
    entmax15: f64,
}

fn figure_uniformity(cfg: &RunConfig, lengths: &[usize], seeds: u64, dim: usize, out: &Path) -> CliResult<Vec<PathBuf>> {
    if lengths.iter().any(|&s| s < 2) {
        return Err(CliError::Usage("uniformity lengths must be at least 2".into()));
    }
    let first = cfg.seed_for(streams::UNIFORMITY);
    let acts = [Activation::Softmax, Activation::Sparsemax, Activation::Entmax { alpha: 1.5 }];
    let curves = acts
        .iter()
        .map(|&a| uniformity_curve(lengths, dim, seeds, first, a))
        .collect::<ast_core::Result<Vec<_>>>()?;
    let long = out.join("uniformity.csv");
    files::write_csv(&long, &curves.concat())?;
    let panel = |f: fn(&ast_core::activations::UniformityPoint) -> f64| -> Vec<PanelRow> {
        (0..lengths.len())
            .map(|i| PanelRow {
                seq_len: lengths[i],
                softmax: f(&curves[0][i]),
                sparsemax: f(&curves[1][i]),
                entmax15: f(&curves[2][i]),
            })
            .collect()
    };
    let max_weight = out.join("uniformity_max_weight.csv");
    files::write_csv(&max_weight, &panel(|p| p.mean_max_weight))?;
    let entropy = out.join("uniformity_entropy.csv");
    files::write_csv(&entropy, &panel(|p| p.mean_normalized_entropy))?;
    Ok(vec![long, max_weight, entropy])
}

#[derive(Serialize)]
struct AppendixRow {
    seq_len: usize,
    samples: usize,
    estimate: f64,
    analytic: f64,
    ratio: f64,
}

fn verify_appendix(cfg: &RunConfig, seq_lens: &[usize], samples: usize, out: &Path) -> CliResult<Vec<PathBuf>> {
    if seq_lens.is_empty() || seq_lens.contains(&0) || samples == 0 {
        return Err(CliError::Usage("--S values and --samples must be positive".into()));
    }
    let mut rows = Vec::new();
    for (i, &s) in seq_lens.iter().enumerate() {
        let e = verify_expsum_expectation(s, samples, cfg.seed_for(streams::APPENDIX) + i as u64)?;
        println!(
            "S={s} analytic={:.3} estimate={:.3} ratio={:.5}",
            e.analytic,
            e.estimate,
            e.ratio()
        );
        rows.push(AppendixRow {
            seq_len: s,
            samples,
            estimate: e.estimate,
            analytic: e.analytic,
            ratio: e.ratio(),
        });
    }
    let path = out.join("appendix.csv");
    files::write_csv(&path, &rows)?;
    Ok(vec![path])
}

fn bench_scaling(cfg: &RunConfig, lengths: &[usize], repeats: usize, out: &Path) -> CliResult<Vec<PathBuf>> {
    let rows = measure_scaling(lengths, &cfg.model.encoder(), repeats, cfg.seed_for(streams::SCALING))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    for r in &rows {
        println!("S={} star_ms={:.3} full_ms={:.3}", r.seq_len, r.median_ms_star, r.median_ms_full);
    }
    let path = out.join("scaling.csv");
    files::write_csv(&path, &rows)?;
    Ok(vec![path])
}

/// Runs `cmd` with `cfg`, writing into `out`; returns the files written.
pub fn execute(cmd: &Command, cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    match cmd {
        Command::Generate { .. } => {
            let corpus = generate_corpus(cfg)?;
            let c = out.join("corpus.jsonl");
            files::write_corpus(&c, &corpus)?;
            let g = out.join("gold.csv");
            files::write_gold(&g, &corpus)?;
            eprintln!(
                "{} articles, {} comments, chance precision {:.4}",
                corpus.articles.len(),
                corpus.comments.len(),
                chance_baseline(&corpus)
            );
            Ok(vec![c, g])
        }
        Command::Train { corpus, .. } => {
            require(corpus)?;
            train_model(cfg, &files::read_corpus(corpus)?, out)
        }
        Command::Embed { model, corpus, split, .. } => {
            require(corpus)?;
            let model = load_model(model)?;
            let corpus = select(&files::read_corpus(corpus)?, cfg, *split)?;
            let path = out.join("embeddings.jsonl");
            embed_corpus(&model, &corpus, &path)?;
            Ok(vec![path])
        }
        Command::Score { model, corpus, split, .. } => {
            require(corpus)?;
            let model = load_model(model)?;
            let corpus = select(&files::read_corpus(corpus)?, cfg, *split)?;
            let path = out.join("scores.csv");
            files::write_scores(&path, &score_all(&model, &corpus)?)?;
            Ok(vec![path])
        }
        Command::Eval { scores, .. } => {
            require(scores)?;
            eval_scores(cfg, &files::read_scores(scores)?, out)
        }
        Command::Retrieve { scores, tau, .. } => {
            require(scores)?;
            let tau = tau.unwrap_or(cfg.eval.tau);
            if !(-1.0..=1.0).contains(&tau) {
                return Err(CliError::Usage(format!("--tau {tau} outside [-1, 1]")));
            }
            retrieve(&files::read_scores(scores)?, tau, out)
        }
        Command::Alphas { model, .. } => write_alphas(&load_model(model)?, out),
        Command::FigureUniformity { lengths, seeds, dim, .. } => figure_uniformity(cfg, lengths, *seeds, *dim, out),
        Command::VerifyAppendix { seq_lens, samples, .. } => verify_appendix(cfg, seq_lens, *samples, out),
        Command::BenchScaling { lengths, repeats, .. } => bench_scaling(cfg, lengths, *repeats, out),
        Command::Pipeline { .. } => {
            let corpus = generate_corpus(cfg)?;
            let mut written = Vec::new();
            let c = out.join("corpus.jsonl");
            files::write_corpus(&c, &corpus)?;
            let g = out.join("gold.csv");
            files::write_gold(&g, &corpus)?;
            written.extend([c, g]);
            written.extend(train_model(cfg, &corpus, out)?);
            let model = TrainedModel::from_json(&std::fs::read_to_string(out.join("model.json"))?)?;
            let test = select(&corpus, cfg, Split::Test)?;
            let e = out.join("embeddings.jsonl");
            embed_corpus(&model, &test, &e)?;
            written.push(e);
            let ranked = score_all(&model, &test)?;
            let s = out.join("scores.csv");
            files::write_scores(&s, &ranked)?;
            written.push(s);
            written.extend(eval_scores(cfg, &ranked, out)?);
            written.extend(retrieve(&ranked, cfg.eval.tau, out)?);
            written.extend(write_alphas(&model, out)?);
            Ok(written)
        }
        Command::Replay { .. } => Err(CliError::Usage("a manifest cannot record a replay".into())),
    }
}
