//! On-disk formats: JSONL corpora, CSV gold pairs and score tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ast_core::corpus::{Corpus, CorpusRecord};
use ast_core::eval::{RankedRetrieval, ScoredPair};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> CliResult<()> {
    let mut w = create(path)?;
    for r in corpus.records() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> CliResult<Corpus> {
    let mut records = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    Ok(Corpus::from_records(records)?)
}

#[derive(Serialize, Deserialize)]
struct GoldRow {
    comment_id: String,
    article_id: String,
}

pub fn write_gold(path: &Path, corpus: &Corpus) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for g in &corpus.gold {
        w.serialize(GoldRow {
            comment_id: g.comment_id.clone(),
            article_id: g.article_id.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores(path: &Path, ranked: &RankedRetrieval) -> CliResult<()> {
    write_pairs(path, ranked.pairs())
}

pub fn write_pairs(path: &Path, pairs: &[ScoredPair]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for p in pairs {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> CliResult<RankedRetrieval> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let pairs = r.deserialize().collect::<Result<Vec<ScoredPair>, _>>()?;
    Ok(RankedRetrieval::new(pairs))
}

/// Writes rows of any serializable record type as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ast_core::corpus::{generate, TopicModelSpec};

    #[test]
    fn corpus_and_scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&TopicModelSpec::default(), 3, 2).unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);

        let ranked = RankedRetrieval::from_scores(&[0.25, -0.5, 0.1], &[true, false, false]);
        let path = dir.path().join("s.csv");
        write_scores(&path, &ranked).unwrap();
        assert_eq!(read_scores(&path).unwrap(), ranked);
    }

    #[test]
    fn dangling_comment_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, r#"{"id":"c1","text":"hi","article_id":"a9","kind":"comment"}"#).unwrap();
        assert!(read_corpus(&path).is_err());
    }
}
