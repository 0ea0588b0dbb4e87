//! Line-delimited JSON inputs and outputs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use xmc_core::corpus::load_corpus;
use xmc_core::{Corpus, Error, PostRecord, Result};

/// A file when a path is given, standard output otherwise.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = open_output(path)?;
    serde_json::to_writer(&mut w, value).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: Option<&Path>, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = open_output(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), msg: format!("{}: {e}", path.display()) })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: format!("{}: {e}", path.display()) })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads and unit-normalizes a corpus; every command sees the same vectors.
pub fn load_normalized(path: &Path) -> Result<Corpus> {
    xmc_core::corpus::normalize_vectors(load_corpus(path)?)
}

/// Posts by id.
pub fn post_lookup(corpus: &Corpus) -> HashMap<&str, &PostRecord> {
    corpus.posts.iter().map(|p| (p.id.as_str(), p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusItem {
    pub comment_id: String,
    pub text: String,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusLine {
    pub query_id: String,
    pub consensus: Vec<ConsensusItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLine {
    pub post_id: String,
    pub betas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text_betas: Option<Vec<f64>>,
}
