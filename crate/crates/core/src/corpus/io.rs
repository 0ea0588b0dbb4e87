//! Line-delimited corpus files.
//!
//! The first line is a header `{"dims":[d_I,d_T],"classes":C}`; every other
//! non-blank line is one post. A vector field is either an inline array or,
//! when the header names a sidecar matrix for that modality, an integer row
//! index into it. Comment vectors resolve against the text sidecar.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sidecar::EmbeddingMatrix;
use super::{CommentRecord, Corpus, Dims, PostRecord, Split};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 2],
    classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_sidecar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_sidecar: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum VecField {
    Inline(Vec<f32>),
    Row(usize),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommentLine {
    id: String,
    text: String,
    vec: VecField,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostLine {
    id: String,
    text: String,
    image_vec: VecField,
    text_vec: VecField,
    comments: Vec<CommentLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    split: Split,
}

fn resolve(field: VecField, sidecar: Option<&EmbeddingMatrix>, line: usize, what: &str) -> Result<Vec<f32>> {
    match field {
        VecField::Inline(v) => Ok(v),
        VecField::Row(i) => {
            let m = sidecar.ok_or_else(|| Error::Parse {
                line,
                msg: format!("{what} references row {i} but the header names no sidecar"),
            })?;
            m.row(i).map(<[f32]>::to_vec).ok_or_else(|| Error::Parse {
                line,
                msg: format!("{what} references row {i} beyond sidecar size {}", m.rows()),
            })
        }
    }
}

fn load_sidecar(base: &Path, name: Option<&str>, dim: usize) -> Result<Option<EmbeddingMatrix>> {
    let Some(name) = name else { return Ok(None) };
    let m = EmbeddingMatrix::load(&base.join(name))?;
    if m.dim != dim {
        return Err(Error::Schema(format!("sidecar {name} has dim {} but header says {dim}", m.dim)));
    }
    Ok(Some(m))
}

/// Reads and validates a corpus file. Vectors are returned as stored.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::Parse { line: 1, msg: "missing header record".into() }),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { line: i + 1, msg: format!("bad header: {e}") })?;
            }
        }
    };
    let dims = Dims { image: header.dims[0], text: header.dims[1] };
    if header.classes == 0 {
        return Err(Error::Schema("header declares zero classes".into()));
    }
    let image_side = load_sidecar(&base, header.image_sidecar.as_deref(), dims.image)?;
    let text_side = load_sidecar(&base, header.text_sidecar.as_deref(), dims.text)?;

    let mut corpus = Corpus { posts: Vec::new(), dims, class_count: header.classes };
    if dims.image == 0 || dims.text == 0 {
        return Err(Error::Schema("embedding dimensions must be positive".into()));
    }
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PostLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let comments = rec
            .comments
            .into_iter()
            .map(|c| {
                Ok(CommentRecord {
                    vec: resolve(c.vec, text_side.as_ref(), line_no, "comment vec")?,
                    id: c.id,
                    text: c.text,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let post = PostRecord {
            image_vec: resolve(rec.image_vec, image_side.as_ref(), line_no, "image_vec")?,
            text_vec: resolve(rec.text_vec, text_side.as_ref(), line_no, "text_vec")?,
            id: rec.id,
            text: rec.text,
            comments,
            label: rec.label,
            split: rec.split,
        };
        let at_line = |e: Error| match e {
            Error::Schema(m) => Error::Schema(format!("line {line_no}: {m}")),
            Error::Data(m) => Error::Data(format!("line {line_no}: {m}")),
            other => other,
        };
        if !seen.insert(post.id.clone()) {
            return Err(at_line(Error::Schema(format!("duplicate post id {:?}", post.id))));
        }
        corpus.validate_post(&post).map_err(at_line)?;
        corpus.posts.push(post);
    }
    Ok(corpus)
}

fn write_header(w: &mut impl Write, header: &Header) -> Result<()> {
    serde_json::to_writer(&mut *w, header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_posts(
    w: &mut impl Write,
    corpus: &Corpus,
    mut image: impl FnMut(&[f32]) -> VecField,
    mut text: impl FnMut(&[f32]) -> VecField,
) -> Result<()> {
    for p in &corpus.posts {
        let line = PostLine {
            id: p.id.clone(),
            text: p.text.clone(),
            image_vec: image(&p.image_vec),
            text_vec: text(&p.text_vec),
            comments: p
                .comments
                .iter()
                .map(|c| CommentLine { id: c.id.clone(), text: c.text.clone(), vec: text(&c.vec) })
                .collect(),
            label: p.label,
            split: p.split,
        };
        serde_json::to_writer(&mut *w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes a corpus with every vector inline.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        dims: [corpus.dims.image, corpus.dims.text],
        classes: corpus.class_count,
        image_sidecar: None,
        text_sidecar: None,
    };
    write_header(&mut w, &header)?;
    write_posts(&mut w, corpus, |v| VecField::Inline(v.to_vec()), |v| VecField::Inline(v.to_vec()))?;
    w.flush()?;
    Ok(())
}

/// Writes a corpus whose vectors live in two sidecar matrices next to
/// `path` (`<file name>.image.bin` and `<file name>.text.bin`).
pub fn save_corpus_with_sidecars(corpus: &Corpus, path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Argument(format!("bad corpus path {}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let image_name = format!("{name}.image.bin");
    let text_name = format!("{name}.text.bin");

    let mut image = EmbeddingMatrix::new(corpus.dims.image);
    let mut text = EmbeddingMatrix::new(corpus.dims.text);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        dims: [corpus.dims.image, corpus.dims.text],
        classes: corpus.class_count,
        image_sidecar: Some(image_name.clone()),
        text_sidecar: Some(text_name.clone()),
    };
    write_header(&mut w, &header)?;
    write_posts(&mut w, corpus, |v| VecField::Row(image.push(v)), |v| VecField::Row(text.push(v)))?;
    w.flush()?;
    image.save(&base.join(image_name))?;
    text.save(&base.join(text_name))?;
    Ok(())
}
