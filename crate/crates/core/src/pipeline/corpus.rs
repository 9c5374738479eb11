//! Plain-text corpora: one sentence per line, documents separated by a
//! blank line. Instance dumps: one `src<TAB>tgt` line per instance.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Document, Mode, TrainingInstance, Vocab};

/// Text document with an optional parallel side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub src: Vec<String>,
    pub tgt: Option<Vec<String>>,
}

pub fn parse_documents(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.to_string());
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

pub fn render_documents(docs: &[Vec<String>]) -> String {
    docs.iter().map(|d| d.join("\n") + "\n").collect::<Vec<_>>().join("\n")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
}

pub fn read_documents(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(parse_documents(&read_text(path)?))
}

pub fn write_documents(path: &Path, docs: &[Vec<String>]) -> Result<()> {
    write_text(path, &render_documents(docs))
}

/// Reads a source file and optionally its parallel target, checking that
/// both have the same document and sentence structure.
pub fn read_parallel(src: &Path, tgt: Option<&Path>) -> Result<Vec<RawDocument>> {
    let s = read_documents(src)?;
    if s.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let Some(tgt) = tgt else {
        return Ok(s.into_iter().map(|src| RawDocument { src, tgt: None }).collect());
    };
    let t = read_documents(tgt)?;
    if s.len() != t.len() {
        return Err(Error::format(
            "parallel corpus",
            format!("{} source documents vs {} target documents", s.len(), t.len()),
        ));
    }
    s.into_iter()
        .zip(t)
        .enumerate()
        .map(|(i, (src, tgt))| {
            if src.len() != tgt.len() {
                return Err(Error::format(
                    "parallel corpus",
                    format!("document {}: {} vs {} sentences", i + 1, src.len(), tgt.len()),
                ));
            }
            Ok(RawDocument { src, tgt: Some(tgt) })
        })
        .collect()
}

pub fn write_parallel(src: &Path, tgt: &Path, docs: &[RawDocument]) -> Result<()> {
    let s: Vec<Vec<String>> = docs.iter().map(|d| d.src.clone()).collect();
    let t: Vec<Vec<String>> = docs.iter().map(|d| d.tgt.clone().unwrap_or_default()).collect();
    write_documents(src, &s)?;
    write_documents(tgt, &t)
}

/// Every sentence of both sides, for vocabulary building.
pub fn all_sentences(docs: &[RawDocument]) -> impl Iterator<Item = &str> {
    docs.iter().flat_map(|d| {
        d.src
            .iter()
            .chain(d.tgt.iter().flatten())
            .map(String::as_str)
    })
}

pub fn encode_documents(docs: &[RawDocument], vocab: &Vocab) -> Result<Vec<Document>> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let enc = |s: &Vec<String>| s.iter().map(|x| vocab.encode(x)).collect::<Vec<_>>();
            Document::new(format!("doc{}", i + 1), enc(&d.src), d.tgt.as_ref().map(enc))
        })
        .collect()
}

pub fn render_instances(instances: &[TrainingInstance], vocab: &Vocab) -> String {
    let mut out = String::new();
    for i in instances {
        out.push_str(&vocab.decode(&i.src));
        out.push('\t');
        out.push_str(&vocab.decode(&i.tgt));
        out.push('\n');
    }
    out
}

pub fn write_instances(path: &Path, instances: &[TrainingInstance], vocab: &Vocab) -> Result<()> {
    write_text(path, &render_instances(instances, vocab))
}

/// Reads an instance dump. Provenance is not stored in the dump; line
/// numbers stand in for it.
pub fn read_instances(path: &Path, vocab: &Vocab, mode: Mode) -> Result<Vec<TrainingInstance>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (s, t) = line.split_once('\t').ok_or_else(|| {
                Error::format("instance dump", format!("line {}: missing tab", n + 1))
            })?;
            Ok(TrainingInstance {
                mode,
                src: vocab.parse_serialized(s),
                tgt: vocab.parse_serialized(t),
                doc_id: format!("line{}", n + 1),
                sentences: 0..0,
            })
        })
        .collect()
}
