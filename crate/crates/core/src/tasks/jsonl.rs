//! Long-document JSON-lines ingestion with truncation.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TaskExample, Target};
use crate::error::{Error, Result};
use crate::vocab;

pub const DEFAULT_MAX_LEN: usize = 4096;

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<bool>,
    /// Question or query text placed before the document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

/// A document after tokenization and truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct LongDocExample {
    pub doc: CorpusDocument,
    pub example: TaskExample,
    /// Tokens before the document text: the classification token, plus the
    /// query and a separator when present.
    pub prefix_len: usize,
    /// Answers were given but every occurrence fell outside the kept window
    /// (or none occurred); the example must not enter the span loss.
    pub flagged: bool,
}

/// Every (start, end) token span, inclusive, where `needle` occurs in `hay`.
fn occurrences(hay: &[u8], needle: &[u8]) -> Vec<(usize, usize)> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len()).filter(|&i| &hay[i..i + needle.len()] == needle).map(|i| (i, i + needle.len() - 1)).collect()
}

/// Tokenizes one document: `[CLS] (query [SEP])? text`, truncated to
/// `max_len` tokens. Answer spans are located in the full text, shifted by
/// the prefix and dropped when they do not end inside the kept window.
pub fn tokenize_document(doc: CorpusDocument, max_len: usize) -> Result<LongDocExample> {
    if doc.text.is_empty() {
        return Err(Error::InvalidArgument(format!("document {:?} has empty text", doc.id)));
    }
    let mut tokens = vec![vocab::CLS];
    if let Some(q) = &doc.query {
        tokens.extend(vocab::encode(q));
        tokens.push(vocab::SEP);
    }
    let prefix_len = tokens.len();
    if prefix_len >= max_len {
        return Err(Error::InvalidArgument(format!("document {:?}: query leaves no room for text within {max_len} tokens", doc.id)));
    }
    let text = doc.text.as_bytes();
    let natural_len = prefix_len + text.len();
    let keep = text.len().min(max_len - prefix_len);
    tokens.extend(text[..keep].iter().map(|&b| u32::from(b)));

    let (target, flagged) = match (&doc.answers, doc.label) {
        (Some(answers), _) => {
            let spans: Vec<(usize, usize)> = answers
                .iter()
                .flat_map(|a| occurrences(text, a.as_bytes()))
                .filter(|&(_, e)| e < keep)
                .map(|(s, e)| (s + prefix_len, e + prefix_len))
                .collect();
            let flagged = spans.is_empty();
            (Target::Spans(spans), flagged)
        }
        (None, Some(label)) => (Target::Class(label), false),
        (None, None) => (Target::None, false),
    };
    Ok(LongDocExample { doc, example: TaskExample { tokens, pair: None, target, natural_len }, prefix_len, flagged })
}

/// Streams a corpus file; malformed lines yield an error carrying their
/// 1-based line number and the stream continues with the next line.
pub struct JsonlReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    max_len: usize,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, max_len: usize) -> Self {
        Self { lines: reader.lines(), line: 0, max_len }
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<LongDocExample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let line = self.line;
            let text = match raw {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::Malformed { line, msg: e.to_string() })),
            };
            if text.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<CorpusDocument>(&text)
                .map_err(|e| Error::Malformed { line, msg: e.to_string() })
                .and_then(|d| tokenize_document(d, self.max_len).map_err(|e| Error::Malformed { line, msg: e.to_string() }));
            return Some(parsed);
        }
    }
}

pub fn load_longdoc_jsonl(path: &Path, max_len: usize) -> Result<JsonlReader<BufReader<File>>> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len must be at least 2, got {max_len}")));
    }
    Ok(JsonlReader::new(BufReader::new(File::open(path)?), max_len))
}
