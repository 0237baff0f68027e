//! Synthetic long-context tasks, masked-LM batches and corpus ingestion.

mod jsonl;
mod listops;
mod mlm;
mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchInput, Labels};
use crate::tensor::Rng;

pub use jsonl::{load_longdoc_jsonl, tokenize_document, CorpusDocument, JsonlReader, LongDocExample, DEFAULT_MAX_LEN};
pub use listops::{decode_tokens, gen_listops, parse_expr, Expr, Op};
pub use mlm::{apply_mlm_masking, corpus_sequences, gen_corpus, MaskCounts, DEFAULT_MASK_RATE};
pub use text::{byte_rule, concat_pair, gen_byte_classification, gen_matching, shares_signature, MARKERS, SIGNATURE_LEN};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    None,
    Class(usize),
    /// Inclusive token spans.
    Spans(Vec<(usize, usize)>),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub tokens: Vec<u32>,
    /// Second sequence of a matching pair.
    pub pair: Option<Vec<u32>>,
    pub target: Target,
    /// Token count before any truncation.
    pub natural_len: usize,
}

/// Synthetic classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LraTask {
    Listops,
    Text,
    Matching,
}

impl LraTask {
    pub fn n_classes(self) -> usize {
        match self {
            LraTask::Listops => 10,
            LraTask::Text | LraTask::Matching => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LraTask::Listops => "listops",
            LraTask::Text => "text",
            LraTask::Matching => "matching",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "listops" => Ok(LraTask::Listops),
            "text" => Ok(LraTask::Text),
            "matching" => Ok(LraTask::Matching),
            _ => Err(Error::Config(format!("unknown task {s:?}; expected listops, text or matching"))),
        }
    }

    /// `count` examples whose token form fits in `len`; matching pairs are
    /// generated at `len` each and concatenated into one sequence.
    pub fn generate(self, rng: &mut Rng, len: usize, max_depth: usize, count: usize) -> Result<Vec<TaskExample>> {
        match self {
            LraTask::Listops => gen_listops(rng, max_depth, len, count),
            LraTask::Text => gen_byte_classification(rng, len, count),
            LraTask::Matching => {
                // each half must still hold its signature after concatenation
                let half = ((len - 2) / 2 + 1).max(16);
                Ok(gen_matching(rng, half, count)?
                    .into_iter()
                    .map(|e| {
                        let tokens = concat_pair(&e.tokens, e.pair.as_ref().expect("pair"), len);
                        TaskExample { natural_len: tokens.len(), tokens, pair: e.pair, target: e.target }
                    })
                    .collect())
            }
        }
    }
}

/// Pads classification examples into one batch of length `len`.
pub fn class_batch(examples: &[&TaskExample], len: usize, globals: usize) -> Result<BatchInput> {
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.tokens.clone()).collect();
    let labels = examples
        .iter()
        .map(|e| e.target.class().ok_or_else(|| Error::InvalidArgument("example has no class label".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchInput::from_sequences(&seqs, Some(len), globals)?.with_labels(Labels::Class(labels)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_task_fits_its_length() {
        for task in [LraTask::Listops, LraTask::Text, LraTask::Matching] {
            let ex = task.generate(&mut Rng::new(5), 64, 3, 50).unwrap();
            assert!(ex.iter().all(|e| e.tokens.len() <= 64 && e.target.class().unwrap() < task.n_classes()));
            let refs: Vec<&TaskExample> = ex.iter().collect();
            let b = class_batch(&refs, 64, 1).unwrap();
            assert_eq!(b.tokens.len(), 50 * 64);
        }
    }

    #[test]
    fn concatenated_matching_keeps_the_rule() {
        for e in LraTask::Matching.generate(&mut Rng::new(6), 64, 0, 200).unwrap() {
            let sep = e.tokens.iter().position(|&t| t == crate::vocab::SEP).unwrap();
            let rule = shares_signature(&e.tokens[..sep], &e.tokens[sep + 1..]);
            assert_eq!(usize::from(rule), e.target.class().unwrap());
        }
    }
}
