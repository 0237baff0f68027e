//! Masked-LM batch construction and the synthetic pretraining corpus.

use crate::error::{Error, Result};
use crate::model::{BatchInput, Labels};
use crate::tensor::Rng;
use crate::vocab;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// How a selected token was replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskCounts {
    pub eligible: usize,
    pub masked: usize,
    pub random: usize,
    pub kept: usize,
}

impl MaskCounts {
    pub fn selected(&self) -> usize {
        self.masked + self.random + self.kept
    }
}

/// Selects each ordinary, non-global, non-padding token with probability
/// `mask_rate`; selected tokens become the mask token (80%), a random byte
/// (10%) or stay unchanged (10%). The originals become the labels. A batch
/// may end up with no selected positions; callers skip such batches.
pub fn apply_mlm_masking(rng: &mut Rng, batch: &BatchInput, mask_rate: f64) -> Result<(BatchInput, MaskCounts)> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::InvalidArgument(format!("mask rate must lie in (0, 1), got {mask_rate}")));
    }
    let mut out = batch.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut counts = MaskCounts::default();
    for (k, &t) in batch.tokens.iter().enumerate() {
        if !batch.valid[k] || k % batch.len < batch.globals || vocab::is_special(t) {
            continue;
        }
        counts.eligible += 1;
        if !rng.bernoulli(mask_rate) {
            continue;
        }
        positions.push(k);
        targets.push(t);
        let r = rng.uniform();
        if r < 0.8 {
            out.tokens[k] = vocab::MASK;
            counts.masked += 1;
        } else if r < 0.9 {
            out.tokens[k] = rng.below(vocab::BYTES) as u32;
            counts.random += 1;
        } else {
            counts.kept += 1;
        }
    }
    out.labels = Labels::Masked { positions, targets };
    Ok((out, counts))
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ra", "te", "su", "no", "vi", "pe", "do", "la", "ze", "ri", "ta", "mo", "ne", "si", "ku", "be", "ga",
    "fo", "hi", "ju", "wa",
];

/// Deterministic synthetic text of exactly `bytes` bytes.
///
/// Words come from a Zipf-weighted lexicon of syllable strings, giving local
/// statistics a model can learn. Each paragraph ends with an exact repeat
/// of one of its sentences, so some masked tokens are only recoverable from
/// context up to a few hundred bytes back.
pub fn gen_corpus(rng: &mut Rng, bytes: usize) -> String {
    let lexicon: Vec<String> = (0..2000)
        .map(|_| {
            let n = rng.range(1, 3);
            (0..n).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect()
        })
        .collect();
    let weights: Vec<f64> = (1..=lexicon.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let word = |rng: &mut Rng| {
        let mut u = rng.uniform() * total;
        for (w, p) in lexicon.iter().zip(&weights) {
            if u < *p {
                return w.clone();
            }
            u -= p;
        }
        lexicon[0].clone()
    };
    let mut text = String::with_capacity(bytes + 256);
    while text.len() < bytes {
        let mut sentences: Vec<String> = Vec::new();
        let mut para_len = 0;
        let target = rng.range(120, 240);
        while para_len < target {
            let n = rng.range(4, 9);
            let s = (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ") + ". ";
            para_len += s.len();
            sentences.push(s);
        }
        let echo = sentences[rng.below(sentences.len())].clone();
        for s in &sentences {
            text.push_str(s);
        }
        text.push_str(&echo);
        text.push('\n');
    }
    text.truncate(bytes);
    text
}

/// Cuts text into `[CLS] + (len - 1)` byte sequences; a short tail is dropped.
pub fn corpus_sequences(text: &str, len: usize) -> Vec<Vec<u32>> {
    assert!(len >= 2, "sequence length must leave room for content");
    text.as_bytes()
        .chunks_exact(len - 1)
        .map(|c| std::iter::once(vocab::CLS).chain(c.iter().map(|&b| u32::from(b))).collect())
        .collect()
}
