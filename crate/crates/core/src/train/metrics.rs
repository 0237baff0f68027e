//! Evaluation metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Longest span, in tokens, considered when decoding a prediction.
pub const MAX_ANSWER_LEN: usize = 30;

/// Dev-set metrics of one task family, with the number of scored items.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSet {
    Accuracy { value: f64, count: usize },
    Span { exact_match: f64, f1: f64, count: usize },
    Mrr { value: f64, count: usize },
    Perplexity { value: f64, count: usize },
}

impl MetricSet {
    /// Named values, the selection metric first.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        match *self {
            MetricSet::Accuracy { value, .. } => vec![("accuracy", value)],
            MetricSet::Span { exact_match, f1, .. } => vec![("f1", f1), ("exact_match", exact_match)],
            MetricSet::Mrr { value, .. } => vec![("mrr", value)],
            MetricSet::Perplexity { value, .. } => vec![("perplexity", value)],
        }
    }

    pub fn primary(&self) -> (&'static str, f64) {
        self.entries()[0]
    }

    /// Larger is better; perplexity is negated.
    pub fn score(&self) -> f64 {
        match *self {
            MetricSet::Perplexity { value, .. } => -value,
            _ => self.primary().1,
        }
    }

    pub fn count(&self) -> usize {
        match *self {
            MetricSet::Accuracy { count, .. }
            | MetricSet::Span { count, .. }
            | MetricSet::Mrr { count, .. }
            | MetricSet::Perplexity { count, .. } => count,
        }
    }

    /// Whether every value lies in its analytic range.
    pub fn in_range(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            MetricSet::Accuracy { value, .. } | MetricSet::Mrr { value, .. } => unit(value),
            MetricSet::Span { exact_match, f1, .. } => unit(exact_match) && unit(f1) && exact_match <= f1,
            MetricSet::Perplexity { value, .. } => value >= 1.0,
        }
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64
}

/// Token F1 between two token multisets.
pub fn token_f1(pred: &[u32], gold: &[u32]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred == gold));
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for &t in pred {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Exact match and F1 of one prediction against its best-matching gold
/// answer.
pub fn span_scores(pred: &[u32], golds: &[Vec<u32>]) -> (f64, f64) {
    let em = golds.iter().any(|g| g.as_slice() == pred);
    let f1 = golds.iter().map(|g| token_f1(pred, g)).fold(0.0, f64::max);
    (f64::from(u8::from(em)), f1)
}

/// Best start (argmax over allowed positions), then the best end within
/// [`MAX_ANSWER_LEN`] tokens of it. Returns an inclusive span.
pub fn decode_span(start: &[f64], end: &[f64], allowed: &[bool]) -> Option<(usize, usize)> {
    let s = (0..start.len()).filter(|&i| allowed[i]).fold(None, |best: Option<usize>, i| match best {
        Some(b) if start[b] >= start[i] => Some(b),
        _ => Some(i),
    })?;
    let hi = (s + MAX_ANSWER_LEN).min(end.len());
    let e = (s..hi).filter(|&j| allowed[j]).fold(s, |b, j| if end[j] > end[b] { j } else { b });
    Some((s, e))
}

/// 1-based rank of `gold` when `scores` are sorted descending; ties count
/// against the gold item.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    1 + scores.iter().enumerate().filter(|&(i, &s)| i != gold && s >= scores[gold]).count()
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}
