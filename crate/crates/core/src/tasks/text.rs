//! Byte-level surrogates for long-document classification and matching.
//!
//! Noise bytes are lowercase letters and spaces drawn with English-like
//! frequencies. Classification markers are uppercase letters; matching
//! signatures are runs of digits. Neither alphabet occurs in the noise.

use super::{TaskExample, Target};
use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::vocab;

/// Relative frequencies of ' ', 'a'..='z'.
const FREQ: [f64; 27] = [
    18.0, 6.5, 1.2, 2.2, 3.4, 10.2, 1.8, 1.6, 4.9, 5.6, 0.1, 0.6, 3.2, 1.9, 5.4, 6.0, 1.5, 0.1, 4.8, 5.1, 7.3, 2.2, 0.8,
    1.9, 0.1, 1.6, 0.1,
];

pub const MARKERS: &[u8] = b"ABCDEFGH";
pub const SIGNATURE_LEN: usize = 4;

fn noise_byte(rng: &mut Rng) -> u32 {
    let total: f64 = FREQ.iter().sum();
    let mut r = rng.uniform() * total;
    for (i, f) in FREQ.iter().enumerate() {
        if r < *f {
            return if i == 0 { u32::from(b' ') } else { u32::from(b'a' + i as u8 - 1) };
        }
        r -= f;
    }
    u32::from(b'e')
}

fn noise(rng: &mut Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| noise_byte(rng)).collect()
}

fn check_len(l: usize) -> Result<()> {
    if l < 16 {
        return Err(Error::InvalidArgument(format!("sequence length must be at least 16, got {l}")));
    }
    Ok(())
}

/// Quarter boundaries of the byte region `1..l` (after the leading token).
fn quarters(l: usize) -> (usize, usize, usize) {
    let n = l - 1;
    (1 + n / 4, 1 + 3 * n / 4, l)
}

/// Binary task: label 1 iff the marker in the first quarter equals the
/// marker in the last quarter. Two more markers sit in the middle half so
/// every sequence holds the same multiset `{X, X, Y, Y}` and byte counts
/// carry no information about the label.
pub fn gen_byte_classification(rng: &mut Rng, l: usize, count: usize) -> Result<Vec<TaskExample>> {
    check_len(l)?;
    let (q1, q3, end) = quarters(l);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = MARKERS[rng.below(MARKERS.len())];
        let y = loop {
            let y = MARKERS[rng.below(MARKERS.len())];
            if y != x {
                break y;
            }
        };
        let label = rng.below(2);
        let (first, last, mid) = if label == 1 { (x, x, [y, y]) } else { (x, y, [x, y]) };
        let mut tokens = vec![vocab::CLS];
        tokens.extend(noise(rng, l - 1));
        tokens[rng.range(1, q1 - 1)] = u32::from(first);
        tokens[rng.range(q3, end - 1)] = u32::from(last);
        let a = rng.range(q1, q3 - 1);
        let b = loop {
            let b = rng.range(q1, q3 - 1);
            if b != a {
                break b;
            }
        };
        tokens[a] = u32::from(mid[0]);
        tokens[b] = u32::from(mid[1]);
        out.push(TaskExample { tokens, pair: None, target: Target::Class(label), natural_len: l });
    }
    Ok(out)
}

/// The planted rule read back from a sequence: `Some(label)` when exactly
/// one marker lies in each outer quarter.
pub fn byte_rule(tokens: &[u32]) -> Option<usize> {
    let (q1, q3, end) = quarters(tokens.len());
    let is_marker = |t: u32| t < 256 && MARKERS.contains(&(t as u8));
    let first: Vec<u32> = tokens[1..q1].iter().copied().filter(|&t| is_marker(t)).collect();
    let last: Vec<u32> = tokens[q3..end].iter().copied().filter(|&t| is_marker(t)).collect();
    match (first.as_slice(), last.as_slice()) {
        ([a], [b]) => Some(usize::from(a == b)),
        _ => None,
    }
}

fn signature(rng: &mut Rng) -> Vec<u32> {
    (0..SIGNATURE_LEN).map(|_| u32::from(b'0') + rng.below(10) as u32).collect()
}

fn plant(rng: &mut Rng, l: usize, sig: &[u32]) -> Vec<u32> {
    let mut tokens = vec![vocab::CLS];
    tokens.extend(noise(rng, l - 1));
    let at = rng.range(1, l - sig.len());
    tokens[at..at + sig.len()].copy_from_slice(sig);
    tokens
}

/// Pairs of sequences; positive pairs carry the same digit signature,
/// negative pairs carry different ones.
pub fn gen_matching(rng: &mut Rng, l: usize, count: usize) -> Result<Vec<TaskExample>> {
    check_len(l)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.below(2);
        let s1 = signature(rng);
        let s2 = if label == 1 {
            s1.clone()
        } else {
            loop {
                let s = signature(rng);
                if s != s1 {
                    break s;
                }
            }
        };
        let a = plant(rng, l, &s1);
        let b = plant(rng, l, &s2);
        out.push(TaskExample { tokens: a, pair: Some(b), target: Target::Class(label), natural_len: l });
    }
    Ok(out)
}

fn digit_runs(tokens: &[u32]) -> Vec<&[u32]> {
    tokens
        .split(|&t| !(u32::from(b'0')..=u32::from(b'9')).contains(&t))
        .filter(|r| r.len() >= SIGNATURE_LEN)
        .collect()
}

/// Matching rule: positive iff both sequences contain a common digit run of
/// signature length.
pub fn shares_signature(a: &[u32], b: &[u32]) -> bool {
    let ra = digit_runs(a);
    digit_runs(b).iter().any(|rb| ra.iter().any(|x| x == rb))
}

/// `[CLS] a [SEP] b` for a single-encoder classifier; each half keeps at
/// most `(len - 1) / 2` bytes of its sequence, counted after its leading
/// token, so the signature positions may be cut when `len` is small.
pub fn concat_pair(a: &[u32], b: &[u32], len: usize) -> Vec<u32> {
    let half = (len - 2) / 2;
    let body = |s: &[u32]| s.iter().copied().filter(|&t| t != vocab::CLS).take(half).collect::<Vec<_>>();
    let mut out = vec![vocab::CLS];
    out.extend(body(a));
    out.push(vocab::SEP);
    out.extend(body(b));
    out
}
