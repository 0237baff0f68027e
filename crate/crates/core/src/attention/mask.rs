use super::{AttentionConfig, Overlap, Variant};
use crate::error::{Error, Result};

/// Dense attendance relation: `allows(i, j)` means query `i` may attend key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Vec<bool>,
    globals: Vec<usize>,
}

impl AttentionMask {
    pub fn full(len: usize) -> Self {
        Self { len, allow: vec![true; len * len], globals: Vec::new() }
    }

    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..len * len).map(|x| f(x / len, x % len)).collect();
        Self { len, allow, globals: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    pub fn globals(&self) -> &[usize] {
        &self.globals
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Opens the rows and columns of the first `g` positions.
    pub fn with_globals(mut self, g: usize) -> Result<Self> {
        if g > self.len {
            return Err(Error::InvalidArgument(format!("global token {} out of range for length {}", g - 1, self.len)));
        }
        let l = self.len;
        for t in 0..g {
            for x in 0..l {
                self.allow[t * l + x] = true;
                self.allow[x * l + t] = true;
            }
        }
        self.globals = (0..g).collect();
        Ok(self)
    }

    /// First row with no allowed entry, if any.
    pub fn empty_row(&self) -> Option<usize> {
        (0..self.len).find(|&i| !self.allow[i * self.len..(i + 1) * self.len].iter().any(|&a| a))
    }

    pub fn count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }
}

/// Half-open key range of the block containing `i`.
pub(crate) fn block_keys(i: usize, block: usize, overlap: Overlap, len: usize) -> (usize, usize) {
    let start = (i / block) * block;
    match overlap {
        Overlap::None => (start, start + block),
        Overlap::Half => (start.saturating_sub(block / 2), (start + block + block / 2).min(len)),
    }
}

/// Attendance pattern for the fixed-pattern variants, including globals.
pub fn build_mask(cfg: &AttentionConfig) -> Result<AttentionMask> {
    cfg.validate()?;
    let l = cfg.len;
    let m = match cfg.variant {
        Variant::SlidingWindow { w } => AttentionMask::from_fn(l, |i, j| i.abs_diff(j) <= w),
        Variant::Blockwise { block, overlap } => AttentionMask::from_fn(l, |i, j| {
            let (lo, hi) = block_keys(i, block, overlap, l);
            (lo..hi).contains(&j)
        }),
        Variant::Exact => AttentionMask::full(l),
        ref other => return Err(Error::Config(format!("{} has no fixed attention pattern", other.tag()))),
    };
    m.with_globals(cfg.globals)
}
