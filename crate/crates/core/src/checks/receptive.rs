use super::{Bound, CheckOptions, CheckResult};
use crate::attention::{Overlap, Variant};
use crate::error::{Error, Result};
use crate::model::{encode, BatchInput, EncoderConfig, Head, Model};
use crate::tensor::{seeded_sample, Distribution, Rng, Tape};

const LEN: usize = 32;
const BLOCK: usize = 4;
const VOCAB: usize = 16;

/// `J[i][j]`: summed absolute derivative of a random readout of output
/// position `i` with respect to the input vector at position `j` (the
/// position embedding row, which only position `j` reads).
pub fn input_jacobian_norms(model: &Model<f64>, tokens: &[u32], globals: usize) -> Result<Vec<Vec<f64>>> {
    let l = tokens.len();
    let batch = BatchInput::from_sequences(&[tokens.to_vec()], None, globals)?;
    let pos = model.params.position("pos_emb").ok_or_else(|| Error::Config("model has no position table".into()))?;
    let readout = seeded_sample::<f64>(&mut Rng::new(9), Distribution::Gaussian, &[1, 1, model.cfg.dim])?;
    let mut jac = Vec::with_capacity(l);
    for i in 0..l {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let h = encode(&model.cfg, &p, &batch)?;
        let y = h.slice(1, i, i + 1).mul(tape.constant(readout.clone())).sum();
        let g = tape.backward(y)?.wrt(p.vars()[pos]);
        jac.push((0..l).map(|j| g.row(j).iter().map(|x| x.abs()).sum()).collect());
    }
    Ok(jac)
}

/// Half-open span of inputs that can influence position `i` after `depth`
/// layers of half-overlap blockwise attention: the first layer reaches half
/// a block past each edge of `i`'s block, and every further layer one more
/// block.
pub fn half_overlap_reach(i: usize, block: usize, depth: usize, len: usize) -> (usize, usize) {
    if depth == 0 {
        return (i, i + 1);
    }
    let start = (i / block) * block;
    let grow = block / 2 + (depth - 1) * block;
    (start.saturating_sub(grow), (start + block + grow).min(len))
}

fn model(variant: Variant, depth: usize, seed: u64) -> Result<Model<f64>> {
    let mut enc = EncoderConfig::new(depth, 8, 2, 16, LEN, variant);
    enc.vocab = VOCAB;
    Model::init(enc, Head::Retrieval, seed)
}

fn fraction(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut hit) = (0usize, 0usize);
    for x in xs {
        n += 1;
        hit += usize::from(x != 0.0);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Locality of blockwise encoders measured on the input-output Jacobian:
/// disjoint blocks never exchange information at any depth, one global
/// token connects every pair of blocks, and half-overlapping blocks reach
/// exactly one more block per layer.
pub fn receptive_field_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    if !opts.covers("blockwise") {
        return Ok(Vec::new());
    }
    let mut rng = Rng::new(opts.seed ^ 0x4ecf);
    let tokens: Vec<u32> = (0..LEN).map(|_| rng.below(VOCAB) as u32).collect();
    let none = Variant::Blockwise { block: BLOCK, overlap: Overlap::None };
    let same = |i: usize, j: usize| i / BLOCK == j / BLOCK;
    let mut out = Vec::new();

    for depth in [1, 3] {
        let jac = input_jacobian_norms(&model(none.clone(), depth, opts.seed)?, &tokens, 0)?;
        let cross = (0..LEN).flat_map(|i| (0..LEN).filter(move |&j| !same(i, j)).map(move |j| (i, j)));
        let leak = cross.map(|(i, j)| jac[i][j]).fold(0.0, f64::max);
        out.push(CheckResult::new(format!("blockwise_none g=0 depth {depth}: largest cross-block entry"), leak, Bound::Equals(0.0)));
        let inside = fraction((0..LEN).flat_map(|i| (0..LEN).filter(move |&j| same(i, j)).map(|j| jac[i][j]).collect::<Vec<_>>()));
        out.push(CheckResult::new(format!("blockwise_none g=0 depth {depth}: nonzero in-block share"), inside, Bound::Equals(1.0)));
    }

    let jac = input_jacobian_norms(&model(none, 2, opts.seed)?, &tokens, 1)?;
    let linked = fraction((1..LEN).flat_map(|i| (1..LEN).filter(move |&j| !same(i, j)).map(|j| jac[i][j]).collect::<Vec<_>>()));
    out.push(CheckResult::new("blockwise_none g=1 depth 2: nonzero cross-block share", linked, Bound::Equals(1.0)));

    let half = Variant::Blockwise { block: BLOCK, overlap: Overlap::Half };
    let mut reach = Vec::new();
    for depth in 1..=3 {
        let jac = input_jacobian_norms(&model(half.clone(), depth, opts.seed)?, &tokens, 0)?;
        let (mut beyond, mut within, mut count) = (0.0f64, Vec::new(), 0usize);
        for (i, row) in jac.iter().enumerate() {
            let (lo, hi) = half_overlap_reach(i, BLOCK, depth, LEN);
            for (j, &x) in row.iter().enumerate() {
                if (lo..hi).contains(&j) {
                    within.push(x);
                } else {
                    beyond = beyond.max(x);
                }
                count += usize::from(x != 0.0);
            }
        }
        out.push(CheckResult::new(format!("blockwise_half depth {depth}: largest entry beyond bound"), beyond, Bound::Equals(0.0)));
        out.push(CheckResult::new(format!("blockwise_half depth {depth}: nonzero share within bound"), fraction(within.into_iter()), Bound::Equals(1.0)));
        reach.push(count);
    }
    let growth = reach.windows(2).map(|w| w[1] as f64 - w[0] as f64).fold(f64::INFINITY, f64::min);
    out.push(CheckResult::new("blockwise_half: reach growth per extra layer (entries)", growth, Bound::AtLeast(1.0)));
    Ok(out)
}
