//! Fixed local patterns: banded sliding window and blockwise attention.
//! Neither forms an `L x L` score matrix.

use std::rc::Rc;

use super::global::{global_key_scores, joint_softmax};
use super::{attend_tensors, scale_q, AttentionConfig, AttentionOutput, AttnCtx, Overlap, Variant};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor, Var};

/// Sliding window of one-side width `w`, `|i - j| <= w`.
pub fn sliding_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    w: usize,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let width = 2 * w + 1;
    let qs = scale_q(q);
    let scores = qs.band_scores(k, w);
    let mut mask = Vec::with_capacity(n * l * width);
    for b in 0..n {
        for i in 0..l {
            for t in 0..width {
                let j = (i + t).checked_sub(w).filter(|&j| j < l);
                mask.push(j.is_some_and(|j| j >= g && ctx.key_ok(b, j)));
            }
        }
    }
    let global = (g > 0).then(|| global_key_scores(qs, k, g, ctx));
    let (pl, pg) = joint_softmax(scores, mask, global);
    let out = pl.band_apply(v, w);
    match pg {
        Some(pg) => out.add(pg.matmul(v.slice(1, 0, g))),
        None => out,
    }
}

/// Blockwise attention with block size `block`. With half overlap each
/// block also sees the nearer half of both neighbouring blocks.
pub fn block_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    block: usize,
    overlap: Overlap,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let d = q.dim(2);
    let vd = v.dim(2);
    let nb = l / block;
    let qs = scale_q(q);
    let qb = qs.reshape(&[n * nb, block, d]);
    let (kb, vb, width, offset) = match overlap {
        Overlap::None => (k.reshape(&[n * nb, block, d]), v.reshape(&[n * nb, block, vd]), block, 0isize),
        Overlap::Half => {
            let width = 2 * block;
            let off = -((block / 2) as isize);
            let idx: Vec<Option<usize>> = (0..n * nb * width)
                .map(|x| {
                    let (row, s) = (x / width, x % width);
                    let (b, blk) = (row / nb, row % nb);
                    let j = (blk * block) as isize + off + s as isize;
                    (0..l as isize).contains(&j).then(|| b * l + j as usize)
                })
                .collect();
            let idx = Rc::new(idx);
            let kb = k.reshape(&[n * l, d]).gather_rows(idx.clone()).reshape(&[n * nb, width, d]);
            let vb = v.reshape(&[n * l, vd]).gather_rows(idx).reshape(&[n * nb, width, vd]);
            (kb, vb, width, off)
        }
    };
    let scores = qb.matmul_nt(kb);
    let mut mask = Vec::with_capacity(n * l * width);
    for b in 0..n {
        for blk in 0..nb {
            let row: Vec<bool> = (0..width)
                .map(|s| {
                    let j = (blk * block) as isize + offset + s as isize;
                    (0..l as isize).contains(&j) && j as usize >= g && ctx.key_ok(b, j as usize)
                })
                .collect();
            for _ in 0..block {
                mask.extend_from_slice(&row);
            }
        }
    }
    let global = (g > 0).then(|| {
        let (s, m) = global_key_scores(qs, k, g, ctx);
        (s.reshape(&[n * nb, block, g]), m)
    });
    let (pl, pg) = joint_softmax(scores, mask, global);
    let out = pl.matmul(vb).reshape(&[n, l, vd]);
    match pg {
        Some(pg) => out.add(pg.reshape(&[n, l, g]).matmul(v.slice(1, 0, g))),
        None => out,
    }
}

/// Single-head attention under the fixed pattern of `cfg` (sliding window,
/// blockwise or exact), computed with the banded/blocked kernels.
pub fn masked_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    match cfg.variant {
        Variant::Exact | Variant::SlidingWindow { .. } | Variant::Blockwise { .. } => {}
        ref other => return Err(Error::Config(format!("{} is not a fixed-pattern variant", other.tag()))),
    }
    let values = attend_tensors(cfg, q, k, v, &ParamStore::new())?;
    Ok(AttentionOutput { values, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_mask, exact_attention};
    use crate::tensor::{seeded_sample, Distribution, Rng, Tape};

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, shape).unwrap()
    }

    fn agree(cfg: &AttentionConfig, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let (l, d) = (cfg.len, cfg.head_dim);
        let (q, k, v) = (rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]));
        let want = exact_attention(&q, &k, &v, &build_mask(cfg).unwrap(), false).unwrap().values;
        masked_attention(&q, &k, &v, cfg).unwrap().values.max_abs_diff(&want)
    }

    #[test]
    fn patterns_match_oracle() {
        for g in [0, 1, 3] {
            for variant in [
                Variant::SlidingWindow { w: 3 },
                Variant::SlidingWindow { w: 40 },
                Variant::Blockwise { block: 8, overlap: Overlap::Half },
                Variant::Blockwise { block: 8, overlap: Overlap::None },
                Variant::Blockwise { block: 32, overlap: Overlap::None },
            ] {
                let cfg = AttentionConfig::new(variant, 32, 4).with_globals(g);
                assert!(agree(&cfg, 7 + g as u64) < 1e-12, "{cfg:?}");
            }
        }
    }

    #[test]
    fn single_block_is_full_attention() {
        let cfg = AttentionConfig::new(Variant::Blockwise { block: 16, overlap: Overlap::None }, 16, 4);
        assert!(agree(&cfg, 3) < 1e-12);
    }

    #[test]
    fn padding_keys_do_not_leak() {
        // Two sequences whose padding keys differ must give identical outputs
        // on real tokens.
        let mut rng = Rng::new(5);
        let (l, d) = (16, 4);
        let valid = Rc::new((0..l).map(|j| j < 11).collect::<Vec<_>>());
        let ctx = AttnCtx::single(l).with_padding(valid);
        let q = rand(&mut rng, &[1, l, d]);
        let k1 = rand(&mut rng, &[1, l, d]);
        let mut k2 = k1.clone();
        for x in 11 * d..l * d {
            k2.data_mut()[x] = 5.0;
        }
        for sliding in [true, false] {
            let tape = Tape::<f64>::new();
            let (qv, vv) = (tape.constant(q.clone()), tape.constant(q.clone()));
            let run = |k| {
                if sliding {
                    sliding_attend(qv, k, vv, 3, 1, &ctx)
                } else {
                    block_attend(qv, k, vv, 4, Overlap::Half, 0, &ctx)
                }
            };
            let a = run(tape.constant(k1.clone())).value();
            let b = run(tape.constant(k2.clone())).value();
            assert!(a.max_abs_diff(&b) < 1e-15);
        }
    }
}
