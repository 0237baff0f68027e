//! Local blockwise attention joined with dynamic low-rank landmarks.

use std::rc::Rc;

use super::global::{global_key_scores, joint_softmax};
use super::{attend_tensors, block_attend, scale_q, AttentionConfig, AttentionOutput, AttnCtx, Overlap, Variant};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor, Var};

/// Each query scores its own block's keys and `r` landmark keys
/// `K̄ = softmax_L(K W_p)^T K` in one softmax. Without a projection this is
/// plain non-overlapping blockwise attention.
pub(crate) fn long_short_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    proj: Option<Var<'t, T>>,
    block: usize,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let Some(wp) = proj.filter(|w| w.dim(1) > 0) else {
        return block_attend(q, k, v, block, Overlap::None, g, ctx);
    };
    let (n, l) = (ctx.rows(), ctx.len);
    let (d, vd) = (q.dim(2), v.dim(2));
    let r = wp.dim(1);
    let nb = l / block;

    let lm_scores = k.matmul(wp).transpose();
    let lm_w = match &ctx.key_valid {
        Some(_) => {
            let m: Vec<bool> = (0..n * r * l).map(|x| ctx.key_ok(x / (r * l), x % l)).collect();
            lm_scores.masked_softmax(&Rc::new(m))
        }
        None => lm_scores.softmax(),
    };
    let kbar = lm_w.matmul(k);
    let vbar = lm_w.matmul(v);

    let qs = scale_q(q);
    let local = qs.reshape(&[n * nb, block, d]).matmul_nt(k.reshape(&[n * nb, block, d]));
    let landmark = qs.matmul_nt(kbar).reshape(&[n * nb, block, r]);
    let scores = Var::concat(&[local, landmark], 2);
    let width = block + r;
    let mut mask = Vec::with_capacity(n * l * width);
    for b in 0..n {
        for blk in 0..nb {
            let row: Vec<bool> = (0..width)
                .map(|s| {
                    let j = blk * block + s;
                    s >= block || (j >= g && ctx.key_ok(b, j))
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
    let (p, pg) = joint_softmax(scores, mask, global);
    let out = p.slice(2, 0, block).matmul(v.reshape(&[n * nb, block, vd])).reshape(&[n, l, vd]);
    let out = out.add(p.slice(2, block, width).reshape(&[n, l, r]).matmul(vbar));
    match pg {
        Some(pg) => out.add(pg.reshape(&[n, l, g]).matmul(v.slice(1, 0, g))),
        None => out,
    }
}

/// Long-short attention on one sequence; `params` holds `ls_proj` unless
/// the landmark count is zero.
pub fn long_short_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &ParamStore<T>,
) -> Result<AttentionOutput<T>> {
    if !matches!(cfg.variant, Variant::LongShort { .. }) {
        return Err(Error::Config(format!("expected long_short, got {}", cfg.variant.tag())));
    }
    Ok(AttentionOutput { values: attend_tensors(cfg, q, k, v, params)?, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{exact_attention, masked_attention, AttentionMask};
    use crate::tensor::{seeded_sample, Distribution, Rng};

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, shape).unwrap()
    }

    #[test]
    fn no_landmarks_is_blockwise() {
        let mut rng = Rng::new(61);
        let (l, d) = (16, 4);
        let (q, k, v) = (rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]));
        let cfg = AttentionConfig::new(Variant::LongShort { block: 4, landmarks: 0 }, l, d);
        let got = long_short_attention(&q, &k, &v, &cfg, &ParamStore::new()).unwrap().values;
        let bw = AttentionConfig::new(Variant::Blockwise { block: 4, overlap: Overlap::None }, l, d);
        assert!(got.max_abs_diff(&masked_attention(&q, &k, &v, &bw).unwrap().values) < 1e-12);
        let full = AttentionConfig::new(Variant::LongShort { block: l, landmarks: 0 }, l, d);
        let got = long_short_attention(&q, &k, &v, &full, &ParamStore::new()).unwrap().values;
        let want = exact_attention(&q, &k, &v, &AttentionMask::full(l), false).unwrap().values;
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matches_concatenated_softmax() {
        let mut rng = Rng::new(62);
        let (l, d, b, r) = (32, 4, 8, 4);
        let (q, k, v) = (rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]));
        let wp = rand(&mut rng, &[d, r]);
        let mut params = ParamStore::new();
        params.insert("ls_proj", wp.clone(), true).unwrap();
        let cfg = AttentionConfig::new(Variant::LongShort { block: b, landmarks: r }, l, d);
        let got = long_short_attention(&q, &k, &v, &cfg, &params).unwrap().values;

        // landmark weights: softmax over positions of each column of K W_p
        let kw = k.matmul(&wp).unwrap();
        let mut pw = vec![vec![0.0; l]; r];
        for c in 0..r {
            let z: f64 = (0..l).map(|j| kw.at(&[j, c]).exp()).sum();
            for j in 0..l {
                pw[c][j] = kw.at(&[j, c]).exp() / z;
            }
        }
        let bar = |x: &Tensor<f64>, c: usize, e: usize| (0..l).map(|j| pw[c][j] * x.at(&[j, e])).sum::<f64>();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..l {
            let blk = i / b;
            let mut s = Vec::new();
            let mut vals = Vec::new();
            for j in blk * b..(blk + 1) * b {
                s.push((0..d).map(|e| q.at(&[i, e]) * k.at(&[j, e])).sum::<f64>() * scale);
                vals.push((0..d).map(|e| v.at(&[j, e])).collect::<Vec<_>>());
            }
            for c in 0..r {
                s.push((0..d).map(|e| q.at(&[i, e]) * bar(&k, c, e)).sum::<f64>() * scale);
                vals.push((0..d).map(|e| bar(&v, c, e)).collect());
            }
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for e in 0..d {
                let want: f64 = s.iter().zip(&vals).map(|(x, vv)| x.exp() / z * vv[e]).sum();
                assert!((got.at(&[i, e]) - want).abs() < 1e-12);
            }
        }
    }
}
