//! Hashed attention with shared query/key vectors.
//!
//! Each round hashes tokens with random signed projections, sorts them by
//! `(bucket, position)`, splits the sorted order into chunks and lets every
//! token attend same-bucket tokens in its own and the previous chunk.
//! Rounds are mixed with weights `softmax_r(lse_r)`.

use std::rc::Rc;

use super::global::global_key_scores;
use super::{attend_tensors, scale_q, AttentionConfig, AttentionOutput, AttnCtx, Variant};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One hashing round: outputs and log-normalizers in original token order.
#[derive(Clone, Debug)]
pub struct LshRound<T: Scalar = f32> {
    /// `[L, d]`.
    pub output: Tensor<T>,
    /// `[L]`.
    pub lse: Tensor<T>,
    pub buckets: Vec<usize>,
}

fn argmax_signed<T: Scalar>(proj: &[T]) -> usize {
    let p = proj.len();
    let mut best = 0;
    let mut val = T::neg_infinity();
    for (h, &x) in proj.iter().enumerate() {
        if x > val {
            val = x;
            best = h;
        }
    }
    for (h, &x) in proj.iter().enumerate() {
        if -x > val {
            val = -x;
            best = p + h;
        }
    }
    best
}

/// Bucket of every row of `qk: [L, d]` under rotations `rot: [d, P]`; the
/// bucket is the argmax over the `2P` signed projections.
pub fn lsh_buckets<T: Scalar>(qk: &Tensor<T>, rot: &Tensor<T>) -> Result<Vec<usize>> {
    let proj = qk.matmul(rot)?;
    Ok((0..qk.shape()[0]).map(|i| argmax_signed(proj.row(i))).collect())
}

struct Round<'t, T: Scalar> {
    out: Var<'t, T>,
    lse: Var<'t, T>,
    buckets: Vec<usize>,
}

fn lsh_round<'t, T: Scalar>(
    qk: Var<'t, T>,
    v: Var<'t, T>,
    rot: Var<'t, T>,
    chunk: usize,
    g: usize,
    ctx: &AttnCtx,
) -> Round<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let (d, vd) = (qk.dim(2), v.dim(2));
    let nc = l / chunk;
    let width = 2 * chunk;
    let proj = qk.matmul(rot).value();
    let p = proj.last_dim();
    let buckets: Vec<usize> = proj.data().chunks_exact(p).map(argmax_signed).collect();

    // sorted slot -> original position, per row
    let mut perm = vec![0usize; n * l];
    let mut inv = vec![0usize; n * l];
    for b in 0..n {
        let row = &mut perm[b * l..(b + 1) * l];
        row.iter_mut().enumerate().for_each(|(i, x)| *x = i);
        row.sort_by_key(|&i| (buckets[b * l + i], i));
        for (s, &i) in row.iter().enumerate() {
            inv[b * l + i] = s;
        }
    }

    let q_idx = Rc::new((0..n * l).map(|x| Some((x / l) * l + perm[x])).collect::<Vec<_>>());
    let key_pos = |b: usize, a: usize, s: usize| -> Option<usize> {
        let slot = if s < chunk { (a * chunk + s).checked_sub(chunk)? } else { a * chunk + s - chunk };
        Some(perm[b * l + slot])
    };
    let k_idx: Vec<Option<usize>> = (0..n * nc * width)
        .map(|x| {
            let (row, s) = (x / width, x % width);
            let (b, a) = (row / nc, row % nc);
            key_pos(b, a, s).map(|j| b * l + j)
        })
        .collect();
    let k_idx = Rc::new(k_idx);

    let qs = scale_q(qk).reshape(&[n * l, d]).gather_rows(q_idx).reshape(&[n, l, d]);
    let qb = qs.reshape(&[n * nc, chunk, d]);
    let kb = qk.reshape(&[n * l, d]).gather_rows(k_idx.clone()).reshape(&[n * nc, width, d]);
    let vb = v.reshape(&[n * l, vd]).gather_rows(k_idx).reshape(&[n * nc, width, vd]);
    let scores = qb.matmul_nt(kb);

    let cols = width + g;
    let mut mask = Vec::with_capacity(n * l * cols);
    let global = (g > 0).then(|| global_key_scores(qs, qk, g, ctx));
    for b in 0..n {
        let any_global = (0..g).any(|t| ctx.key_ok(b, t));
        for a in 0..nc {
            for i in 0..chunk {
                let pi = perm[b * l + a * chunk + i];
                let bi = buckets[b * l + pi];
                let start = mask.len();
                let mut self_col = None;
                for s in 0..width {
                    let ok = match key_pos(b, a, s) {
                        Some(pj) if pj == pi => {
                            self_col = Some(start + s);
                            false
                        }
                        Some(pj) => buckets[b * l + pj] == bi && pj >= g && ctx.key_ok(b, pj),
                        None => false,
                    };
                    mask.push(ok);
                }
                let any_local = mask[start..].iter().any(|&m| m);
                for t in 0..g {
                    mask.push(ctx.key_ok(b, t));
                }
                if !any_local && !any_global {
                    if let Some(c) = self_col {
                        mask[c] = true;
                    }
                }
            }
        }
    }
    let mask = Rc::new(mask);
    let all = match &global {
        Some((gs, _)) => Var::concat(&[scores, gs.reshape(&[n * nc, chunk, g])], 2),
        None => scores,
    };
    let pr = all.masked_softmax(&mask);
    let lse = all.logsumexp(Some(&mask));
    let mut out = pr.slice(2, 0, width).matmul(vb);
    if g > 0 {
        let pg = pr.slice(2, width, cols).reshape(&[n, l, g]);
        out = out.add(pg.matmul(v.slice(1, 0, g)).reshape(&[n * nc, chunk, vd]));
    }
    let back = Rc::new((0..n * l).map(|x| Some((x / l) * l + inv[x])).collect::<Vec<_>>());
    let out = out.reshape(&[n * l, vd]).gather_rows(back.clone()).reshape(&[n, l, vd]);
    let lse = lse.reshape(&[n * l, 1]).gather_rows(back).reshape(&[n, l, 1]);
    Round { out, lse, buckets }
}

/// Multi-round hashed attention; `qk` doubles as queries and keys and
/// `rot: [n_hash, d, n_buckets/2]` holds the per-round projections.
pub(crate) fn lsh_attend<'t, T: Scalar>(
    qk: Var<'t, T>,
    v: Var<'t, T>,
    rot: Var<'t, T>,
    n_hash: usize,
    chunk: usize,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let (d, p) = (rot.dim(1), rot.dim(2));
    let rounds: Vec<Round<'t, T>> =
        (0..n_hash).map(|r| lsh_round(qk, v, rot.slice(0, r, r + 1).reshape(&[d, p]), chunk, g, ctx)).collect();
    if n_hash == 1 {
        return rounds[0].out;
    }
    let lse: Vec<_> = rounds.iter().map(|r| r.lse).collect();
    let w = Var::concat(&lse, 2).softmax();
    let mut out: Option<Var<'t, T>> = None;
    for (r, round) in rounds.iter().enumerate() {
        let term = round.out.scale_rows(w.slice(2, r, r + 1).reshape(&[n * l]));
        out = Some(match out {
            Some(o) => o.add(term),
            None => term,
        });
    }
    out.expect("at least one round")
}

/// Per-round outputs of hashed attention on one sequence (no globals).
/// `qk, v: [L, d]`, `rot: [n_hash, d, P]`.
pub fn lsh_attention_rounds<T: Scalar>(qk: &Tensor<T>, v: &Tensor<T>, rot: &Tensor<T>, chunk: usize) -> Result<Vec<LshRound<T>>> {
    if qk.ndim() != 2 || v.ndim() != 2 || rot.ndim() != 3 || qk.shape()[1] != rot.shape()[1] || qk.shape()[0] != v.shape()[0] {
        return Err(shape_err("lsh_attention_rounds", format!("qk {:?}, v {:?}, rot {:?}", qk.shape(), v.shape(), rot.shape())));
    }
    let (l, d) = (qk.shape()[0], qk.shape()[1]);
    if chunk == 0 || l % chunk != 0 {
        return Err(Error::Config(format!("chunk {chunk} must divide L={l}")));
    }
    let (nh, p) = (rot.shape()[0], rot.shape()[2]);
    let vd = v.shape()[1];
    let tape = Tape::new();
    let qv = tape.constant(qk.reshape(&[1, l, d])?);
    let vv = tape.constant(v.reshape(&[1, l, vd])?);
    let rv = tape.constant(rot.clone());
    let ctx = AttnCtx::single(l);
    let mut rounds = Vec::with_capacity(nh);
    for r in 0..nh {
        let round = lsh_round(qv, vv, rv.slice(0, r, r + 1).reshape(&[d, p]), chunk, 0, &ctx);
        rounds.push(LshRound {
            output: round.out.value().reshape(&[l, vd])?,
            lse: round.lse.value().reshape(&[l])?,
            buckets: round.buckets,
        });
    }
    tape.check()?;
    Ok(rounds)
}

/// Hashed attention on one sequence; `params` must hold `lsh_rot`.
pub fn lsh_attention<T: Scalar>(qk: &Tensor<T>, v: &Tensor<T>, cfg: &AttentionConfig, params: &ParamStore<T>) -> Result<AttentionOutput<T>> {
    if !matches!(cfg.variant, Variant::Lsh { .. }) {
        return Err(Error::Config(format!("expected lsh, got {}", cfg.variant.tag())));
    }
    Ok(AttentionOutput { values: attend_tensors(cfg, qk, qk, v, params)?, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{exact_attention, AttentionMask};
    use crate::tensor::{seeded_sample, Distribution, Rng};

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, shape).unwrap()
    }

    fn brute_force_mask(buckets: &[usize], chunk: usize) -> AttentionMask {
        let l = buckets.len();
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by_key(|&i| (buckets[i], i));
        let mut slot = vec![0; l];
        for (s, &i) in order.iter().enumerate() {
            slot[i] = s;
        }
        let near = |i: usize, j: usize| {
            let (ci, cj) = (slot[i] / chunk, slot[j] / chunk);
            buckets[i] == buckets[j] && (ci == cj || ci == cj + 1)
        };
        AttentionMask::from_fn(l, |i, j| {
            let alone = !(0..l).any(|x| x != i && near(i, x));
            near(i, j) && (i != j || alone)
        })
    }

    #[test]
    fn rounds_match_bucketed_oracle() {
        let mut rng = Rng::new(11);
        let (l, d, chunk) = (32, 4, 4);
        let qk = rand(&mut rng, &[l, d]);
        let v = rand(&mut rng, &[l, d]);
        let rot = seeded_sample::<f64>(&mut rng, Distribution::Gaussian, &[3, d, 2]).unwrap();
        let rounds = lsh_attention_rounds(&qk, &v, &rot, chunk).unwrap();
        for (r, round) in rounds.iter().enumerate() {
            let rr = Tensor::from_vec(&[d, 2], rot.data()[r * d * 2..(r + 1) * d * 2].to_vec());
            assert_eq!(round.buckets, lsh_buckets(&qk, &rr).unwrap());
            let distinct: std::collections::BTreeSet<_> = round.buckets.iter().collect();
            assert!(distinct.len() > 1);
            let mask = brute_force_mask(&round.buckets, chunk);
            let want = exact_attention(&qk, &qk, &v, &mask, false).unwrap().values;
            assert!(round.output.max_abs_diff(&want) < 1e-12, "round {r}");
        }
    }

    #[test]
    fn single_bucket_is_attention_without_self() {
        let mut rng = Rng::new(12);
        let (l, d) = (16, 4);
        let qk = rand(&mut rng, &[l, d]);
        let v = rand(&mut rng, &[l, d]);
        let cfg = AttentionConfig::new(Variant::Lsh { n_hash: 1, chunk: l, n_buckets: 2 }, l, d);
        let mut params = ParamStore::new();
        params.insert("lsh_rot", Tensor::zeros(&[1, d, 1]), false).unwrap();
        let got = lsh_attention(&qk, &v, &cfg, &params).unwrap().values;
        let want = exact_attention(&qk, &qk, &v, &AttentionMask::from_fn(l, |i, j| i != j), false).unwrap().values;
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn rounds_combine_by_log_normalizer() {
        let mut rng = Rng::new(13);
        let (l, d) = (16, 4);
        let qk = rand(&mut rng, &[l, d]);
        let v = rand(&mut rng, &[l, d]);
        let rot = seeded_sample::<f64>(&mut rng, Distribution::Gaussian, &[2, d, 2]).unwrap();
        let rounds = lsh_attention_rounds(&qk, &v, &rot, 4).unwrap();
        let cfg = AttentionConfig::new(Variant::Lsh { n_hash: 2, chunk: 4, n_buckets: 4 }, l, d);
        let mut params = ParamStore::new();
        params.insert("lsh_rot", rot, false).unwrap();
        let got = lsh_attention(&qk, &v, &cfg, &params).unwrap().values;
        for i in 0..l {
            let (a, b) = (rounds[0].lse.data()[i], rounds[1].lse.data()[i]);
            let wa = 1.0 / (1.0 + (b - a).exp());
            for c in 0..d {
                let want = wa * rounds[0].output.at(&[i, c]) + (1.0 - wa) * rounds[1].output.at(&[i, c]);
                assert!((got.at(&[i, c]) - want).abs() < 1e-12);
            }
        }
    }
}
