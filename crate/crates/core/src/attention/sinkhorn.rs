//! Sparse Sinkhorn attention: a learned soft permutation over key blocks.

use super::global::{global_key_scores, joint_softmax};
use super::{attend_tensors, scale_q, AttentionConfig, AttentionOutput, AttnCtx, Variant};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Log-space Sinkhorn: alternating row and column log-normalization of
/// `scores / temperature`, `iters` times each.
fn sinkhorn_log<'t, T: Scalar>(scores: Var<'t, T>, iters: usize, temperature: f64) -> Var<'t, T> {
    let mut x = scores.scale(1.0 / temperature);
    for _ in 0..iters {
        x = x.log_softmax();
        x = x.transpose().log_softmax().transpose();
    }
    x
}

/// Soft permutation of a square score matrix `[n, n]`.
pub fn sinkhorn_normalize<T: Scalar>(scores: &Tensor<T>, iters: usize, temperature: f64) -> Result<Tensor<T>> {
    if scores.ndim() != 2 || scores.shape()[0] != scores.shape()[1] {
        return Err(shape_err("sinkhorn_normalize", format!("expected a square matrix, got {:?}", scores.shape())));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let tape = Tape::new();
    let p = sinkhorn_log(tape.constant(scores.clone()), iters, temperature).exp();
    tape.check()?;
    Ok(p.value().as_ref().clone())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sinkhorn_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    ws: Var<'t, T>,
    block: usize,
    iters: usize,
    temperature: f64,
    hard: bool,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let d = k.dim(2);
    let nb = l / block;
    let desc = k.reshape(&[n, nb, block, d]).mean_axis(2);
    let scores = desc.matmul(ws.slice(1, 0, nb));
    let mut perm = sinkhorn_log(scores, iters, temperature).exp();
    if hard {
        let p = perm.value();
        let one_hot = Tensor::from_fn(p.shape(), |x| {
            let row = p.row(x / nb);
            let arg = (0..nb).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            if x % nb == arg {
                T::one()
            } else {
                T::zero()
            }
        });
        perm = q.tape().constant(one_hot);
    }
    attend_with_perm(q, k, v, perm, block, g, ctx)
}

fn attend_with_perm<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    perm: Var<'t, T>,
    block: usize,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let (d, vd) = (k.dim(2), v.dim(2));
    let nb = l / block;
    let kmix = perm.matmul(k.reshape(&[n, nb, block * d])).reshape(&[n * nb, block, d]);
    let vmix = perm.matmul(v.reshape(&[n, nb, block * vd])).reshape(&[n * nb, block, vd]);
    let keys = Var::concat(&[k.reshape(&[n * nb, block, d]), kmix], 1);
    let vals = Var::concat(&[v.reshape(&[n * nb, block, vd]), vmix], 1);
    let qs = scale_q(q);
    let scores = qs.reshape(&[n * nb, block, d]).matmul_nt(keys);
    let width = 2 * block;
    let mut mask = Vec::with_capacity(n * l * width);
    for b in 0..n {
        for blk in 0..nb {
            let row: Vec<bool> = (0..width)
                .map(|s| {
                    if s >= block {
                        return true;
                    }
                    let j = blk * block + s;
                    j >= g && ctx.key_ok(b, j)
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
    let out = pl.matmul(vals).reshape(&[n, l, vd]);
    match pg {
        Some(pg) => out.add(pg.reshape(&[n, l, g]).matmul(v.slice(1, 0, g))),
        None => out,
    }
}

/// Sinkhorn attention on one sequence with a caller-supplied block
/// permutation `perm: [L/block, L/block]` in place of the learned one.
pub fn sinkhorn_attend_with_perm<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    perm: &Tensor<T>,
    block: usize,
) -> Result<Tensor<T>> {
    let (l, d) = (q.shape()[0], q.shape()[1]);
    if block == 0 || l % block != 0 {
        return Err(Error::Config(format!("block {block} must divide L={l}")));
    }
    let nb = l / block;
    if perm.shape() != [nb, nb] || k.shape() != q.shape() || v.shape()[0] != l {
        return Err(shape_err("sinkhorn_attend_with_perm", format!("perm {:?} for {nb} blocks", perm.shape())));
    }
    let vd = v.shape()[1];
    let tape = Tape::new();
    let out = attend_with_perm(
        tape.constant(q.reshape(&[1, l, d])?),
        tape.constant(k.reshape(&[1, l, d])?),
        tape.constant(v.reshape(&[1, l, vd])?),
        tape.constant(perm.reshape(&[1, nb, nb])?),
        block,
        0,
        &AttnCtx::single(l),
    );
    tape.check()?;
    out.value().reshape(&[l, vd])
}

/// Sinkhorn attention on one sequence; `params` must hold `sinkhorn_w`.
pub fn sinkhorn_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &ParamStore<T>,
) -> Result<AttentionOutput<T>> {
    if !matches!(cfg.variant, Variant::Sinkhorn { .. }) {
        return Err(Error::Config(format!("expected sinkhorn, got {}", cfg.variant.tag())));
    }
    Ok(AttentionOutput { values: attend_tensors(cfg, q, k, v, params)?, weights: None })
}
