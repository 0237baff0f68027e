use std::rc::Rc;

use super::{scale_q, AttnCtx};
use crate::tensor::{Mask, Scalar, Var};

/// Full-row attention for the first `g` queries: `[N, g, d]`.
pub fn global_rows<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, g: usize, ctx: &AttnCtx) -> Var<'t, T> {
    let scores = scale_q(q.slice(1, 0, g)).matmul_nt(k);
    let (n, l) = (ctx.rows(), ctx.len);
    let p = if ctx.key_valid.is_some() {
        let m: Vec<bool> = (0..n * g * l).map(|x| ctx.key_ok(x / (g * l), x % l)).collect();
        scores.masked_softmax(&Rc::new(m))
    } else {
        scores.softmax()
    };
    p.matmul(v)
}

/// Scores of already-scaled queries `[N, R, d]` against the `g` global keys,
/// plus the per-entry key validity in the same `[N, R, g]` layout.
pub(crate) fn global_key_scores<'t, T: Scalar>(
    qs: Var<'t, T>,
    k: Var<'t, T>,
    g: usize,
    ctx: &AttnCtx,
) -> (Var<'t, T>, Vec<bool>) {
    let rows = qs.dim(1);
    let s = qs.matmul_nt(k.slice(1, 0, g));
    let valid = (0..ctx.rows() * rows * g).map(|x| ctx.key_ok(x / (rows * g), x % g)).collect();
    (s, valid)
}

/// Joint masked softmax over `[local | global]` score columns; returns the
/// two weight blocks.
pub(crate) fn joint_softmax<'t, T: Scalar>(
    local: Var<'t, T>,
    local_mask: Vec<bool>,
    global: Option<(Var<'t, T>, Vec<bool>)>,
) -> (Var<'t, T>, Option<Var<'t, T>>) {
    let Some((gs, gmask)) = global else {
        let m: Mask = Rc::new(local_mask);
        return (local.masked_softmax(&m), None);
    };
    let sh = local.shape();
    let nd = sh.len();
    let (wl, wg) = (sh[nd - 1], gs.dim(nd - 1));
    let rows = local_mask.len() / wl.max(1);
    let mut m = Vec::with_capacity(rows * (wl + wg));
    for r in 0..rows {
        m.extend_from_slice(&local_mask[r * wl..(r + 1) * wl]);
        m.extend_from_slice(&gmask[r * wg..(r + 1) * wg]);
    }
    let p = Var::concat(&[local, gs], nd - 1).masked_softmax(&Rc::new(m));
    (p.slice(nd - 1, 0, wl), Some(p.slice(nd - 1, wl, wl + wg)))
}
