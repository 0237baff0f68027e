use super::global::{global_key_scores, joint_softmax};
use super::{attend_tensors, scale_q, AttentionConfig, AttentionOutput, AttnCtx, Variant};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor, Var};

/// `softmax(Q (E K)^T / sqrt(d)) (E V)` with one projection `E` shared by
/// keys and values. `e` is stored at the maximum length and cropped to
/// `[L / ratio, L]`.
pub(crate) fn linformer_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    e: Var<'t, T>,
    ratio: usize,
    g: usize,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let kk = l / ratio;
    let e = if e.shape() == [kk, l] { e } else { e.slice(0, 0, kk).slice(1, 0, l) };
    let kp = e.matmul(k);
    let vp = e.matmul(v);
    let qs = scale_q(q);
    let scores = qs.matmul_nt(kp);
    let mask = vec![true; n * l * kk];
    let global = (g > 0).then(|| global_key_scores(qs, k, g, ctx));
    let (pl, pg) = joint_softmax(scores, mask, global);
    let out = pl.matmul(vp);
    match pg {
        Some(pg) => out.add(pg.matmul(v.slice(1, 0, g))),
        None => out,
    }
}

/// Linformer attention on one sequence; `params` must hold `linformer_e`.
pub fn linformer_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &ParamStore<T>,
) -> Result<AttentionOutput<T>> {
    if !matches!(cfg.variant, Variant::Linformer { .. }) {
        return Err(Error::Config(format!("expected linformer, got {}", cfg.variant.tag())));
    }
    Ok(AttentionOutput { values: attend_tensors(cfg, q, k, v, params)?, weights: None })
}
