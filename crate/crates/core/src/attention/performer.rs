//! Random-feature linear attention.

use super::{attend_tensors, AttentionConfig, AttentionOutput, AttnCtx, FeatureKernel, Variant};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

const DENOM_EPS: f64 = 1e-6;

/// `phi(x)` for `x: [.., n, d]` and projections `w: [r, d]`.
fn features<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, kernel: FeatureKernel) -> Var<'t, T> {
    let r = w.dim(0);
    let proj = x.matmul_nt(w);
    let inv = 1.0 / (r as f64).sqrt();
    match kernel {
        FeatureKernel::Relu => proj.relu().scale(inv),
        FeatureKernel::SoftmaxApprox => {
            let nd = x.shape().len();
            let half_sq = x.mul(x).sum_axis(nd - 1).scale(-0.5).exp();
            proj.exp().scale_rows(half_sq).scale(inv)
        }
    }
}

/// Feature map applied to the rows of `x: [n, d]`: `relu(W x)/sqrt(r)` or
/// `exp(W x - ‖x‖²/2)/sqrt(r)`.
pub fn performer_features<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, kernel: FeatureKernel) -> Result<Tensor<T>> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(shape_err("performer_features", format!("x {:?}, w {:?}", x.shape(), w.shape())));
    }
    let tape = Tape::new();
    let f = features(tape.constant(x.clone()), tape.constant(w.clone()), kernel);
    tape.check()?;
    Ok(f.value().as_ref().clone())
}

pub(crate) fn performer_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    w: Var<'t, T>,
    kernel: FeatureKernel,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let d = q.dim(2);
    let c = (d as f64).powf(-0.25);
    let fq = features(q.scale(c), w, kernel);
    let mut fk = features(k.scale(c), w, kernel);
    if ctx.key_valid.is_some() {
        let keep = Tensor::from_fn(&[n * l], |x| if ctx.key_ok(x / l, x % l) { T::one() } else { T::zero() });
        fk = fk.scale_rows(q.tape().constant(keep));
    }
    let r = w.dim(0);
    let kv = fk.matmul_tn(v);
    let ksum = fk.sum_axis(1).reshape(&[n, r, 1]);
    let num = fq.matmul(kv);
    let den = fq.matmul(ksum).reshape(&[n * l]).add_scalar(DENOM_EPS).recip();
    num.scale_rows(den)
}

/// Performer attention on one sequence; `params` must hold `performer_w`.
pub fn performer_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &ParamStore<T>,
) -> Result<AttentionOutput<T>> {
    if !matches!(cfg.variant, Variant::Performer { .. }) {
        return Err(Error::Config(format!("expected performer, got {}", cfg.variant.tag())));
    }
    Ok(AttentionOutput { values: attend_tensors(cfg, q, k, v, params)?, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_sample, Distribution, Rng};

    #[test]
    fn constant_values_pass_through() {
        let mut rng = Rng::new(51);
        let (l, d) = (10, 4);
        let q = seeded_sample::<f64>(&mut rng, Distribution::Uniform { low: -1.0, high: 1.0 }, &[l, d]).unwrap();
        let k = seeded_sample::<f64>(&mut rng, Distribution::Uniform { low: -1.0, high: 1.0 }, &[l, d]).unwrap();
        let v = Tensor::from_fn(&[l, d], |x| [0.5, -1.0, 2.0, 3.0][x % d]);
        for kernel in [FeatureKernel::Relu, FeatureKernel::SoftmaxApprox] {
            let cfg = AttentionConfig::new(Variant::Performer { features: 64, kernel }, l, d);
            let mut p = ParamStore::new();
            p.insert("performer_w", seeded_sample(&mut rng, Distribution::Gaussian, &[64, d]).unwrap(), false).unwrap();
            let out = performer_attention(&q, &k, &v, &cfg, &p).unwrap().values;
            assert!(out.max_abs_diff(&v) < 1e-4, "{kernel:?}");
        }
    }

    #[test]
    fn feature_signs() {
        let mut rng = Rng::new(52);
        let x = seeded_sample::<f64>(&mut rng, Distribution::Uniform { low: -3.0, high: 3.0 }, &[20, 4]).unwrap();
        let w = seeded_sample::<f64>(&mut rng, Distribution::Gaussian, &[16, 4]).unwrap();
        let soft = performer_features(&x, &w, FeatureKernel::SoftmaxApprox).unwrap();
        assert!(soft.data().iter().all(|&f| f > 0.0));
        let relu = performer_features(&x, &w, FeatureKernel::Relu).unwrap();
        assert!(relu.data().iter().all(|&f| f >= 0.0));
    }
}
