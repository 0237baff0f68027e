//! Nyström attention with segment-mean landmarks.

use std::rc::Rc;

use super::{attend_tensors, scale_q, AttentionConfig, AttentionOutput, AttnCtx, Variant};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Batched third-order Newton–Schulz iteration for the pseudo-inverse of a
/// non-negative `a: [N, m, m]`, started from `a^T / (‖a‖₁ ‖a‖∞)` with the
/// norms maximized over the batch.
fn pinv_var<'t, T: Scalar>(a: Var<'t, T>, iters: usize) -> Var<'t, T> {
    let sh = a.shape();
    let (n, m) = (sh[0], sh[1]);
    let col = a.sum_axis(1).max_all();
    let row = a.sum_axis(2).max_all();
    let mut z = a.transpose().mul_scalar(col.mul(row).recip());
    let eye = |c: f64| {
        let t = Tensor::from_fn(&[n, m, m], |x| if (x % (m * m)) % (m + 1) == 0 { T::c(c) } else { T::zero() });
        a.tape().constant(t)
    };
    let (i7, i15, i13) = (eye(7.0), eye(15.0), eye(13.0));
    for _ in 0..iters {
        let az = a.matmul(z);
        let t = i7.sub(az);
        let t = i15.sub(az.matmul(t));
        let t = i13.sub(az.matmul(t));
        z = z.matmul(t).scale(0.25);
    }
    z
}

/// Newton–Schulz pseudo-inverse of a square non-negative matrix.
pub fn newton_schulz_pinv<T: Scalar>(a: &Tensor<T>, iters: usize) -> Result<Tensor<T>> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(shape_err("newton_schulz_pinv", format!("expected a square matrix, got {:?}", a.shape())));
    }
    if a.data().iter().any(|&x| x < T::zero()) {
        return Err(Error::InvalidArgument("newton_schulz_pinv expects non-negative entries".into()));
    }
    let m = a.shape()[0];
    let tape = Tape::new();
    let z = pinv_var(tape.constant(a.reshape(&[1, m, m])?), iters);
    tape.check()?;
    z.value().reshape(&[m, m])
}

pub(crate) fn nystrom_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    landmarks: usize,
    pinv_iters: usize,
    conv: Option<Var<'t, T>>,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (n, l) = (ctx.rows(), ctx.len);
    let d = q.dim(2);
    let m = landmarks;
    let seg = l / m;
    let qs = scale_q(q);
    let (ql, kl) = if seg == 1 {
        (qs, k)
    } else {
        (qs.reshape(&[n, m, seg, d]).mean_axis(2), k.reshape(&[n, m, seg, d]).mean_axis(2))
    };
    let a1 = qs.matmul_nt(kl).softmax();
    let a2 = ql.matmul_nt(kl).softmax();
    let s3 = ql.matmul_nt(k);
    let a3 = match &ctx.key_valid {
        Some(_) => {
            let mask: Vec<bool> = (0..n * m * l).map(|x| ctx.key_ok(x / (m * l), x % l)).collect();
            s3.masked_softmax(&Rc::new(mask))
        }
        None => s3.softmax(),
    };
    let z = pinv_var(a2, pinv_iters);
    let out = a1.matmul(z.matmul(a3.matmul(v)));
    match conv {
        Some(w) => out.add(v.conv_seq(w, ctx.heads)),
        None => out,
    }
}

/// Nyström attention on one sequence; `params` may hold `nystrom_conv`.
pub fn nystrom_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &ParamStore<T>,
) -> Result<AttentionOutput<T>> {
    if !matches!(cfg.variant, Variant::Nystrom { .. }) {
        return Err(Error::Config(format!("expected nystrom, got {}", cfg.variant.tag())));
    }
    Ok(AttentionOutput { values: attend_tensors(cfg, q, k, v, params)?, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{exact_attention, AttentionMask};
    use crate::tensor::{seeded_sample, Distribution, Rng};

    /// Gauss–Jordan inverse with partial pivoting.
    fn inverse(a: &Tensor<f64>) -> Tensor<f64> {
        let m = a.shape()[0];
        let mut aug: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.extend((0..m).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for c in 0..m {
            let p = (c..m).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap();
            aug.swap(c, p);
            let piv = aug[c][c];
            aug[c].iter_mut().for_each(|x| *x /= piv);
            for r in 0..m {
                if r != c {
                    let f = aug[r][c];
                    let src = aug[c].clone();
                    aug[r].iter_mut().zip(&src).for_each(|(x, s)| *x -= f * s);
                }
            }
        }
        Tensor::from_fn(&[m, m], |x| aug[x / m][m + x % m])
    }

    #[test]
    fn newton_schulz_matches_direct_inverse() {
        let mut rng = Rng::new(41);
        let r = seeded_sample::<f64>(&mut rng, Distribution::Uniform { low: 0.0, high: 1.0 }, &[8, 8]).unwrap();
        // positive entries and a dominant diagonal keep it well conditioned
        let a = Tensor::from_fn(&[8, 8], |x| r.data()[x] + if x % 9 == 0 { 4.0 } else { 0.0 });
        let z = newton_schulz_pinv(&a, 15).unwrap();
        assert!(z.max_abs_diff(&inverse(&a)) < 1e-4);
    }

    #[test]
    fn all_landmarks_is_exact() {
        let mut rng = Rng::new(42);
        let (l, d) = (8, 4);
        let mk = |rng: &mut Rng| seeded_sample::<f64>(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, &[l, d]).unwrap();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let cfg = AttentionConfig::new(Variant::Nystrom { landmarks: l, pinv_iters: 40, conv_kernel: 0 }, l, d);
        let got = nystrom_attention(&q, &k, &v, &cfg, &ParamStore::new()).unwrap().values;
        let want = exact_attention(&q, &k, &v, &AttentionMask::full(l), false).unwrap().values;
        assert!(got.max_abs_diff(&want) < 1e-3, "{}", got.max_abs_diff(&want));
    }
}
