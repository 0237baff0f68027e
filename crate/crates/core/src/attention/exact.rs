use std::rc::Rc;

use super::{scale_q, AttentionMask, AttnCtx};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Attention result for one head.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T: Scalar = f32> {
    /// `[L, d]`.
    pub values: Tensor<T>,
    /// Realized `[L, L]` weights when requested.
    pub weights: Option<Tensor<T>>,
}

/// Masked softmax attention computed densely; the reference every other
/// kernel is compared against.
pub fn exact_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    with_weights: bool,
) -> Result<AttentionOutput<T>> {
    if q.ndim() != 2 || q.shape() != k.shape() || k.shape()[0] != v.shape()[0] || v.ndim() != 2 {
        return Err(shape_err("exact_attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let l = q.shape()[0];
    if mask.len() != l {
        return Err(shape_err("exact_attention", format!("mask for {} tokens, inputs have {l}", mask.len())));
    }
    if let Some(row) = mask.empty_row() {
        return Err(Error::EmptyMaskRow { row });
    }
    let tape = Tape::new();
    let lift = |t: &Tensor<T>| tape.constant(t.reshape(&[1, t.shape()[0], t.shape()[1]]).expect("2-D"));
    let scores = scale_q(lift(q)).matmul_nt(lift(k));
    let m: Rc<Vec<bool>> = Rc::new(mask.as_slice().to_vec());
    let p = scores.masked_softmax(&m);
    let out = p.matmul(lift(v));
    tape.check()?;
    let dv = v.shape()[1];
    Ok(AttentionOutput {
        values: out.value().reshape(&[l, dv])?,
        weights: with_weights.then(|| p.value().reshape(&[l, l]).expect("square")),
    })
}

/// Dense attention on `[N, L, d]` with an optional shared pattern and the
/// context's key padding.
pub fn dense_attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    pattern: Option<&AttentionMask>,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let scores = scale_q(q).matmul_nt(k);
    let (n, l) = (ctx.rows(), ctx.len);
    if pattern.is_none() && ctx.key_valid.is_none() {
        return scores.softmax().matmul(v);
    }
    let mut m = Vec::with_capacity(n * l * l);
    for b in 0..n {
        for i in 0..l {
            for j in 0..l {
                m.push(ctx.key_ok(b, j) && pattern.map_or(true, |p| p.allows(i, j)));
            }
        }
    }
    scores.masked_softmax(&Rc::new(m)).matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_sample, Distribution, Rng};

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, shape).unwrap()
    }

    #[test]
    fn single_token_returns_its_value() {
        let q = Tensor::from_vec(&[1, 2], vec![0.3, -0.1]);
        let v = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let out = exact_attention(&q, &q, &v, &AttentionMask::full(1), false).unwrap();
        assert_eq!(out.values.data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = Rng::new(1);
        let q = rand(&mut rng, &[5, 3]);
        let k = Tensor::from_fn(&[5, 3], |i| [0.2, -0.4, 0.9][i % 3]);
        let v = rand(&mut rng, &[5, 2]);
        let out = exact_attention(&q, &k, &v, &AttentionMask::full(5), false).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..5).map(|r| v.at(&[r, c])).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((out.values.at(&[r, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = Rng::new(2);
        let (l, d) = (6, 4);
        let (q, k, v) = (rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]), rand(&mut rng, &[l, d]));
        let out = exact_attention(&q, &k, &v, &AttentionMask::full(l), true).unwrap();
        for i in 0..l {
            let s: Vec<f64> = (0..l).map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / 2.0).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..d {
                let want: f64 = (0..l).map(|j| s[j].exp() / z * v.at(&[j, c])).sum();
                assert!((out.values.at(&[i, c]) - want).abs() < 1e-12);
            }
            let row: f64 = out.weights.as_ref().unwrap().row(i).iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_rows_are_rejected() {
        let q = Tensor::<f64>::zeros(&[2, 2]);
        let m = AttentionMask::from_fn(2, |i, _| i == 0);
        assert!(matches!(exact_attention(&q, &q, &q, &m, false), Err(Error::EmptyMaskRow { row: 1 })));
    }
}
