use super::{attend, attention_specs, AttentionConfig, AttnCtx, AttnVars, Variant};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{Scalar, Tensor, Var};

/// Projection weights for one attention block of model width `dim`, plus the
/// variant's own parameters. Hashed attention shares queries and keys, so it
/// has no key projection.
pub fn multi_head_specs(cfg: &AttentionConfig, dim: usize, max_len: usize, prefix: &str) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let shared_qk = matches!(cfg.variant, Variant::Lsh { .. });
    for p in ["q", "k", "v", "o"] {
        if p == "k" && shared_qk {
            continue;
        }
        specs.push(ParamSpec::new(format!("{prefix}w{p}"), &[dim, dim], Init::Normal(0.02)));
        specs.push(ParamSpec::new(format!("{prefix}b{p}"), &[dim], Init::Zeros));
    }
    specs.extend(attention_specs(cfg, max_len, prefix));
    specs
}

fn split_heads<'t, T: Scalar>(x: Var<'t, T>, b: usize, l: usize, h: usize) -> Var<'t, T> {
    let d = x.dim(2) / h;
    x.reshape(&[b, l, h, d]).permute(&[0, 2, 1, 3]).reshape(&[b * h, l, d])
}

/// Projects `x: [B, L, D]` to per-head queries, keys and values, runs the
/// configured variant and projects the concatenated heads back.
/// Padding rows of Q/K/V are zeroed so outputs cannot depend on pad ids.
pub fn multi_head<'t, T: Scalar>(
    cfg: &AttentionConfig,
    x: Var<'t, T>,
    params: &Bound<'t, T>,
    prefix: &str,
    ctx: &AttnCtx,
) -> Var<'t, T> {
    let (b, l, dim) = (x.dim(0), x.dim(1), x.dim(2));
    let h = cfg.n_heads;
    assert_eq!(dim % h, 0, "model width {dim} not divisible by {h} heads");
    let proj = |p: &str| x.matmul(params.get(&format!("{prefix}w{p}"))).add_bias(params.get(&format!("{prefix}b{p}")));
    let keep = ctx.key_valid.as_ref().map(|valid| {
        let t = Tensor::from_fn(&[b * h * l], |x| {
            let (row, i) = (x / l, x % l);
            if valid[(row / h) * l + i] {
                T::one()
            } else {
                T::zero()
            }
        });
        x.tape().constant(t)
    });
    let heads = |v: Var<'t, T>| {
        let s = split_heads(v, b, l, h);
        match keep {
            Some(m) => s.scale_rows(m),
            None => s,
        }
    };
    let q = heads(proj("q"));
    let k = if matches!(cfg.variant, Variant::Lsh { .. }) { q } else { heads(proj("k")) };
    let v = heads(proj("v"));
    let vars = AttnVars::from_bound(params, prefix);
    let hctx = AttnCtx { batch: b, heads: h, len: l, key_valid: ctx.key_valid.clone() };
    let out = attend(cfg, q, k, v, &hctx, &vars);
    let merged = out.reshape(&[b, h, l, dim / h]).permute(&[0, 2, 1, 3]).reshape(&[b, l, dim]);
    merged.matmul(params.get(&format!("{prefix}wo"))).add_bias(params.get(&format!("{prefix}bo")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{exact_attention, AttentionMask};
    use crate::params::ParamStore;
    use crate::tensor::{seeded_sample, Distribution, Rng, Tape};

    #[test]
    fn matches_hand_composition() {
        let mut rng = Rng::new(71);
        let (l, dim, h) = (6, 8, 2);
        let cfg = AttentionConfig::new(Variant::Exact, l, dim / h).heads(h);
        let mut store = ParamStore::<f64>::init(&multi_head_specs(&cfg, dim, l, "a."), &mut rng).unwrap();
        for name in ["a.bq", "a.bk", "a.bv", "a.bo"] {
            store.set(name, seeded_sample(&mut rng, Distribution::Gaussian, &[dim]).unwrap()).unwrap();
        }
        let x = seeded_sample::<f64>(&mut rng, Distribution::Gaussian, &[l, dim]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = multi_head(&cfg, tape.constant(x.reshape(&[1, l, dim]).unwrap()), &bound, "a.", &AttnCtx::new(1, h, l));
        let out = out.value().reshape(&[l, dim]).unwrap();

        let lin = |w: &str, bias: &str| {
            let mut y = x.matmul(store.get(w).unwrap()).unwrap();
            let bb = store.get(bias).unwrap().data().to_vec();
            y.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += bb[i % dim]);
            y
        };
        let (q, k, v) = (lin("a.wq", "a.bq"), lin("a.wk", "a.bk"), lin("a.wv", "a.bv"));
        let dh = dim / h;
        let mut cat = Tensor::<f64>::zeros(&[l, dim]);
        for head in 0..h {
            let cols = |t: &Tensor<f64>| Tensor::from_fn(&[l, dh], |x| t.at(&[x / dh, head * dh + x % dh]));
            let o = exact_attention(&cols(&q), &cols(&k), &cols(&v), &AttentionMask::full(l), false).unwrap().values;
            for i in 0..l {
                for c in 0..dh {
                    cat.data_mut()[i * dim + head * dh + c] = o.at(&[i, c]);
                }
            }
        }
        let mut want = cat.matmul(store.get("a.wo").unwrap()).unwrap();
        let bo = store.get("a.bo").unwrap().data().to_vec();
        want.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += bo[i % dim]);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn duplicated_heads_agree() {
        let mut rng = Rng::new(72);
        let (l, dim, h) = (8, 8, 2);
        let dh = dim / h;
        let cfg = AttentionConfig::new(Variant::Exact, l, dh).heads(h);
        let mut store = ParamStore::<f64>::init(&multi_head_specs(&cfg, dim, l, ""), &mut rng).unwrap();
        // copy head 0's projection columns into head 1
        for w in ["wq", "wk", "wv"] {
            let t = store.get(w).unwrap().clone();
            let dup = Tensor::from_fn(&[dim, dim], |x| {
                let (r, c) = (x / dim, x % dim);
                t.at(&[r, c % dh])
            });
            store.set(w, dup).unwrap();
        }
        store.set("wo", Tensor::eye(dim)).unwrap();
        let x = seeded_sample::<f64>(&mut rng, Distribution::Gaussian, &[1, l, dim]).unwrap();
        let tape = Tape::new();
        let out = multi_head(&cfg, tape.constant(x), &store.bind(&tape), "", &AttnCtx::new(1, h, l)).value();
        for i in 0..l {
            for c in 0..dh {
                assert!((out.at(&[0, i, c]) - out.at(&[0, i, dh + c])).abs() < 1e-14);
            }
        }
    }
}
