use super::{Bound, CheckOptions, CheckResult};
use crate::attention::{
    build_mask, exact_attention, linformer_attention, long_short_attention, lsh_attention, nystrom_attention,
    sinkhorn_attend_with_perm, AttentionConfig, AttentionMask, Overlap, Variant,
};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{seeded_sample, Distribution, Rng, Tensor};

const TRIALS: usize = 5;
const NYSTROM_ITERS: usize = 40;

fn qkv(rng: &mut Rng, l: usize, d: usize) -> Result<[Tensor<f64>; 3]> {
    let mut mk = || seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, &[l, d]);
    Ok([mk()?, mk()?, mk()?])
}

fn one(name: &str, t: Tensor<f64>) -> Result<ParamStore<f64>> {
    let mut p = ParamStore::new();
    p.insert(name, t, true)?;
    Ok(p)
}

fn blockwise_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, block: usize) -> Result<Tensor<f64>> {
    let (l, d) = (q.shape()[0], q.shape()[1]);
    let cfg = AttentionConfig::new(Variant::Blockwise { block, overlap: Overlap::None }, l, d);
    Ok(exact_attention(q, k, v, &build_mask(&cfg)?, false)?.values)
}

/// Settings under which an approximate variant must reduce to an exact
/// target: identity Linformer projection, Long-Short without landmarks,
/// Nyström with every token a landmark, LSH with a single bucket, and
/// Sinkhorn with the identity block permutation. All in double precision.
pub fn limit_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed ^ 0x11417);
    let mut out = Vec::new();
    let mut run = |tag: &str, name: &str, tol: f64, f: &mut dyn FnMut(&mut Rng, usize) -> Result<f64>| -> Result<()> {
        if !opts.covers(tag) {
            return Ok(());
        }
        let mut worst = 0.0f64;
        for t in 0..TRIALS {
            worst = worst.max(f(&mut rng, t)?);
        }
        out.push(CheckResult::new(name, worst, Bound::AtMost(tol)));
        Ok(())
    };

    run("linformer", "linformer identity projection vs dense", 1e-6, &mut |rng, t| {
        let (l, d) = (8 << (t % 3), 4);
        let [q, k, v] = qkv(rng, l, d)?;
        let cfg = AttentionConfig::new(Variant::Linformer { ratio: 1 }, l, d);
        let got = linformer_attention(&q, &k, &v, &cfg, &one("linformer_e", Tensor::eye(l))?)?.values;
        Ok(got.max_abs_diff(&exact_attention(&q, &k, &v, &AttentionMask::full(l), false)?.values))
    })?;

    run("long_short", "long_short without landmarks vs blockwise", 1e-6, &mut |rng, t| {
        let (b, d) = (4 << (t % 2), 4);
        let l = 4 * b;
        let [q, k, v] = qkv(rng, l, d)?;
        let cfg = AttentionConfig::new(Variant::LongShort { block: b, landmarks: 0 }, l, d);
        let got = long_short_attention(&q, &k, &v, &cfg, &ParamStore::new())?.values;
        Ok(got.max_abs_diff(&blockwise_oracle(&q, &k, &v, b)?))
    })?;

    run("nystrom", "nystrom with all landmarks vs dense", 1e-3, &mut |rng, t| {
        let (l, d) = (8 + 4 * (t % 3), 4);
        let [q, k, v] = qkv(rng, l, d)?;
        let cfg = AttentionConfig::new(Variant::Nystrom { landmarks: l, pinv_iters: NYSTROM_ITERS, conv_kernel: 0 }, l, d);
        let got = nystrom_attention(&q, &k, &v, &cfg, &ParamStore::new())?.values;
        Ok(got.max_abs_diff(&exact_attention(&q, &k, &v, &AttentionMask::full(l), false)?.values))
    })?;

    run("lsh", "lsh single bucket vs dense without self", 1e-5, &mut |rng, t| {
        let (l, d) = (8 << (t % 3), 4);
        let [qk, _, v] = qkv(rng, l, d)?;
        let cfg = AttentionConfig::new(Variant::Lsh { n_hash: 1, chunk: l, n_buckets: 2 }, l, d);
        // zero projections put every token in bucket 0
        let got = lsh_attention(&qk, &v, &cfg, &one("lsh_rot", Tensor::zeros(&[1, d, 1]))?)?.values;
        let mask = AttentionMask::from_fn(l, |i, j| i != j);
        Ok(got.max_abs_diff(&exact_attention(&qk, &qk, &v, &mask, false)?.values))
    })?;

    run("sinkhorn", "sinkhorn identity permutation vs blockwise", 1e-6, &mut |rng, t| {
        let (b, d) = (2 << (t % 3), 4);
        let l = 4 * b;
        let [q, k, v] = qkv(rng, l, d)?;
        let got = sinkhorn_attend_with_perm(&q, &k, &v, &Tensor::eye(l / b), b)?;
        Ok(got.max_abs_diff(&blockwise_oracle(&q, &k, &v, b)?))
    })?;
    Ok(out)
}
