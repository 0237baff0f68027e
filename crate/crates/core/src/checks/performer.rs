use super::{Bound, CheckOptions, CheckResult};
use crate::attention::{performer_features, FeatureKernel};
use crate::error::Result;
use crate::tensor::{seeded_sample, Distribution, Rng, Tensor};

const DIM: usize = 8;

/// Mean relative error of the positive random-feature estimate
/// `phi(q) . phi(k)` against `exp(q . k)` over `pairs` random pairs, with
/// `features` Gaussian projections. Query and key entries are drawn from
/// `N(0, 1/d)`.
pub fn performer_kernel_error(features: usize, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let w = seeded_sample::<f64>(&mut rng, Distribution::Gaussian, &[features, DIM])?;
    let std = (1.0 / DIM as f64).sqrt();
    let q = seeded_sample::<f64>(&mut rng, Distribution::Normal { std }, &[pairs, DIM])?;
    let k = seeded_sample::<f64>(&mut rng, Distribution::Normal { std }, &[pairs, DIM])?;
    let (fq, fk) = (performer_features(&q, &w, FeatureKernel::SoftmaxApprox)?, performer_features(&k, &w, FeatureKernel::SoftmaxApprox)?);
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>, i: usize| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum::<f64>();
    let total: f64 = (0..pairs)
        .map(|i| {
            let want = dot(&q, &k, i).exp();
            (dot(&fq, &fk, i) - want).abs() / want
        })
        .sum();
    Ok(total / pairs as f64)
}

pub fn performer_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    if !opts.covers("performer") {
        return Ok(Vec::new());
    }
    let err = performer_kernel_error(opts.performer_features, opts.performer_pairs, opts.seed ^ 0xfea7)?;
    Ok(vec![CheckResult::new(
        format!("softmax kernel estimate, r={} d={DIM}: mean relative error", opts.performer_features),
        err,
        Bound::AtMost(0.1),
    )])
}
