use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Seeded pseudo-random stream. Identical seeds give identical streams on
/// every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a shard: seed xor shard index.
    pub fn derive(&self, shard: u64) -> Self {
        Self::new(self.seed ^ shard.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    /// Standard normal.
    Gaussian,
    /// Gaussian with the given standard deviation.
    Normal { std: f64 },
    Uniform { low: f64, high: f64 },
    Bernoulli(f64),
}

pub fn seeded_sample<T: Scalar>(rng: &mut Rng, dist: Distribution, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = match dist {
        Distribution::Gaussian => (0..n).map(|_| T::c(rng.normal())).collect(),
        Distribution::Normal { std } => (0..n).map(|_| T::c(std * rng.normal())).collect(),
        Distribution::Uniform { low, high } => {
            if !(low <= high) {
                return Err(Error::InvalidArgument(format!("uniform bounds {low} > {high}")));
            }
            (0..n).map(|_| T::c(low + (high - low) * rng.uniform())).collect()
        }
        Distribution::Bernoulli(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("bernoulli p={p} outside [0,1]")));
            }
            (0..n).map(|_| if rng.bernoulli(p) { T::one() } else { T::zero() }).collect()
        }
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f32> = seeded_sample(&mut Rng::new(42), Distribution::Gaussian, &[5, 3]).unwrap();
        let b: Tensor<f32> = seeded_sample(&mut Rng::new(42), Distribution::Gaussian, &[5, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bernoulli_edges() {
        let z: Tensor<f64> = seeded_sample(&mut Rng::new(1), Distribution::Bernoulli(0.0), &[100]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(seeded_sample::<f64>(&mut Rng::new(1), Distribution::Bernoulli(1.5), &[1]).is_err());
        assert!(seeded_sample::<f64>(&mut Rng::new(1), Distribution::Bernoulli(-0.1), &[1]).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let x: Tensor<f64> = seeded_sample(&mut Rng::new(5), Distribution::Gaussian, &[100_000]).unwrap();
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn derived_streams_differ() {
        let base = Rng::new(9);
        let mut a = base.derive(0);
        let mut b = base.derive(1);
        assert_ne!(a.uniform(), b.uniform());
    }
}
