//! Dense tensors, a reverse-mode tape, seeded sampling and a
//! finite-difference gradient checker.

pub mod counter;
mod gradcheck;
pub mod kernels;
mod rng;
mod scalar;
mod tape;

use std::fmt;

use crate::error::{shape_err, Error, Result};

pub use gradcheck::{finite_difference_check, GradCheck, GRAD_FLOOR};
pub use rng::{seeded_sample, Distribution, Rng};
pub use scalar::Scalar;
pub use tape::{Gradients, Mask, Tape, Var};

use kernels::MatLayout;

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown = self.data.len().min(8);
        write!(f, "Tensor<{}>{:?} {:?}", T::NAME, self.shape, &self.data[..shown])?;
        if shown < self.data.len() {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape, data).expect("data length matches shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Build from nested rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Ok(Self { shape: vec![rows.len(), w], data: rows.concat() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (&i, &s) in idx.iter().zip(&self.shape) {
            assert!(i < s, "index {idx:?} out of bounds for {:?}", self.shape);
            off = off * s + i;
        }
        self.data[off]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::c(v.f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        if self.ndim() != 2 || b.ndim() != 2 || self.shape[1] != b.shape[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape, b.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::batched_gemm(
            1,
            &self.data,
            MatLayout::new(m, k, false, 0),
            &b.data,
            MatLayout::new(k, n, false, 0),
            &mut out,
            false,
        );
        Self::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn(&[n, m], |i| self.data[(i % m) * n + i / m]))
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn row_softmax(&self) -> Self {
        let n = self.last_dim();
        let mut out = vec![T::zero(); self.len()];
        kernels::softmax_rows(&self.data, n, None, &mut out);
        Self { shape: self.shape.clone(), data: out }
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let d = self.last_dim();
        if d == 0 || gain.shape != [d] || bias.shape != [d] {
            return Err(shape_err("layer_norm", format!("x {:?}, gain {:?}, bias {:?}", self.shape, gain.shape, bias.shape)));
        }
        let rows = self.len() / d;
        let mut out = vec![T::zero(); self.len()];
        let mut xhat = vec![T::zero(); self.len()];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_rows(&self.data, d, &gain.data, &bias.data, eps, &mut out, &mut xhat, &mut rstd);
        Ok(Self { shape: self.shape.clone(), data: out })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
