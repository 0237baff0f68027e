//! Slice-level numeric routines shared by [`Tensor`](super::Tensor) methods
//! and tape operations. Costs are reported to the flop counter here.

use super::counter;
use super::Scalar;

/// Layout of one matrix operand inside a batched product.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    /// Operand is used transposed.
    pub trans: bool,
    /// Elements between consecutive batch items; 0 broadcasts one matrix.
    pub batch_stride: usize,
}

impl MatLayout {
    pub fn new(rows: usize, cols: usize, trans: bool, batch_stride: usize) -> Self {
        Self { rows, cols, trans, batch_stride }
    }

    /// Logical (rows, cols) after the optional transpose.
    pub fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c[i] (+)= op(a[i]) * op(b[i])` for `i in 0..batch`; `c` is dense.
pub fn batched_gemm<T: Scalar>(
    batch: usize,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    c: &mut [T],
    accumulate: bool,
) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "inner extents differ");
    assert!(c.len() >= batch * m * n);
    counter::add(counter::MAC * (batch * m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..batch * m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    for i in 0..batch {
        let ao = i * la.batch_stride;
        let bo = i * lb.batch_stride;
        assert!(ao + la.rows * la.cols <= a.len());
        assert!(bo + lb.rows * lb.cols <= b.len());
        let cs = &mut c[i * m * n..(i + 1) * m * n];
        // SAFETY: extents checked above; matrixmultiply reads within them.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.as_ptr().add(ao),
                rsa,
                csa,
                b.as_ptr().add(bo),
                rsb,
                csb,
                beta,
                cs.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Value used as the log-normalizer of a row with no allowed entries.
pub fn empty_lse<T: Scalar>() -> T {
    T::c(-1e30)
}

/// Row softmax over the last axis of width `n`. Masked entries (mask
/// `false`) get weight 0; a fully masked row becomes all zeros.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize, mask: Option<&[bool]>, out: &mut [T]) {
    counter::add(counter::SOFTMAX * x.len() as u64);
    if n == 0 {
        return;
    }
    for (r, (xr, or)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mr = mask.map(|m| &m[r * n..(r + 1) * n]);
        let mut mx = T::neg_infinity();
        for j in 0..n {
            if mr.map_or(true, |m| m[j]) && xr[j] > mx {
                mx = xr[j];
            }
        }
        if mx == T::neg_infinity() {
            or.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut s = T::zero();
        for j in 0..n {
            let e = if mr.map_or(true, |m| m[j]) { (xr[j] - mx).exp() } else { T::zero() };
            or[j] = e;
            s += e;
        }
        let inv = T::one() / s;
        or.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Per-row log-sum-exp over allowed entries.
pub fn logsumexp_rows<T: Scalar>(x: &[T], n: usize, mask: Option<&[bool]>, out: &mut [T]) {
    counter::add(counter::SOFTMAX * x.len() as u64);
    for (r, xr) in x.chunks_exact(n).enumerate() {
        let mr = mask.map(|m| &m[r * n..(r + 1) * n]);
        let mut mx = T::neg_infinity();
        for j in 0..n {
            if mr.map_or(true, |m| m[j]) && xr[j] > mx {
                mx = xr[j];
            }
        }
        if mx == T::neg_infinity() {
            out[r] = empty_lse();
            continue;
        }
        let mut s = T::zero();
        for j in 0..n {
            if mr.map_or(true, |m| m[j]) {
                s += (xr[j] - mx).exp();
            }
        }
        out[r] = mx + s.ln();
    }
}

/// Row log-softmax (unmasked).
pub fn log_softmax_rows<T: Scalar>(x: &[T], n: usize, out: &mut [T]) {
    counter::add(counter::SOFTMAX * x.len() as u64);
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = xr.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + s.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Layer norm over rows of width `d`; writes the normalized (pre-affine)
/// values to `xhat` and the per-row inverse standard deviation to `rstd`.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    counter::add(counter::LAYER_NORM * x.len() as u64);
    let inv_d = T::one() / T::c(d as f64);
    for (r, xr) in x.chunks_exact(d).enumerate() {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
}

/// `tanh` through a single `exp`; cheaper than the libm routine for `f32`.
#[inline]
fn tanh_exp<T: Scalar>(x: T) -> T {
    if x.abs() > T::c(15.0) {
        return x.signum();
    }
    let e = (x + x).exp();
    (e - T::one()) / (e + T::one())
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let inner = c * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + tanh_exp(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + T::c(0.044715) * x2 * x);
    let t = tanh_exp(inner);
    let dinner = c * (T::one() + T::c(3.0 * 0.044715) * x2);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}
