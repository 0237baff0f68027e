use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖∞ / max(‖numeric‖∞, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Gradients smaller than this are compared in absolute terms; finite
/// differences cannot resolve them relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar `f(x)` with respect to `x` by central
/// differences of step `eps` on every coordinate.
pub fn finite_difference_check<T: Scalar>(
    f: impl for<'t> Fn(Var<'t, T>) -> Var<'t, T>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step must be positive, got {eps}")));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(v);
        tape.backward(out)?.wrt(v).data().iter().map(|g| g.f64()).collect::<Vec<_>>()
    };
    let eval = |p: &Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let out = f(tape.constant(p.clone()));
        tape.check()?;
        let val = out.value();
        if val.len() != 1 {
            return Err(Error::NotScalar(val.shape().to_vec()));
        }
        Ok(val.item().f64())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + T::c(eps);
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - T::c(eps);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    let max_abs_error = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(GRAD_FLOOR);
    Ok(GradCheck { max_rel_error: max_abs_error / scale, max_abs_error, analytic, numeric })
}
