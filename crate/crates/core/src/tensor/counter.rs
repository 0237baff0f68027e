//! Instrumented flop counter.
//!
//! Every counted primitive reports its cost here while a measurement is
//! active on the current thread. The counted set is:
//!
//! * contractions (matmul, banded products, sequence convolution): 2 per
//!   multiply-accumulate
//! * softmax, log-softmax and log-sum-exp: 4 per input element
//! * elementwise exp, tanh and gelu: 4 per element
//! * layer norm: 8 per element
//!
//! Cheap elementwise arithmetic, reductions and data movement are free.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<Option<u64>> = const { Cell::new(None) };
}

pub const MAC: u64 = 2;
pub const SOFTMAX: u64 = 4;
pub const TRANSCENDENTAL: u64 = 4;
pub const LAYER_NORM: u64 = 8;

#[inline]
pub fn add(flops: u64) {
    ACTIVE.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + flops));
        }
    });
}

/// Runs `f` and returns its result together with the flops it reported.
/// Nested measurements are not supported; the inner one wins.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = ACTIVE.with(|c| c.replace(Some(0)));
    let out = f();
    let total = ACTIVE.with(|c| c.replace(prev)).unwrap_or(0);
    (out, total)
}
