//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::backward`] walks the nodes in reverse creation
//! order (a valid reverse topological order) and accumulates vector-Jacobian
//! products additively into each input.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use super::counter;
use super::kernels::{self, MatLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Boolean attendance mask shared between the forward value and its
/// backward closure. `true` keeps the entry.
pub type Mask = Rc<Vec<bool>>;

type Idx = Rc<Vec<Option<usize>>>;

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    ScaleRows(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Recip(usize),
    Bmm { a: usize, b: usize, batch: usize, la: MatLayout, lb: MatLayout },
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp { x: usize, mask: Option<Mask> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Rc<Vec<T>>, rstd: Rc<Vec<T>> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    SumAll(usize),
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    MaxAll { x: usize, at: usize },
    Gather { x: usize, idx: Idx, row: usize },
    Concat { xs: Vec<usize>, outer: usize, widths: Vec<usize>, inner: usize },
    Slice { x: usize, outer: usize, full: usize, start: usize, len: usize, inner: usize },
    Pick { x: usize, idx: Rc<Vec<usize>> },
    BandScores { q: usize, k: usize, n: usize, l: usize, d: usize, w: usize },
    BandApply { p: usize, v: usize, n: usize, l: usize, d: usize, w: usize },
    ConvSeq { v: usize, w: usize, heads: usize, l: usize, d: usize, k: usize },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    grad: bool,
    name: &'static str,
}

/// Record of evaluated operations. Confined to one thread.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    non_finite: Cell<Option<usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, keyed by leaf variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when the loss does not
    /// depend on `v`.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads
            .get_mut(v.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), non_finite: Cell::new(None) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, t: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push_arc(t.into(), Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push_arc(t.into(), Op::Leaf, false, "constant")
    }

    /// Error describing the first operation that produced NaN/Inf, if any.
    pub fn check(&self) -> Result<()> {
        match self.non_finite.get() {
            None => Ok(()),
            Some(id) => Err(Error::NonFinite { op: self.nodes.borrow()[id].name.to_string() }),
        }
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, grad: bool, name: &'static str) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(id));
        }
        nodes.push(Node { value, op, grad, name });
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize], name: &'static str) -> Var<'_, T> {
        let grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].grad)
        };
        self.push_arc(Arc::new(value), op, grad, name)
    }

    fn val(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.check()?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&nodes[i].op, g) {
                (Op::Leaf, Some(g)) if nodes[i].grad => Some(Tensor::from_vec(nodes[i].value.shape(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    let v = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            acc(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            acc(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddBias(x, b) => {
            acc(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            let n = v(*b).len();
            acc(grads, nodes, *b, |s| {
                for row in g.chunks_exact(n) {
                    s.iter_mut().zip(row).for_each(|(s, &g)| *s += g);
                }
            });
        }
        Op::ScaleRows(x, sc) => {
            let (xv, sv) = (v(*x).data(), v(*sc).data());
            let d = xv.len() / sv.len().max(1);
            acc(grads, nodes, *x, |s| {
                for (r, (sr, gr)) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).enumerate() {
                    sr.iter_mut().zip(gr).for_each(|(s, &g)| *s += g * sv[r]);
                }
            });
            acc(grads, nodes, *sc, |s| {
                for (r, (xr, gr)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    s[r] += xr.iter().zip(gr).map(|(&x, &g)| x * g).sum::<T>();
                }
            });
        }
        Op::MulScalar(x, sc) => {
            let (xv, sv) = (v(*x).data(), v(*sc).item());
            acc(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * sv));
            acc(grads, nodes, *sc, |s| s[0] += xv.iter().zip(g).map(|(&x, &g)| x * g).sum::<T>());
        }
        Op::Scale(x, c) => acc(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)),
        Op::Shift(x) => acc(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
        Op::Relu(x) => {
            let xv = v(*x).data();
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    if xv[i] > T::zero() {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = v(*x).data();
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            });
        }
        Op::Tanh(x) => {
            let y = out.data();
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (T::one() - y[i] * y[i]);
                }
            });
        }
        Op::Exp(x) => {
            let y = out.data();
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::Recip(x) => {
            let y = out.data();
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * y[i] * y[i];
                }
            });
        }
        Op::Bmm { a, b, batch, la, lb } => bmm_backward(nodes, grads, *a, *b, *batch, *la, *lb, g),
        Op::Softmax(x) => {
            let y = out.data();
            let n = out.last_dim();
            acc(grads, nodes, *x, |s| {
                for ((sr, yr), gr) in s.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for j in 0..n {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let y = out.data();
            let n = out.last_dim();
            acc(grads, nodes, *x, |s| {
                for ((sr, yr), gr) in s.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let tot: T = gr.iter().copied().sum();
                    for j in 0..n {
                        sr[j] += gr[j] - yr[j].exp() * tot;
                    }
                }
            });
        }
        Op::LogSumExp { x, mask } => {
            let xv = v(*x);
            let n = xv.last_dim();
            let lse = out.data();
            let empty = kernels::empty_lse::<T>();
            acc(grads, nodes, *x, |s| {
                for (r, (sr, xr)) in s.chunks_exact_mut(n).zip(xv.data().chunks_exact(n)).enumerate() {
                    if lse[r] == empty {
                        continue;
                    }
                    for j in 0..n {
                        if mask.as_ref().map_or(true, |m| m[r * n + j]) {
                            sr[j] += g[r] * (xr[j] - lse[r]).exp();
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = out.last_dim();
            let gv = v(*gain).data();
            let dt = T::c(d as f64);
            acc(grads, nodes, *x, |s| {
                for (r, (sr, gr)) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..d {
                        let gg = gr[j] * gv[j];
                        sum_g += gg;
                        sum_gx += gg * xh[j];
                    }
                    for j in 0..d {
                        let gg = gr[j] * gv[j];
                        sr[j] += rstd[r] / dt * (dt * gg - sum_g - xh[j] * sum_gx);
                    }
                }
            });
            acc(grads, nodes, *gain, |s| {
                for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        s[j] += gr[j] * xh[j];
                    }
                }
            });
            acc(grads, nodes, *bias, |s| {
                for gr in g.chunks_exact(d) {
                    s.iter_mut().zip(gr).for_each(|(s, &g)| *s += g);
                }
            });
        }
        Op::Reshape(x) => acc(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
        Op::Permute { x, perm } => {
            let in_shape = v(*x).shape().to_vec();
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gd = permute_data(g, out.shape(), &inv);
            debug_assert_eq!(gd.len(), in_shape.iter().product::<usize>());
            acc(grads, nodes, *x, |s| s.iter_mut().zip(&gd).for_each(|(s, &g)| *s += g));
        }
        Op::SumAll(x) => acc(grads, nodes, *x, |s| s.iter_mut().for_each(|s| *s += g[0])),
        Op::SumAxis { x, outer, len, inner } => acc(grads, nodes, *x, |s| {
            for o in 0..*outer {
                for a in 0..*len {
                    for i in 0..*inner {
                        s[(o * len + a) * inner + i] += g[o * inner + i];
                    }
                }
            }
        }),
        Op::MaxAll { x, at } => acc(grads, nodes, *x, |s| s[*at] += g[0]),
        Op::Gather { x, idx, row } => acc(grads, nodes, *x, |s| {
            for (o, src) in idx.iter().enumerate() {
                if let Some(src) = src {
                    let dst = &mut s[src * row..(src + 1) * row];
                    dst.iter_mut().zip(&g[o * row..(o + 1) * row]).for_each(|(s, &g)| *s += g);
                }
            }
        }),
        Op::Concat { xs, outer, widths, inner } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (&x, &w) in xs.iter().zip(widths) {
                acc(grads, nodes, x, |s| {
                    for o in 0..*outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + w) * inner];
                        s[o * w * inner..(o + 1) * w * inner].iter_mut().zip(src).for_each(|(s, &g)| *s += g);
                    }
                });
                off += w;
            }
        }
        Op::Slice { x, outer, full, start, len, inner } => acc(grads, nodes, *x, |s| {
            for o in 0..*outer {
                let dst = &mut s[(o * full + start) * inner..(o * full + start + len) * inner];
                dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]).for_each(|(s, &g)| *s += g);
            }
        }),
        Op::Pick { x, idx } => acc(grads, nodes, *x, |s| {
            for (o, &i) in idx.iter().enumerate() {
                s[i] += g[o];
            }
        }),
        Op::BandScores { q, k, n, l, d, w } => {
            let (qv, kv) = (v(*q).data(), v(*k).data());
            let (n, l, d, w) = (*n, *l, *d, *w);
            let width = 2 * w + 1;
            counter::add(2 * counter::MAC * (n * l * width * d) as u64);
            acc(grads, nodes, *q, |s| {
                for b in 0..n {
                    for i in 0..l {
                        let sq = &mut s[(b * l + i) * d..(b * l + i + 1) * d];
                        for t in 0..width {
                            let Some(j) = (i + t).checked_sub(w).filter(|&j| j < l) else { continue };
                            let gg = g[(b * l + i) * width + t];
                            let kr = &kv[(b * l + j) * d..(b * l + j + 1) * d];
                            sq.iter_mut().zip(kr).for_each(|(s, &k)| *s += gg * k);
                        }
                    }
                }
            });
            acc(grads, nodes, *k, |s| {
                for b in 0..n {
                    for i in 0..l {
                        let qr = &qv[(b * l + i) * d..(b * l + i + 1) * d];
                        for t in 0..width {
                            let Some(j) = (i + t).checked_sub(w).filter(|&j| j < l) else { continue };
                            let gg = g[(b * l + i) * width + t];
                            let sk = &mut s[(b * l + j) * d..(b * l + j + 1) * d];
                            sk.iter_mut().zip(qr).for_each(|(s, &q)| *s += gg * q);
                        }
                    }
                }
            });
        }
        Op::BandApply { p, v: vv, n, l, d, w } => {
            let (pv, vd) = (v(*p).data(), v(*vv).data());
            let (n, l, d, w) = (*n, *l, *d, *w);
            let width = 2 * w + 1;
            counter::add(2 * counter::MAC * (n * l * width * d) as u64);
            acc(grads, nodes, *p, |s| {
                for b in 0..n {
                    for i in 0..l {
                        let gr = &g[(b * l + i) * d..(b * l + i + 1) * d];
                        for t in 0..width {
                            let Some(j) = (i + t).checked_sub(w).filter(|&j| j < l) else { continue };
                            let vr = &vd[(b * l + j) * d..(b * l + j + 1) * d];
                            s[(b * l + i) * width + t] += gr.iter().zip(vr).map(|(&g, &v)| g * v).sum::<T>();
                        }
                    }
                }
            });
            acc(grads, nodes, *vv, |s| {
                for b in 0..n {
                    for i in 0..l {
                        let gr = &g[(b * l + i) * d..(b * l + i + 1) * d];
                        for t in 0..width {
                            let Some(j) = (i + t).checked_sub(w).filter(|&j| j < l) else { continue };
                            let pp = pv[(b * l + i) * width + t];
                            let sv = &mut s[(b * l + j) * d..(b * l + j + 1) * d];
                            sv.iter_mut().zip(gr).for_each(|(s, &g)| *s += pp * g);
                        }
                    }
                }
            });
        }
        Op::ConvSeq { v: vv, w, heads, l, d, k } => {
            let (vd, wd) = (v(*vv).data(), v(*w).data());
            let (heads, l, d, k) = (*heads, *l, *d, *k);
            let n = vd.len() / (l * d);
            let half = k / 2;
            acc(grads, nodes, *vv, |s| {
                for b in 0..n {
                    let h = b % heads;
                    for i in 0..l {
                        let gr = &g[(b * l + i) * d..(b * l + i + 1) * d];
                        for t in 0..k {
                            let Some(j) = (i + t).checked_sub(half).filter(|&j| j < l) else { continue };
                            let ww = wd[h * k + t];
                            let sv = &mut s[(b * l + j) * d..(b * l + j + 1) * d];
                            sv.iter_mut().zip(gr).for_each(|(s, &g)| *s += ww * g);
                        }
                    }
                }
            });
            acc(grads, nodes, *w, |s| {
                for b in 0..n {
                    let h = b % heads;
                    for i in 0..l {
                        let gr = &g[(b * l + i) * d..(b * l + i + 1) * d];
                        for t in 0..k {
                            let Some(j) = (i + t).checked_sub(half).filter(|&j| j < l) else { continue };
                            let vr = &vd[(b * l + j) * d..(b * l + j + 1) * d];
                            s[h * k + t] += gr.iter().zip(vr).map(|(&g, &v)| g * v).sum::<T>();
                        }
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bmm_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
    batch: usize,
    la: MatLayout,
    lb: MatLayout,
    g: &[T],
) {
    let av = nodes[a].value.clone();
    let bv = nodes[b].value.clone();
    let (m, _) = la.logical();
    let (_, n) = lb.logical();
    let one = |l: MatLayout, trans: bool| MatLayout { trans, batch_stride: 0, ..l };
    let lg = MatLayout::new(m, n, false, 0);
    let asz = la.rows * la.cols;
    let bsz = lb.rows * lb.cols;
    acc(grads, nodes, a, |s| {
        for i in 0..batch {
            let (ao, bo, go) = (i * la.batch_stride, i * lb.batch_stride, i * m * n);
            let dst = &mut s[ao..ao + asz];
            let (bi, gi) = (&bv.data()[bo..bo + bsz], &g[go..go + m * n]);
            if la.trans {
                kernels::batched_gemm(1, bi, one(lb, lb.trans), gi, one(lg, true), dst, true);
            } else {
                kernels::batched_gemm(1, gi, lg, bi, one(lb, !lb.trans), dst, true);
            }
        }
    });
    acc(grads, nodes, b, |s| {
        for i in 0..batch {
            let (ao, bo, go) = (i * la.batch_stride, i * lb.batch_stride, i * m * n);
            let dst = &mut s[bo..bo + bsz];
            let (ai, gi) = (&av.data()[ao..ao + asz], &g[go..go + m * n]);
            if lb.trans {
                kernels::batched_gemm(1, gi, one(lg, true), ai, one(la, la.trans), dst, true);
            } else {
                kernels::batched_gemm(1, ai, one(la, !la.trans), gi, lg, dst, true);
            }
        }
    });
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Innermost output axis is walked as a strided run.
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = out_strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..run {
            out.push(data[off]);
            off += run_stride;
        }
        // advance outer index
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.tape.nodes.borrow()[self.id].value.shape()[axis]
    }

    fn unary(self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let x = self.value();
        let out = x.map(f);
        self.tape.push(out, op, &[self.id], name)
    }

    fn binary(self, other: Self, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        let out = a.zip_map(&b, f).expect("same shape");
        self.tape.push(out, op, &[self.id, other.id], name)
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `x[.., n] + b[n]`.
    pub fn add_bias(self, b: Self) -> Self {
        let (x, bv) = (self.value(), b.value());
        let n = bv.len();
        assert_eq!(x.last_dim(), n, "add_bias: bias width");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
        }
        self.tape.push(out, Op::AddBias(self.id, b.id), &[self.id, b.id], "add_bias")
    }

    /// Multiplies each last-axis row of `x` by the matching entry of `s`.
    pub fn scale_rows(self, s: Self) -> Self {
        let (x, sv) = (self.value(), s.value());
        assert!(!sv.is_empty() && x.len() % sv.len() == 0, "scale_rows: {:?} vs {:?}", x.shape(), sv.shape());
        let d = x.len() / sv.len();
        let mut out = x.as_ref().clone();
        for (row, &f) in out.data_mut().chunks_exact_mut(d).zip(sv.data()) {
            row.iter_mut().for_each(|o| *o *= f);
        }
        self.tape.push(out, Op::ScaleRows(self.id, s.id), &[self.id, s.id], "scale_rows")
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar(self, s: Self) -> Self {
        let sv = s.value();
        assert_eq!(sv.len(), 1, "mul_scalar needs a scalar");
        let f = sv.item();
        let out = self.value().map(|v| v * f);
        self.tape.push(out, Op::MulScalar(self.id, s.id), &[self.id, s.id], "mul_scalar")
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::c(c);
        self.unary("scale", Op::Scale(self.id, c), move |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::c(c);
        self.unary("add_scalar", Op::Shift(self.id), move |v| v + c)
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Self {
        self.unary("relu", Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn gelu(self) -> Self {
        counter::add(counter::TRANSCENDENTAL * self.value().len() as u64);
        self.unary("gelu", Op::Gelu(self.id), kernels::gelu)
    }

    pub fn tanh(self) -> Self {
        counter::add(counter::TRANSCENDENTAL * self.value().len() as u64);
        self.unary("tanh", Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn exp(self) -> Self {
        counter::add(counter::TRANSCENDENTAL * self.value().len() as u64);
        self.unary("exp", Op::Exp(self.id), |v| v.exp())
    }

    pub fn recip(self) -> Self {
        self.unary("recip", Op::Recip(self.id), |v| T::one() / v)
    }

    /// Batched matrix product over matching leading axes; `b` may also be a
    /// plain 2-D matrix shared across the batch. `ta`/`tb` transpose the
    /// last two axes of the respective operand.
    pub fn bmm(self, b: Self, ta: bool, tb: bool) -> Self {
        let (av, bv) = (self.value(), b.value());
        let (ash, bsh) = (av.shape(), bv.shape());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "bmm needs matrices: {ash:?} x {bsh:?}");
        let (ar, ac) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch_shape = &ash[..ash.len() - 2];
        let batch: usize = batch_shape.iter().product();
        let b_batch: usize = bsh[..bsh.len() - 2].iter().product();
        let b_bcast = bsh.len() == 2 && batch > 1;
        let a_bcast = ash.len() == 2 && bsh.len() > 2;
        let (batch, batch_shape) = if a_bcast { (b_batch, &bsh[..bsh.len() - 2]) } else { (batch, batch_shape) };
        assert!(b_bcast || a_bcast || b_batch == batch, "bmm batch mismatch: {ash:?} x {bsh:?}");
        let la = MatLayout::new(ar, ac, ta, if a_bcast { 0 } else { ar * ac });
        let lb = MatLayout::new(br, bc, tb, if b_bcast { 0 } else { br * bc });
        let (m, k) = la.logical();
        let (k2, n) = lb.logical();
        assert_eq!(k, k2, "bmm inner extents: {ash:?}{} x {bsh:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" });
        let mut out = vec![T::zero(); batch * m * n];
        kernels::batched_gemm(batch, av.data(), la, bv.data(), lb, &mut out, false);
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        self.tape.push(Tensor::from_vec(&shape, out), Op::Bmm { a: self.id, b: b.id, batch, la, lb }, &[self.id, b.id], "matmul")
    }

    pub fn matmul(self, b: Self) -> Self {
        self.bmm(b, false, false)
    }

    /// `self · bᵀ`.
    pub fn matmul_nt(self, b: Self) -> Self {
        self.bmm(b, false, true)
    }

    /// `selfᵀ · b`.
    pub fn matmul_tn(self, b: Self) -> Self {
        self.bmm(b, true, false)
    }

    pub fn softmax(self) -> Self {
        let x = self.value();
        let mut out = vec![T::zero(); x.len()];
        kernels::softmax_rows(x.data(), x.last_dim(), None, &mut out);
        self.tape.push(Tensor::from_vec(x.shape(), out), Op::Softmax(self.id), &[self.id], "softmax")
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true; masked entries are exactly zero.
    pub fn masked_softmax(self, mask: &Mask) -> Self {
        let x = self.value();
        assert_eq!(mask.len(), x.len(), "mask size");
        let mut out = vec![T::zero(); x.len()];
        kernels::softmax_rows(x.data(), x.last_dim(), Some(mask), &mut out);
        self.tape.push(Tensor::from_vec(x.shape(), out), Op::Softmax(self.id), &[self.id], "masked_softmax")
    }

    pub fn log_softmax(self) -> Self {
        let x = self.value();
        let mut out = vec![T::zero(); x.len()];
        kernels::log_softmax_rows(x.data(), x.last_dim(), &mut out);
        self.tape.push(Tensor::from_vec(x.shape(), out), Op::LogSoftmax(self.id), &[self.id], "log_softmax")
    }

    /// Log-sum-exp over the last axis (optionally masked); drops that axis.
    pub fn logsumexp(self, mask: Option<&Mask>) -> Self {
        let x = self.value();
        let n = x.last_dim();
        let rows = x.len() / n.max(1);
        let mut out = vec![T::zero(); rows];
        kernels::logsumexp_rows(x.data(), n, mask.map(|m| m.as_slice()), &mut out);
        let shape = &x.shape()[..x.ndim() - 1];
        self.tape.push(
            Tensor::from_vec(shape, out),
            Op::LogSumExp { x: self.id, mask: mask.cloned() },
            &[self.id],
            "logsumexp",
        )
    }

    pub fn layer_norm(self, gain: Self, bias: Self, eps: f64) -> Self {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = x.last_dim();
        assert!(gv.shape() == [d] && bv.shape() == [d], "layer_norm parameter shapes");
        let rows = x.len() / d;
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_rows(x.data(), d, gv.data(), bv.data(), T::c(eps), &mut out, &mut xhat, &mut rstd);
        self.tape.push(
            Tensor::from_vec(x.shape(), out),
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat: Rc::new(xhat), rstd: Rc::new(rstd) },
            &[self.id, gain.id, bias.id],
            "layer_norm",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let x = self.value();
        let out = Tensor::new(shape, x.data().to_vec()).unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", x.shape()));
        self.tape.push(out, Op::Reshape(self.id), &[self.id], "reshape")
    }

    pub fn permute(self, perm: &[usize]) -> Self {
        let x = self.value();
        assert_eq!(perm.len(), x.ndim(), "permute rank");
        let data = permute_data(x.data(), x.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        self.tape.push(Tensor::from_vec(&shape, data), Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id], "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Self {
        let nd = self.shape().len();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(self, axis: usize) -> Self {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.push(Tensor::from_vec(&shape, out), Op::SumAxis { x: self.id, outer, len, inner }, &[self.id], "sum_axis")
    }

    pub fn mean_axis(self, axis: usize) -> Self {
        let len = self.dim(axis);
        self.sum_axis(axis).scale(1.0 / len as f64)
    }

    /// Largest entry (gradient flows to the first maximizer).
    pub fn max_all(self) -> Self {
        let x = self.value();
        let (at, &m) = x
            .data()
            .iter()
            .enumerate()
            .fold((0, &x.data()[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        self.tape.push(Tensor::scalar(m), Op::MaxAll { x: self.id, at }, &[self.id], "max")
    }

    /// Gathers rows along axis 0; `None` yields a zero row.
    pub fn gather_rows(self, idx: Rc<Vec<Option<usize>>>) -> Self {
        let x = self.value();
        let rows = x.shape()[0];
        let row = x.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * row);
        for src in idx.iter() {
            match src {
                Some(s) => {
                    assert!(*s < rows, "gather index {s} >= {rows}");
                    out.extend_from_slice(&x.data()[s * row..(s + 1) * row]);
                }
                None => out.extend(std::iter::repeat(T::zero()).take(row)),
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        self.tape.push(Tensor::from_vec(&shape, out), Op::Gather { x: self.id, idx, row }, &[self.id], "gather")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(Var::value).collect();
        let first = vals[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                let s = v.shape();
                assert!(
                    s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                    "concat shapes {:?} vs {first:?}",
                    s
                );
                s[axis]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(Tensor::from_vec(&shape, out), Op::Concat { xs: ids.clone(), outer, widths, inner }, &ids, "concat")
    }

    /// Sub-range `start..end` of one axis.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Self {
        let x = self.value();
        let (outer, full, inner) = split_axis(x.shape(), axis);
        assert!(start <= end && end <= full, "slice {start}..{end} of {full}");
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            Tensor::from_vec(&shape, out),
            Op::Slice { x: self.id, outer, full, start, len, inner },
            &[self.id],
            "slice",
        )
    }

    /// Flat-index element gather, returning a 1-D tensor.
    pub fn pick(self, idx: Rc<Vec<usize>>) -> Self {
        let x = self.value();
        let out: Vec<T> = idx.iter().map(|&i| x.data()[i]).collect();
        let n = out.len();
        self.tape.push(Tensor::from_vec(&[n], out), Op::Pick { x: self.id, idx }, &[self.id], "pick")
    }

    /// Banded scores `s[b,i,t] = q[b,i]·k[b,i+t-w]` for `t in 0..=2w`; entries
    /// outside the sequence are 0 and must be masked by the caller.
    pub fn band_scores(self, k: Self, w: usize) -> Self {
        let (qv, kv) = (self.value(), k.value());
        assert_eq!(qv.shape(), kv.shape(), "band_scores shapes");
        assert_eq!(qv.ndim(), 3, "band_scores expects [n, l, d]");
        let (n, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let width = 2 * w + 1;
        counter::add(counter::MAC * (n * l * width * d) as u64);
        let mut out = vec![T::zero(); n * l * width];
        for b in 0..n {
            for i in 0..l {
                let qr = &qv.data()[(b * l + i) * d..(b * l + i + 1) * d];
                let lo = i.saturating_sub(w);
                let hi = (i + w).min(l - 1);
                let orow = &mut out[(b * l + i) * width..(b * l + i + 1) * width];
                for j in lo..=hi {
                    let kr = &kv.data()[(b * l + j) * d..(b * l + j + 1) * d];
                    orow[j + w - i] = dot(qr, kr);
                }
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, l, width], out),
            Op::BandScores { q: self.id, k: k.id, n, l, d, w },
            &[self.id, k.id],
            "band_scores",
        )
    }

    /// Banded weighted sum `o[b,i] = Σ_t p[b,i,t]·v[b,i+t-w]`.
    pub fn band_apply(self, v: Self, w: usize) -> Self {
        let (pv, vv) = (self.value(), v.value());
        assert_eq!(vv.ndim(), 3, "band_apply expects v [n, l, d]");
        let (n, l, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        let width = 2 * w + 1;
        assert_eq!(pv.shape(), [n, l, width], "band_apply weights shape");
        counter::add(counter::MAC * (n * l * width * d) as u64);
        let mut out = vec![T::zero(); n * l * d];
        for b in 0..n {
            for i in 0..l {
                let prow = &pv.data()[(b * l + i) * width..(b * l + i + 1) * width];
                let orow = &mut out[(b * l + i) * d..(b * l + i + 1) * d];
                let lo = i.saturating_sub(w);
                let hi = (i + w).min(l - 1);
                for j in lo..=hi {
                    let p = prow[j + w - i];
                    let vr = &vv.data()[(b * l + j) * d..(b * l + j + 1) * d];
                    orow.iter_mut().zip(vr).for_each(|(o, &v)| *o += p * v);
                }
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, l, d], out),
            Op::BandApply { p: self.id, v: v.id, n, l, d, w },
            &[self.id, v.id],
            "band_apply",
        )
    }

    /// Depthwise convolution along the sequence axis of `[n, l, d]` with one
    /// odd-width kernel per head (`weights: [heads, k]`, head = row % heads),
    /// zero padded.
    pub fn conv_seq(self, weights: Self, heads: usize) -> Self {
        let (vv, wv) = (self.value(), weights.value());
        assert_eq!(vv.ndim(), 3, "conv_seq expects [n, l, d]");
        assert_eq!(wv.ndim(), 2, "conv_seq weights [heads, k]");
        let (n, l, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        let k = wv.shape()[1];
        assert!(k % 2 == 1 && wv.shape()[0] == heads && n % heads == 0, "conv_seq configuration");
        counter::add(counter::MAC * (n * l * d * k) as u64);
        let half = k / 2;
        let mut out = vec![T::zero(); n * l * d];
        for b in 0..n {
            let h = b % heads;
            for i in 0..l {
                let orow = &mut out[(b * l + i) * d..(b * l + i + 1) * d];
                for t in 0..k {
                    let Some(j) = (i + t).checked_sub(half).filter(|&j| j < l) else { continue };
                    let ww = wv.data()[h * k + t];
                    let vr = &vv.data()[(b * l + j) * d..(b * l + j + 1) * d];
                    orow.iter_mut().zip(vr).for_each(|(o, &v)| *o += ww * v);
                }
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, l, d], out),
            Op::ConvSeq { v: self.id, w: weights.id, heads, l, d, k },
            &[self.id, weights.id],
            "conv_seq",
        )
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for u in 0..4 {
            acc[u] += a[c * 4 + u] * b[c * 4 + u];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, seeded_sample, Distribution, Rng};

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, shape).unwrap()
    }

    fn check(x: &Tensor<f64>, f: impl Fn(Var<'_, f64>) -> Var<'_, f64>) -> f64 {
        finite_difference_check(|v| f(v), x, 1e-5).unwrap().max_rel_error
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
        let g = tape.backward(x.mul(x).sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y = x.add(x).add(x.scale(2.0)).sum();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let other = Tape::<f64>::new();
        let y = other.param(Tensor::zeros(&[1]));
        assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn non_finite_is_surfaced() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(&[1], vec![0.0]));
        let y = x.recip().sum();
        assert!(matches!(tape.backward(y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let x = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let g = tape.backward(c.mul(x).sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = Rng::new(1);
        let x = rand(&mut rng, &[4, 5]);
        assert!(check(&x, |v| v.gelu().sum()) < 1e-6);
        assert!(check(&x, |v| v.tanh().mul(v.exp()).sum()) < 1e-6);
        assert!(check(&x, |v| v.add_scalar(3.0).recip().sum()) < 1e-6);
        assert!(check(&x, |v| v.softmax().mul(v).sum()) < 1e-6);
        assert!(check(&x, |v| v.log_softmax().mul(v).sum()) < 1e-6);
        assert!(check(&x, |v| v.logsumexp(None).mul(v.slice(1, 0, 1).reshape(&[4])).sum()) < 1e-6);
        assert!(check(&x, |v| v.max_all().add(v.sum_axis(0).mean())) < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_and_differentiates() {
        let mut rng = Rng::new(2);
        let x = rand(&mut rng, &[3, 4]);
        let mask: Mask = Rc::new((0..12).map(|i| i % 3 != 1).collect());
        let tape = Tape::<f64>::new();
        let y = tape.constant(x.clone()).masked_softmax(&mask).value();
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for i in 0..12 {
            if !mask[i] {
                assert_eq!(y.data()[i], 0.0);
            }
        }
        let m2 = mask.clone();
        assert!(check(&x, move |v| v.masked_softmax(&m2).mul(v).sum()) < 1e-6);
        let m3 = mask.clone();
        assert!(check(&x, move |v| v.logsumexp(Some(&m3)).sum()) < 1e-6);
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        let mut rng = Rng::new(3);
        let a = rand(&mut rng, &[2, 3, 4]);
        let b = rand(&mut rng, &[2, 4, 5]);
        let bt = rand(&mut rng, &[2, 5, 4]);
        let w = rand(&mut rng, &[4, 5]);
        let bb = b.clone();
        assert!(check(&a, move |v| v.matmul(v.tape().constant(bb.clone())).tanh().sum()) < 1e-6);
        let aa = a.clone();
        assert!(check(&b, move |v| v.tape().constant(aa.clone()).matmul(v).tanh().sum()) < 1e-6);
        let aa = a.clone();
        assert!(check(&bt, move |v| v.tape().constant(aa.clone()).matmul_nt(v).tanh().sum()) < 1e-6);
        let aa = a.clone();
        assert!(check(&aa.clone(), move |v| v.matmul_tn(v.tape().constant(aa.clone())).tanh().sum()) < 1e-6);
        // broadcast weight
        let aa = a.clone();
        assert!(check(&w, move |v| v.tape().constant(aa.clone()).matmul(v).tanh().sum()) < 1e-6);
        let ww = w.clone();
        assert!(check(&a, move |v| v.matmul(v.tape().constant(ww.clone())).tanh().sum()) < 1e-6);
    }

    #[test]
    fn structural_gradients() {
        let mut rng = Rng::new(4);
        let x = rand(&mut rng, &[2, 3, 4]);
        let wts = rand(&mut rng, &[4, 3, 2]);
        assert!(check(&x, move |v| v.permute(&[2, 1, 0]).mul(v.tape().constant(wts.clone())).sum()) < 1e-6);
        assert!(check(&x, |v| Var::concat(&[v.slice(2, 0, 1).tanh(), v.slice(2, 1, 4).exp()], 2).sum_axis(1).tanh().sum()) < 1e-6);
        let idx = Rc::new(vec![Some(1), None, Some(0), Some(1)]);
        assert!(check(&x, move |v| v.gather_rows(idx.clone()).tanh().sum()) < 1e-6);
        let pk = Rc::new(vec![0, 5, 5, 23]);
        assert!(check(&x, move |v| v.pick(pk.clone()).exp().sum()) < 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng::new(5);
        let x = rand(&mut rng, &[3, 6]);
        let g = rand(&mut rng, &[6]);
        let b = rand(&mut rng, &[6]);
        let w = rand(&mut rng, &[3, 6]);
        let (g1, b1, w1) = (g.clone(), b.clone(), w.clone());
        assert!(
            check(&x, move |v| {
                let t = v.tape();
                v.layer_norm(t.constant(g1.clone()), t.constant(b1.clone()), 1e-5).mul(t.constant(w1.clone())).sum()
            }) < 1e-6
        );
        let (x1, b1, w1) = (x.clone(), b.clone(), w.clone());
        assert!(
            check(&g, move |v| {
                let t = v.tape();
                t.constant(x1.clone()).layer_norm(v, t.constant(b1.clone()), 1e-5).mul(t.constant(w1.clone())).sum()
            }) < 1e-6
        );
    }

    #[test]
    fn band_and_conv_gradients() {
        let mut rng = Rng::new(6);
        let q = rand(&mut rng, &[2, 7, 3]);
        let k = rand(&mut rng, &[2, 7, 3]);
        let p = rand(&mut rng, &[2, 7, 5]);
        let kw = rand(&mut rng, &[2, 3]);
        let k1 = k.clone();
        assert!(check(&q, move |v| v.band_scores(v.tape().constant(k1.clone()), 2).tanh().sum()) < 1e-6);
        let q1 = q.clone();
        assert!(check(&k, move |v| v.tape().constant(q1.clone()).band_scores(v, 2).tanh().sum()) < 1e-6);
        let v1 = k.clone();
        assert!(check(&p, move |v| v.band_apply(v.tape().constant(v1.clone()), 2).tanh().sum()) < 1e-6);
        let p1 = p.clone();
        assert!(check(&k, move |v| v.tape().constant(p1.clone()).band_apply(v, 2).tanh().sum()) < 1e-6);
        let kw1 = kw.clone();
        assert!(check(&q, move |v| v.conv_seq(v.tape().constant(kw1.clone()), 2).tanh().sum()) < 1e-6);
        let q1 = q.clone();
        assert!(check(&kw, move |v| v.tape().constant(q1.clone()).conv_seq(v, 2).tanh().sum()) < 1e-6);
    }

    #[test]
    fn band_scores_match_dense() {
        let mut rng = Rng::new(8);
        let q = rand(&mut rng, &[1, 6, 2]);
        let k = rand(&mut rng, &[1, 6, 2]);
        let tape = Tape::<f64>::new();
        let s = tape.constant(q.clone()).band_scores(tape.constant(k.clone()), 1).value();
        for i in 0..6usize {
            for t in 0..3usize {
                let j = i as isize + t as isize - 1;
                let want = if (0..6).contains(&j) {
                    (0..2).map(|c| q.at(&[0, i, c]) * k.at(&[0, j as usize, c])).sum()
                } else {
                    0.0
                };
                assert!((s.at(&[0, i, t]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn scaling_op_gradients() {
        let mut rng = Rng::new(9);
        let x = rand(&mut rng, &[3, 4]);
        let s = rand(&mut rng, &[3]);
        let s1 = s.clone();
        assert!(check(&x, move |v| v.scale_rows(v.tape().constant(s1.clone())).tanh().sum()) < 1e-6);
        let x1 = x.clone();
        assert!(check(&s, move |v| v.tape().constant(x1.clone()).scale_rows(v).tanh().sum()) < 1e-6);
        let x1 = x.clone();
        let c = Tensor::from_vec(&[1], vec![0.7]);
        assert!(check(&c, move |v| v.tape().constant(x1.clone()).mul_scalar(v).tanh().sum()) < 1e-6);
        let b = rand(&mut rng, &[4]);
        let x1 = x.clone();
        assert!(check(&b, move |v| v.tape().constant(x1.clone()).add_bias(v).tanh().sum()) < 1e-6);
        assert!(check(&x, |v| v.relu().add(v.neg().relu().scale(0.5)).sum()) < 1e-6);
    }
}
