//! Reverse-mode automatic differentiation on f64 tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in topological
//! order; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients. Every op stores the closure it needs for its own backward pass,
//! so the tape itself stays generic. All values are `f64` so analytic
//! gradients can be validated against central finite differences at tight
//! tolerances.
//!
//! The tape is rebuilt on every forward pass (define-by-run). Model
//! parameters live outside the tape in a [`crate::nn::ParamStore`] and are
//! inserted as leaves each pass.

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub type TensorData = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&TensorData, &mut dyn FnMut(usize, TensorData))>;

struct Node {
    value: Rc<TensorData>,
    backward: Option<BackwardFn>,
}

/// Records one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`]. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    pub(crate) id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads {
    by_node: Vec<Option<TensorData>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&TensorData> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_by_id(&self, id: usize) -> Option<&TensorData> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    pub fn take_by_id(&mut self, id: usize) -> Option<TensorData> {
        self.by_node.get_mut(id).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Insert a leaf node (input or parameter).
    pub fn var(&self, value: TensorData) -> Var<'_> {
        self.push(value, None)
    }

    pub(crate) fn push(&self, value: TensorData, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), backward });
        Var { tape: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuild a `Var` from a node id recorded earlier in the same pass.
    pub fn restore(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node id out of range");
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<TensorData> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Backpropagate from a scalar (0-d or single-element) node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let seed = &nodes[loss.id].value;
        assert!(seed.len() == 1, "backward seed must be a scalar, got shape {:?}", seed.shape());
        let mut by_node: Vec<Option<TensorData>> = vec![None; nodes.len()];
        by_node[loss.id] = Some(ArrayD::ones(seed.raw_dim()));
        for id in (0..=loss.id).rev() {
            let Some(grad) = by_node[id].take() else { continue };
            if let Some(backward) = &nodes[id].backward {
                backward(&grad, &mut |parent, g| {
                    debug_assert!(parent < id, "tape order violated: {parent} >= {id}");
                    match &mut by_node[parent] {
                        Some(acc) => *acc += &g,
                        slot @ None => *slot = Some(g),
                    }
                });
            }
            by_node[id] = Some(grad);
        }
        Grads { by_node }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<TensorData> {
        self.tape.value_of(self.id)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub(crate) fn tape_ref(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert!(v.len() == 1, "not a scalar: shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        binary_same_shape(self, other, |a, b| a + b, |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        binary_same_shape(self, other, |a, b| a - b, |g| (g.clone(), g.mapv(|x| -x)))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = &*a * &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g * &*b);
                sink(ib, g * &*a);
            })),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().mapv(|x| x * c);
        let id = self.id;
        self.tape.push(out, Some(Box::new(move |g, sink| sink(id, g.mapv(|x| x * c)))))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value();
        let out = v.mapv(|x| x.max(0.0));
        let id = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&v, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                sink(id, gx);
            })),
        )
    }

    /// Elementwise product with a constant tensor (dropout masks etc.).
    pub fn mul_const(self, mask: TensorData) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape(), mask.shape(), "mul_const shape mismatch");
        let out = &*v * &mask;
        let id = self.id;
        self.tape.push(out, Some(Box::new(move |g, sink| sink(id, g * &mask))))
    }

    /// `[N, D] + [D]` with the row vector broadcast over rows.
    pub fn add_rowvec(self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 2);
        assert_eq!(b.ndim(), 1);
        assert_eq!(x.shape()[1], b.shape()[0], "bias length mismatch");
        let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
        let out = (&x2 + &b.view().insert_axis(Axis(0))).into_dyn();
        let (ix, ib) = (self.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ix, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink(ib, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be rank 2");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be rank 2");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (ia, ib) = (self.id, other.id);
        let (ra, rb) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = ra.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = rb.view().into_dimensionality::<Ix2>().unwrap();
                sink(ia, g2.dot(&b2.t()).into_dyn());
                sink(ib, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old = v.shape().to_vec();
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape element count mismatch");
        let out = v
            .to_shape(IxDyn(shape))
            .expect("reshape requires standard layout")
            .to_owned();
        let id = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(id, g.to_shape(IxDyn(&old)).unwrap().to_owned());
            })),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = self.value();
        let total = v.sum();
        let shape = v.shape().to_vec();
        let id = self.id;
        self.tape.push(
            scalar(total),
            Some(Box::new(move |g, sink| {
                let gv = g[[]];
                sink(id, ArrayD::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

pub fn scalar(x: f64) -> TensorData {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn binary_same_shape<'t>(
    a: Var<'t>,
    b: Var<'t>,
    fwd: impl Fn(&TensorData, &TensorData) -> TensorData,
    bwd: impl Fn(&TensorData) -> (TensorData, TensorData) + 'static,
) -> Var<'t> {
    let (va, vb) = (a.value(), b.value());
    assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
    let out = fwd(&va, &vb);
    let (ia, ib) = (a.id, b.id);
    a.tape.push(
        out,
        Some(Box::new(move |g, sink| {
            let (ga, gb) = bwd(g);
            sink(ia, ga);
            sink(ib, gb);
        })),
    )
}

/// Concatenate rank-2 tensors `[N, D_i]` along axis 1.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of empty list");
    let tape = parts[0].tape;
    let values: Vec<Rc<TensorData>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values
        .iter()
        .map(|v| v.view().into_dimensionality::<Ix2>().expect("concat_cols needs rank 2"))
        .collect();
    let rows = views[0].shape()[0];
    for v in &views {
        assert_eq!(v.shape()[0], rows, "concat_cols row mismatch");
    }
    let widths: Vec<usize> = views.iter().map(|v| v.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    // Built by assignment so the result is guaranteed standard layout.
    let mut out = ndarray::Array2::<f64>::zeros((rows, total));
    let mut start = 0;
    for v in &views {
        let w = v.shape()[1];
        out.slice_mut(ndarray::s![.., start..start + w]).assign(v);
        start += w;
    }
    let out = out.into_dyn();
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(
        out,
        Some(Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut start = 0;
            for (i, &w) in widths.iter().enumerate() {
                let slice = g2.slice(ndarray::s![.., start..start + w]).to_owned();
                sink(ids[i], slice.into_dyn());
                start += w;
            }
        })),
    )
}

/// Sum a list of same-shape tensors.
pub fn add_n<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = acc.add(*p);
    }
    acc
}

/// 2D convolution on `[N, C, H, W]` with weight `[OC, C, KH, KW]`.
///
/// Implemented as im2col + matmul; backward recomputes the column buffer
/// from the saved input instead of caching it for the whole batch.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    assert!(stride >= 1);
    let xv = x.value();
    let wv = weight.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv2d input must be rank 4");
    let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d weight must be rank 4");
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (oc, wc, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    assert_eq!(c, wc, "conv2d channel mismatch");
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    assert!(oh >= 1 && ow >= 1, "conv2d output collapsed to zero: {h}x{w} k{kh} s{stride} p{pad}");

    let wmat = w4.to_shape((oc, c * kh * kw)).unwrap().to_owned();
    let mut out = ndarray::Array4::<f64>::zeros((n, oc, oh, ow));
    for i in 0..n {
        let col = im2col(&x4.index_axis(Axis(0), i), kh, kw, stride, pad, oh, ow);
        let y = wmat.dot(&col); // [OC, OH*OW]
        out.index_axis_mut(Axis(0), i)
            .assign(&y.into_shape_with_order((oc, oh, ow)).unwrap());
    }

    let (ix, iw) = (x.id, weight.id);
    let (rx, rw) = (Rc::clone(&xv), Rc::clone(&wv));
    x.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let x4 = rx.view().into_dimensionality::<Ix4>().unwrap();
            let w4 = rw.view().into_dimensionality::<Ix4>().unwrap();
            let wmat = w4.to_shape((oc, c * kh * kw)).unwrap().to_owned();
            let mut gw = ndarray::Array2::<f64>::zeros((oc, c * kh * kw));
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                let gy = g4
                    .index_axis(Axis(0), i)
                    .to_shape((oc, oh * ow))
                    .unwrap()
                    .to_owned();
                let col = im2col(&x4.index_axis(Axis(0), i), kh, kw, stride, pad, oh, ow);
                gw += &gy.dot(&col.t());
                let gcol = wmat.t().dot(&gy); // [C*KH*KW, OH*OW]
                col2im(&gcol, &mut gx.index_axis_mut(Axis(0), i), kh, kw, stride, pad, oh, ow);
            }
            sink(ix, gx.into_dyn());
            sink(
                iw,
                gw.into_shape_with_order((oc, c, kh, kw)).unwrap().into_dyn(),
            );
        })),
    )
}

pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad).saturating_sub(k) / stride + 1
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = ndarray::Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let hi = (oi * stride + ki) as isize - pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let wi = (oj * stride + kj) as isize - pad as isize;
                        if wi < 0 || wi >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ci, hi as usize, wi as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &ndarray::Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let hi = (oi * stride + ki) as isize - pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let wi = (oj * stride + kj) as isize - pad as isize;
                        if wi < 0 || wi >= w as isize {
                            continue;
                        }
                        gx[[ci, hi as usize, wi as usize]] += col[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}

/// Non-overlapping average pooling with `k == stride` on `[N, C, H, W]`.
pub fn avg_pool2d<'t>(x: Var<'t>, k: usize) -> Var<'t> {
    assert!(k >= 1);
    let xv = x.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("avg_pool2d input must be rank 4");
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (oh, ow) = (h / k, w / k);
    assert!(oh >= 1 && ow >= 1, "avg_pool2d output collapsed to zero");
    let mut out = ndarray::Array4::<f64>::zeros((n, c, oh, ow));
    let inv = 1.0 / (k * k) as f64;
    for i in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            s += x4[[i, ci, oi * k + ki, oj * k + kj]];
                        }
                    }
                    out[[i, ci, oi, oj]] = s * inv;
                }
            }
        }
    }
    let id = x.id;
    x.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                for ci in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let gv = g4[[i, ci, oi, oj]] * inv;
                            for ki in 0..k {
                                for kj in 0..k {
                                    gx[[i, ci, oi * k + ki, oj * k + kj]] += gv;
                                }
                            }
                        }
                    }
                }
            }
            sink(id, gx.into_dyn());
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of a scalar-valued graph with respect to one
    /// leaf. `f` rebuilds the graph from scratch for every evaluation.
    fn check_grad<F>(f: F, input: TensorData, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let x = tape.var(input.clone());
        let loss = f(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().clone();

        let h = 1e-6;
        let eval = |data: TensorData| {
            let t = Tape::new();
            let xv = t.var(data);
            f(&t, xv).scalar()
        };
        for idx in 0..input.len().min(64) {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(((an - fd) / denom).abs() < tol, "idx {idx}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // y = x*x + x  => dy/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.var(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
        let y = x.mul(x).add(x).sum_all();
        let grads = tape.backward(y);
        let g = grads.get(x).unwrap();
        for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3, 5]);
        let cot = randn(&mut rng, &[4, 5]);
        {
            let (b, cot) = (b.clone(), cot.clone());
            check_grad(
                move |tape, x| x.matmul(tape.var(b.clone())).mul_const(cot.clone()).sum_all(),
                a.clone(),
                1e-6,
            );
        }
        check_grad(
            move |tape, x| tape.var(a.clone()).matmul(x).mul_const(cot.clone()).sum_all(),
            b,
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // Independent oracle: direct nested-loop convolution.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[2, 3, 5, 4]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let (stride, pad) = (2, 1);
        let tape = Tape::new();
        let out = conv2d(tape.var(x.clone()), tape.var(w.clone()), stride, pad);
        let got = out.value();

        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
        let oh = conv_out(5, 3, stride, pad);
        let ow = conv_out(4, 3, stride, pad);
        let mut want = Array4::<f64>::zeros((2, 4, oh, ow));
        for n in 0..2 {
            for o in 0..4 {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut s = 0.0;
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let hi = (oi * stride + ki) as isize - pad as isize;
                                    let wi = (oj * stride + kj) as isize - pad as isize;
                                    if hi >= 0 && hi < 5 && wi >= 0 && wi < 4 {
                                        s += x4[[n, c, hi as usize, wi as usize]]
                                            * w4[[o, c, ki, kj]];
                                    }
                                }
                            }
                        }
                        want[[n, o, oi, oj]] = s;
                    }
                }
            }
        }
        let diff = (&*got - &want.into_dyn()).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 2, 6, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let cot = randn(&mut rng, &[2, 3, 3, 2]);
        {
            let (w, cot) = (w.clone(), cot.clone());
            check_grad(
                move |tape, x| {
                    conv2d(x, tape.var(w.clone()), 2, 1).mul_const(cot.clone()).sum_all()
                },
                x.clone(),
                1e-5,
            );
        }
        check_grad(
            move |tape, wv| conv2d(tape.var(x.clone()), wv, 2, 1).mul_const(cot.clone()).sum_all(),
            w,
            1e-5,
        );
    }

    #[test]
    fn avg_pool2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let cot = randn(&mut rng, &[2, 3, 2, 2]);
        check_grad(
            move |_, x| avg_pool2d(x, 2).mul_const(cot.clone()).sum_all(),
            x,
            1e-6,
        );
    }

    #[test]
    fn concat_cols_splits_gradient() {
        let tape = Tape::new();
        let a = tape
            .var(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1., 2., 3., 4.]).unwrap());
        let b = tape.var(ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![5., 6.]).unwrap());
        let c = concat_cols(&[a, b]);
        assert_eq!(c.shape(), vec![2, 3]);
        let cot = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1., 0., 2., 0., 1., 0.]).unwrap();
        let loss = c.mul_const(cot).sum_all();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[1., 0., 0., 1.]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[2., 0.]);
    }

    #[test]
    fn reshape_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 6]);
        let cot = randn(&mut rng, &[3, 4]);
        check_grad(
            move |_, x| x.reshape(&[3, 4]).mul_const(cot.clone()).sum_all(),
            x,
            1e-6,
        );
        let b = randn(&mut rng, &[4]);
        let xr = randn(&mut rng, &[3, 4]);
        let cot = randn(&mut rng, &[3, 4]);
        check_grad(
            move |tape, bv| tape.var(xr.clone()).add_rowvec(bv).mul_const(cot.clone()).sum_all(),
            b,
            1e-6,
        );
    }
}
