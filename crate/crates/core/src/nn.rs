//! Parameter management and the standard layers the network is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by a dotted module path (the
//! same keys the checkpoint container uses). A [`Session`] binds store
//! entries to tape leaves for one forward pass; batch-norm running-statistic
//! updates are collected in the session and applied after the step so that
//! forward passes stay pure with respect to the store.

use crate::autodiff::{Tape, TensorData, Var};
use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::HashMap;

/// Handle to one entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Param(pub(crate) usize);

pub(crate) struct Slot {
    pub name: String,
    pub value: TensorData,
    /// Trainable parameters receive optimizer updates; buffers (BN running
    /// stats, class centers) are updated by their own rules.
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: TensorData) -> Param {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: TensorData) -> Param {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: TensorData, trainable: bool) -> Param {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let idx = self.slots.len();
        self.slots.push(Slot { name: name.to_string(), value, trainable });
        self.by_name.insert(name.to_string(), idx);
        Param(idx)
    }

    pub fn value(&self, p: Param) -> &TensorData {
        &self.slots[p.0].value
    }

    pub fn value_mut(&mut self, p: Param) -> &mut TensorData {
        &mut self.slots[p.0].value
    }

    pub fn name(&self, p: Param) -> &str {
        &self.slots[p.0].name
    }

    pub fn is_trainable(&self, p: Param) -> bool {
        self.slots[p.0].trainable
    }

    pub fn set_trainable(&mut self, p: Param, trainable: bool) {
        self.slots[p.0].trainable = trainable;
    }

    pub fn lookup(&self, name: &str) -> Option<Param> {
        self.by_name.get(name).copied().map(Param)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Param, &str, &TensorData, bool)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| (Param(i), s.name.as_str(), &s.value, s.trainable))
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }
}

/// One forward pass: tape + parameter bindings + deferred stat updates.
pub struct Session<'t, 's> {
    pub tape: &'t Tape,
    store: &'s ParamStore,
    pub training: bool,
    bound: RefCell<HashMap<usize, usize>>,
    pending_stats: RefCell<Vec<(Param, TensorData)>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, training: bool) -> Self {
        Session {
            tape,
            store,
            training,
            bound: RefCell::new(HashMap::new()),
            pending_stats: RefCell::new(Vec::new()),
        }
    }

    /// Tape leaf for a parameter, inserted once per session.
    pub fn param(&self, p: Param) -> Var<'t> {
        if let Some(&node) = self.bound.borrow().get(&p.0) {
            return self.tape.restore(node);
        }
        let var = self.tape.var(self.store.value(p).clone());
        self.bound.borrow_mut().insert(p.0, var.id());
        var
    }

    pub fn value(&self, p: Param) -> &TensorData {
        self.store.value(p)
    }

    fn push_stat(&self, p: Param, new_value: TensorData) {
        self.pending_stats.borrow_mut().push((p, new_value));
    }

    /// `(param index, node id)` pairs for the optimizer, plus the deferred
    /// running-stat updates. Consumes the session.
    pub fn finish(self) -> (Vec<(Param, usize)>, Vec<(Param, TensorData)>) {
        let bound = self
            .bound
            .into_inner()
            .into_iter()
            .map(|(p, n)| (Param(p), n))
            .collect();
        (bound, self.pending_stats.into_inner())
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> TensorData {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Deterministic per-layer init stream derived from a master seed and the
/// layer's name, so adding a layer never shifts every other layer's weights.
pub fn init_rng(master_seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(master_seed ^ h)
}

/// 2D convolution, bias-free (batch norm follows every conv here).
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let mut rng = init_rng(seed, name);
        let fan_in = in_ch * kernel * kernel;
        let w = he_normal(&mut rng, &[out_ch, in_ch, kernel, kernel], fan_in);
        Conv2d {
            weight: store.add(&format!("{name}.weight"), w),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, sess: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        crate::autodiff::conv2d(x, sess.param(self.weight), self.stride, self.pad)
    }
}

/// Fully connected layer with optional bias.
pub struct Linear {
    pub weight: Param, // [in, out]
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let mut rng = init_rng(seed, name);
        let w = he_normal(&mut rng, &[in_dim, out_dim], in_dim);
        Linear {
            weight: store.add(&format!("{name}.weight"), w),
            bias: bias.then(|| store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])))),
        }
    }

    pub fn forward<'t>(&self, sess: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(sess.param(self.weight));
        match self.bias {
            Some(b) => y.add_rowvec(sess.param(b)),
            None => y,
        }
    }
}

/// Batch normalization over `[N, C, H, W]` (stats per channel) or `[N, D]`
/// (stats per feature). Training mode normalizes with batch statistics and
/// queues a running-stat update on the session; eval mode uses the stored
/// running statistics and is a pure function of the store.
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim]))),
            beta: store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim]))),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[dim]))),
            running_var: store.add_buffer(&format!("{name}.running_var"), ArrayD::ones(IxDyn(&[dim]))),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<'t>(&self, sess: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        if sess.training {
            let (y, mean, var) = bn_train(x, gamma, beta, self.eps);
            let rm = sess.value(self.running_mean);
            let rv = sess.value(self.running_var);
            let m = self.momentum;
            sess.push_stat(self.running_mean, rm * (1.0 - m) + &mean * m);
            sess.push_stat(self.running_var, rv * (1.0 - m) + &var * m);
            y
        } else {
            bn_eval(
                x,
                gamma,
                beta,
                sess.value(self.running_mean).clone(),
                sess.value(self.running_var).clone(),
                self.eps,
            )
        }
    }
}

/// Shapes supported by batch norm: channel axis 1, stats over every other axis.
fn bn_axes(shape: &[usize]) -> (usize, f64) {
    let features = shape[1];
    let count: usize = shape.iter().product::<usize>() / features;
    (features, count as f64)
}

fn bn_train<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> (Var<'t>, TensorData, TensorData) {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    assert!(shape.len() == 2 || shape.len() == 4, "batch norm expects rank 2 or 4");
    let (features, m) = bn_axes(&shape);
    let gv = gamma.value();
    let bv = beta.value();
    assert_eq!(gv.len(), features);

    let mut mean = vec![0.0; features];
    let mut var = vec![0.0; features];
    for_each_feature(&xv, |f, x| mean[f] += x);
    for v in mean.iter_mut() {
        *v /= m;
    }
    for_each_feature(&xv, |f, x| {
        let d = x - mean[f];
        var[f] += d * d;
    });
    for v in var.iter_mut() {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = (*xv).clone();
    map_feature(&mut xhat, |f, x| (x - mean[f]) * inv_std[f]);
    let mut out = xhat.clone();
    map_feature(&mut out, |f, x| x * gv[[f]] + bv[[f]]);

    let mean_arr = ArrayD::from_shape_vec(IxDyn(&[features]), mean).unwrap();
    let var_arr = ArrayD::from_shape_vec(IxDyn(&[features]), var.clone()).unwrap();

    let (ix, ig, ib) = (x.id(), gamma.id(), beta.id());
    let gv2 = gv.clone();
    let y = x.tape_ref().push(
        out,
        Some(Box::new(move |g, sink| {
            let (features, m) = bn_axes(g.shape());
            let mut sum_g = vec![0.0; features];
            let mut sum_gx = vec![0.0; features];
            for_each_feature_pair(g, &xhat, |f, gi, xh| {
                sum_g[f] += gi;
                sum_gx[f] += gi * xh;
            });
            // dL/dbeta, dL/dgamma
            sink(ib, ArrayD::from_shape_vec(IxDyn(&[features]), sum_g.clone()).unwrap());
            sink(ig, ArrayD::from_shape_vec(IxDyn(&[features]), sum_gx.clone()).unwrap());
            // dL/dx = gamma * inv_std * (g - mean(g) - xhat * mean(g*xhat))
            let mut gx = g.clone();
            let mut k = 0usize;
            let xh_flat = xhat.as_slice().unwrap();
            map_feature(&mut gx, |f, gi| {
                let r = gv2[[f]]
                    * inv_std[f]
                    * (gi - sum_g[f] / m - xh_flat[k] * sum_gx[f] / m);
                k += 1;
                r
            });
            sink(ix, gx);
        })),
    );
    (y, mean_arr, var_arr)
}

fn bn_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running_mean: TensorData,
    running_var: TensorData,
    eps: f64,
) -> Var<'t> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    assert!(shape.len() == 2 || shape.len() == 4);
    let gv = gamma.value();
    let bv = beta.value();
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let rm: Vec<f64> = running_mean.iter().cloned().collect();

    let mut xhat = (*xv).clone();
    map_feature(&mut xhat, |f, x| (x - rm[f]) * inv_std[f]);
    let mut out = xhat.clone();
    map_feature(&mut out, |f, x| x * gv[[f]] + bv[[f]]);

    let (ix, ig, ib) = (x.id(), gamma.id(), beta.id());
    let gv2 = gv.clone();
    x.tape_ref().push(
        out,
        Some(Box::new(move |g, sink| {
            let features = g.shape()[1];
            let mut sum_g = vec![0.0; features];
            let mut sum_gx = vec![0.0; features];
            for_each_feature_pair(g, &xhat, |f, gi, xh| {
                sum_g[f] += gi;
                sum_gx[f] += gi * xh;
            });
            sink(ib, ArrayD::from_shape_vec(IxDyn(&[features]), sum_g).unwrap());
            sink(ig, ArrayD::from_shape_vec(IxDyn(&[features]), sum_gx).unwrap());
            let mut gx = g.clone();
            map_feature(&mut gx, |f, gi| gi * gv2[[f]] * inv_std[f]);
            sink(ix, gx);
        })),
    )
}

fn feature_of(shape: &[usize], flat: usize) -> usize {
    // Row-major: for [N, C] the feature is the last axis; for [N, C, H, W]
    // it is axis 1.
    match shape.len() {
        2 => flat % shape[1],
        4 => (flat / (shape[2] * shape[3])) % shape[1],
        _ => unreachable!(),
    }
}

fn for_each_feature(x: &TensorData, mut f: impl FnMut(usize, f64)) {
    let shape = x.shape().to_vec();
    for (i, &v) in x.as_slice().expect("standard layout").iter().enumerate() {
        f(feature_of(&shape, i), v);
    }
}

fn for_each_feature_pair(a: &TensorData, b: &TensorData, mut f: impl FnMut(usize, f64, f64)) {
    let shape = a.shape().to_vec();
    let bs = b.as_slice().expect("standard layout");
    for (i, &v) in a.as_slice().expect("standard layout").iter().enumerate() {
        f(feature_of(&shape, i), v, bs[i]);
    }
}

fn map_feature(x: &mut TensorData, mut f: impl FnMut(usize, f64) -> f64) {
    let shape = x.shape().to_vec();
    for (i, v) in x.as_slice_mut().expect("standard layout").iter_mut().enumerate() {
        *v = f(feature_of(&shape, i), *v);
    }
}

/// Conv + BN + ReLU, the standard stage unit.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, seed),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward<'t>(&self, sess: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.bn.forward(sess, self.conv.forward(sess, x)).relu()
    }
}

/// Helpers for moving between ndarray ranks at module boundaries.
pub fn as4(x: &TensorData) -> ndarray::ArrayView4<'_, f64> {
    x.view().into_dimensionality::<Ix4>().expect("expected rank-4 tensor")
}

pub fn as2(x: &TensorData) -> ndarray::ArrayView2<'_, f64> {
    x.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

pub fn as1(x: &TensorData) -> ndarray::ArrayView1<'_, f64> {
    x.view().into_dimensionality::<Ix1>().expect("expected rank-1 tensor")
}

/// Mean over axis 0 of a rank-2 tensor.
pub fn col_mean(x: &ndarray::ArrayView2<'_, f64>) -> ndarray::Array1<f64> {
    x.mean_axis(Axis(0)).unwrap()
}
