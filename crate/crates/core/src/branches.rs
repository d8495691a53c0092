//! The four cooperative heads: local stripes, global GeM, global contrastive
//! pooling (GCP), and the one-vs-rest relation module.
//!
//! All branches consume a tail feature map `[N, C, H, W]` and emit a
//! `[N, dim]` embedding:
//!
//! | branch | pooling | dim (trunk width C, bottleneck width c) |
//! |--------|---------|------------------------------------------|
//! | local  | GeM per stripe (4 stripes, p init 1), concatenated | 4·C |
//! | global | GeM over the whole map (p init 6.5)                | C   |
//! | gcp    | max vs summed stripe averages, fused residually    | c   |
//! | ovr    | per part: part vs mean-of-rest, fused residually   | Σ splits · c |

use crate::autodiff::{add_n, concat_cols, Var};
use crate::nn::{BatchNorm, Linear, Param, ParamStore, Session};
use crate::pooling::{global_max, stripe_avg, stripe_gem};
use anyhow::{ensure, Result};

/// Contiguous horizontal stripes covering all rows; when the height is not
/// divisible, earlier stripes take the extra rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StripePartition {
    boundaries: Vec<(usize, usize)>,
}

impl StripePartition {
    pub fn new(height: usize, num_stripes: usize) -> Result<Self> {
        ensure!(num_stripes >= 1, "need at least one stripe");
        ensure!(
            height >= num_stripes,
            "feature map height {height} is smaller than the stripe count {num_stripes}"
        );
        let base = height / num_stripes;
        let extra = height % num_stripes;
        let mut boundaries = Vec::with_capacity(num_stripes);
        let mut row = 0;
        for i in 0..num_stripes {
            let rows = base + usize::from(i < extra);
            boundaries.push((row, row + rows));
            row += rows;
        }
        Ok(StripePartition { boundaries })
    }

    pub fn num_stripes(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }
}

/// 1×1-conv style channel reduction: linear + BN + ReLU on pooled vectors.
pub struct BottleneckLayer {
    linear: Linear,
    bn: BatchNorm,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BottleneckLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            out_channels < in_channels,
            "bottleneck must reduce dimensionality: {in_channels} -> {out_channels}"
        );
        Ok(BottleneckLayer {
            linear: Linear::new(store, &format!("{name}.reduce"), in_channels, out_channels, false, seed),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            in_channels,
            out_channels,
        })
    }

    pub fn forward<'t>(&self, sess: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.bn.forward(sess, self.linear.forward(sess, x)).relu()
    }
}

fn map_height(fmap: &Var<'_>) -> usize {
    let shape = fmap.shape();
    assert_eq!(shape.len(), 4, "branches expect [N, C, H, W] feature maps");
    shape[2]
}

/// Pool one stripe with GeM or, when GeM is disabled, plain averaging.
fn pool_stripe<'t>(
    sess: &Session<'t, '_>,
    fmap: Var<'t>,
    rows: (usize, usize),
    gem: Option<(Param, f64)>,
) -> Var<'t> {
    match gem {
        Some((p, eps)) => stripe_gem(fmap, sess.param(p), rows, eps),
        None => stripe_avg(fmap, rows),
    }
}

/// Local branch: 4 stripes, GeM-pooled (p initialized at 1) and concatenated
/// into a single column vector feeding one classifier.
pub struct LocalBranch {
    pub num_stripes: usize,
    pub gem_p: Param,
    pub gem_enabled: bool,
    pub gem_eps: f64,
}

impl LocalBranch {
    pub fn new(store: &mut ParamStore, cfg: &BranchGemConfig, num_stripes: usize) -> Self {
        LocalBranch {
            num_stripes,
            gem_p: add_gem_param(store, "branch.local.gem_p", cfg),
            gem_enabled: cfg.enabled,
            gem_eps: cfg.eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchGemConfig {
    pub enabled: bool,
    pub init_p: f64,
    pub learnable: bool,
    pub eps: f64,
}

fn add_gem_param(store: &mut ParamStore, name: &str, cfg: &BranchGemConfig) -> Param {
    let p = store.add(name, crate::autodiff::scalar(cfg.init_p));
    if !cfg.learnable || !cfg.enabled {
        store.set_trainable(p, false);
    }
    p
}

pub fn local_branch<'t>(
    branch: &LocalBranch,
    sess: &Session<'t, '_>,
    fmap: Var<'t>,
) -> Result<Var<'t>> {
    let partition = StripePartition::new(map_height(&fmap), branch.num_stripes)?;
    let gem = branch.gem_enabled.then_some((branch.gem_p, branch.gem_eps));
    let parts: Vec<Var<'t>> = partition
        .boundaries()
        .iter()
        .map(|&rows| pool_stripe(sess, fmap, rows, gem))
        .collect();
    Ok(concat_cols(&parts))
}

/// Global branch: whole-map GeM with p initialized at 6.5.
pub struct GlobalBranch {
    pub gem_p: Param,
    pub gem_enabled: bool,
    pub gem_eps: f64,
}

impl GlobalBranch {
    pub fn new(store: &mut ParamStore, cfg: &BranchGemConfig) -> Self {
        GlobalBranch {
            gem_p: add_gem_param(store, "branch.global.gem_p", cfg),
            gem_enabled: cfg.enabled,
            gem_eps: cfg.eps,
        }
    }
}

pub fn global_branch<'t>(
    branch: &GlobalBranch,
    sess: &Session<'t, '_>,
    fmap: Var<'t>,
) -> Result<Var<'t>> {
    let h = map_height(&fmap);
    let gem = branch.gem_enabled.then_some((branch.gem_p, branch.gem_eps));
    Ok(pool_stripe(sess, fmap, (0, h), gem))
}

/// The pooled inputs of the contrastive fusion: `f_avg` is the SUM of the
/// per-stripe averages (as defined, not a mean), `f_max` the whole-map max,
/// and `f_cont = (f_avg − f_max) / (n − 1)`.
pub fn gcp_pooled_features<'t>(
    fmap: Var<'t>,
    partition: &StripePartition,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let n = partition.num_stripes();
    assert!(n >= 2, "contrastive pooling needs at least two stripes");
    let stripe_means: Vec<Var<'t>> = partition
        .boundaries()
        .iter()
        .map(|&rows| stripe_avg(fmap, rows))
        .collect();
    let f_avg = add_n(&stripe_means);
    let f_max = global_max(fmap);
    let f_cont = f_avg.sub(f_max).scale(1.0 / (n as f64 - 1.0));
    (f_avg, f_max, f_cont)
}

/// GCP branch: residual fusion of the reduced max and contrastive features.
pub struct GcpBranch {
    pub num_stripes: usize,
    reduce_max: BottleneckLayer,
    reduce_cont: BottleneckLayer,
    fuse: BottleneckLayer,
}

impl GcpBranch {
    pub fn new(
        store: &mut ParamStore,
        num_stripes: usize,
        in_channels: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(num_stripes >= 2, "GCP needs at least 2 stripes, got {num_stripes}");
        Ok(GcpBranch {
            num_stripes,
            reduce_max: BottleneckLayer::new(store, "branch.gcp.reduce_max", in_channels, out_channels, seed)?,
            reduce_cont: BottleneckLayer::new(store, "branch.gcp.reduce_cont", in_channels, out_channels, seed)?,
            fuse: BottleneckLayer::new(store, "branch.gcp.fuse", 2 * out_channels, out_channels, seed)?,
        })
    }
}

pub fn gcp_branch<'t>(
    branch: &GcpBranch,
    sess: &Session<'t, '_>,
    fmap: Var<'t>,
) -> Result<Var<'t>> {
    let partition = StripePartition::new(map_height(&fmap), branch.num_stripes)?;
    let (_, f_max, f_cont) = gcp_pooled_features(fmap, &partition);
    let max_r = branch.reduce_max.forward(sess, f_max);
    let cont_r = branch.reduce_cont.forward(sess, f_cont);
    let fused = branch.fuse.forward(sess, concat_cols(&[max_r, cont_r]));
    Ok(max_r.add(fused))
}

/// Mean of the other parts for every part: `rᵢ = (Σⱼ fⱼ − fᵢ) / (h − 1)`.
pub fn one_vs_rest<'t>(parts: &[Var<'t>]) -> Vec<Var<'t>> {
    let h = parts.len();
    assert!(h >= 2, "one-vs-rest needs at least two parts");
    let total = add_n(parts);
    let inv = 1.0 / (h as f64 - 1.0);
    parts
        .iter()
        .map(|&f| total.sub(f).scale(inv))
        .collect()
}

struct OvrSplit {
    stripes: usize,
    reduce_part: BottleneckLayer,
    reduce_rest: BottleneckLayer,
    fuse: BottleneckLayer,
}

/// One-vs-rest relation branch: for each split granularity, every part is
/// fused with the average of the remaining parts through a residual
/// bottleneck; outputs are concatenated across parts and splits.
pub struct OvrBranch {
    splits: Vec<OvrSplit>,
}

impl OvrBranch {
    pub fn new(
        store: &mut ParamStore,
        splits: &[usize],
        in_channels: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(!splits.is_empty(), "relation branch needs at least one split");
        let mut built = Vec::with_capacity(splits.len());
        for &h in splits {
            ensure!(h >= 2, "relation split must have at least 2 stripes, got {h}");
            let prefix = format!("branch.ovr.h{h}");
            built.push(OvrSplit {
                stripes: h,
                reduce_part: BottleneckLayer::new(store, &format!("{prefix}.reduce_part"), in_channels, out_channels, seed)?,
                reduce_rest: BottleneckLayer::new(store, &format!("{prefix}.reduce_rest"), in_channels, out_channels, seed)?,
                fuse: BottleneckLayer::new(store, &format!("{prefix}.fuse"), 2 * out_channels, out_channels, seed)?,
            });
        }
        Ok(OvrBranch { splits: built })
    }

    pub fn split_sizes(&self) -> Vec<usize> {
        self.splits.iter().map(|s| s.stripes).collect()
    }
}

pub fn ovr_relation_branch<'t>(
    branch: &OvrBranch,
    sess: &Session<'t, '_>,
    fmap: Var<'t>,
) -> Result<Var<'t>> {
    let height = map_height(&fmap);
    let mut outputs = Vec::new();
    for split in &branch.splits {
        let partition = StripePartition::new(height, split.stripes)?;
        let parts: Vec<Var<'t>> = partition
            .boundaries()
            .iter()
            .map(|&rows| stripe_avg(fmap, rows))
            .collect();
        let rests = one_vs_rest(&parts);
        for (f, r) in parts.iter().zip(&rests) {
            let f_r = split.reduce_part.forward(sess, *f);
            let r_r = split.reduce_rest.forward(sess, *r);
            let fused = split.fuse.forward(sess, concat_cols(&[f_r, r_r]));
            outputs.push(f_r.add(fused));
        }
    }
    Ok(concat_cols(&outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gem_cfg(p: f64) -> BranchGemConfig {
        BranchGemConfig { enabled: true, init_p: p, learnable: true, eps: 1e-6 }
    }

    #[test]
    fn stripe_partition_covers_and_tie_breaks() {
        let p = StripePartition::new(8, 6).unwrap();
        assert_eq!(p.boundaries(), &[(0, 2), (2, 4), (4, 5), (5, 6), (6, 7), (7, 8)]);
        let p = StripePartition::new(16, 4).unwrap();
        assert_eq!(p.boundaries(), &[(0, 4), (4, 8), (8, 12), (12, 16)]);
        assert!(StripePartition::new(3, 4).is_err());
        // Contiguity and full cover for a spread of shapes.
        for h in 6..40 {
            for k in 1..=6 {
                let p = StripePartition::new(h, k).unwrap();
                assert_eq!(p.boundaries()[0].0, 0);
                assert_eq!(p.boundaries().last().unwrap().1, h);
                for w in p.boundaries().windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                }
            }
        }
    }

    #[test]
    fn local_branch_dims_and_constant_map() {
        let mut store = ParamStore::new();
        let branch = LocalBranch::new(&mut store, &gem_cfg(1.0), 4);
        let fmap = Array4::from_elem((2, 3, 8, 4), 0.7).into_dyn();
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        let emb = local_branch(&branch, &sess, tape.var(fmap)).unwrap();
        assert_eq!(emb.shape(), vec![2, 12], "4 stripes x 3 channels");
        for v in emb.value().iter() {
            assert!((v - 0.7).abs() < 1e-9, "constant map pools to the constant");
        }
    }

    #[test]
    fn local_branch_invariant_to_permutation_within_stripe() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let branch = LocalBranch::new(&mut store, &gem_cfg(1.7), 4);
        let base = Array4::from_shape_fn((1, 2, 8, 3), |_| rng.random::<f64>() + 0.1);
        // Swap rows 0 and 1: both inside stripe 0 for height 8 / 4 stripes.
        let mut swapped = base.clone();
        for c in 0..2 {
            for w in 0..3 {
                swapped[[0, c, 0, w]] = base[[0, c, 1, w]];
                swapped[[0, c, 1, w]] = base[[0, c, 0, w]];
            }
        }
        let run = |x: Array4<f64>| {
            let tape = Tape::new();
            let sess = Session::new(&tape, &store, false);
            local_branch(&branch, &sess, tape.var(x.into_dyn())).unwrap().value().clone()
        };
        assert_eq!(*run(base), *run(swapped));
    }

    #[test]
    fn local_branch_rejects_short_maps() {
        let mut store = ParamStore::new();
        let branch = LocalBranch::new(&mut store, &gem_cfg(1.0), 4);
        let fmap = Array4::<f64>::zeros((1, 2, 3, 4)).into_dyn();
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        assert!(local_branch(&branch, &sess, tape.var(fmap)).is_err());
    }

    #[test]
    fn global_branch_matches_avg_at_p1() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let branch = GlobalBranch::new(&mut store, &gem_cfg(1.0));
        let fmap = Array4::from_shape_fn((2, 5, 4, 3), |_| rng.random::<f64>() + 0.05);
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        let emb = global_branch(&branch, &sess, tape.var(fmap.clone().into_dyn())).unwrap();
        assert_eq!(emb.shape(), vec![2, 5]);
        for i in 0..2 {
            for c in 0..5 {
                let mean = fmap
                    .index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), c)
                    .mean()
                    .unwrap();
                assert!((emb.value()[[i, c]] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gcp_constant_map_algebra() {
        // Constant v with n = 6 stripes: f_avg = 6v, f_max = v, f_cont = v.
        let v = 0.37;
        let fmap = Array4::from_elem((2, 3, 12, 4), v).into_dyn();
        let tape = Tape::new();
        let partition = StripePartition::new(12, 6).unwrap();
        let (f_avg, f_max, f_cont) = gcp_pooled_features(tape.var(fmap), &partition);
        for i in 0..2 {
            for c in 0..3 {
                assert!((f_avg.value()[[i, c]] - 6.0 * v).abs() < 1e-12);
                assert!((f_max.value()[[i, c]] - v).abs() < 1e-12);
                assert!((f_cont.value()[[i, c]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcp_contrastive_identity_on_random_maps() {
        // (n-1)·f_cont + f_max = f_avg, exactly as defined.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let h = rng.random_range(6..16);
            let fmap = Array4::from_shape_fn((2, 4, h, 3), |_| rng.random::<f64>() * 2.0 - 0.5);
            let tape = Tape::new();
            let n = 6;
            let partition = StripePartition::new(h, n).unwrap();
            let (f_avg, f_max, f_cont) = gcp_pooled_features(tape.var(fmap.into_dyn()), &partition);
            let lhs = f_cont.scale(n as f64 - 1.0).add(f_max);
            let diff = (&*lhs.value() - &*f_avg.value()).mapv(f64::abs);
            assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-5);
        }
    }

    #[test]
    fn gcp_branch_dims_and_zero_fusion_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::new();
        let branch = GcpBranch::new(&mut store, 6, 8, 4, 3).unwrap();
        let fmap = Array4::from_shape_fn((3, 8, 6, 2), |_| rng.random::<f64>());
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        let q0 = gcp_branch(&branch, &sess, tape.var(fmap.clone().into_dyn())).unwrap();
        assert_eq!(q0.shape(), vec![3, 4]);

        // Zeroing the fusion weights leaves exactly the reduced max path.
        store.value_mut(branch.fuse.linear.weight).fill(0.0);
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        let fv = tape.var(fmap.into_dyn());
        let q0 = gcp_branch(&branch, &sess, fv).unwrap();
        let partition = StripePartition::new(6, 6).unwrap();
        let (_, f_max, _) = gcp_pooled_features(fv, &partition);
        let max_r = branch.reduce_max.forward(&sess, f_max);
        assert_eq!(*q0.value(), *max_r.value());
    }

    #[test]
    fn one_vs_rest_examples_and_identity() {
        let tape = Tape::new();
        // Six 1-channel parts with values [6, 0, 0, 0, 0, 0].
        let parts: Vec<_> = [6.0, 0.0, 0.0, 0.0, 0.0, 0.0]
            .iter()
            .map(|&v| tape.var(Array2::from_elem((1, 1), v).into_dyn()))
            .collect();
        let rests = one_vs_rest(&parts);
        assert!((rests[0].value()[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((rests[1].value()[[0, 0]] - 1.2).abs() < 1e-12);

        // Equal parts: every rest equals the shared value.
        let parts: Vec<_> = (0..6)
            .map(|_| tape.var(Array2::from_elem((2, 3), 0.8).into_dyn()))
            .collect();
        for r in one_vs_rest(&parts) {
            for v in r.value().iter() {
                assert!((v - 0.8).abs() < 1e-12);
            }
        }

        // h·avg(f_1..f_h) = f_i + (h-1)·r_i on random parts.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for h in [2usize, 4, 6] {
            let parts: Vec<_> = (0..h)
                .map(|_| {
                    tape.var(Array2::from_shape_fn((2, 5), |_| rng.random::<f64>()).into_dyn())
                })
                .collect();
            let rests = one_vs_rest(&parts);
            let avg = add_n(&parts).scale(1.0 / h as f64);
            for i in 0..h {
                let lhs = avg.scale(h as f64);
                let rhs = parts[i].add(rests[i].scale(h as f64 - 1.0));
                let diff = (&*lhs.value() - &*rhs.value()).mapv(f64::abs);
                assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-5);
            }
        }
    }

    #[test]
    fn ovr_branch_dims_across_splits() {
        let mut store = ParamStore::new();
        let branch = OvrBranch::new(&mut store, &[2, 4, 6], 8, 4, 9).unwrap();
        let fmap = Array4::from_elem((2, 8, 6, 3), 0.5).into_dyn();
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        let emb = ovr_relation_branch(&branch, &sess, tape.var(fmap)).unwrap();
        assert_eq!(emb.shape(), vec![2, (2 + 4 + 6) * 4]);

        assert!(OvrBranch::new(&mut store, &[1], 8, 4, 9).is_err(), "h < 2 rejected");
    }

    #[test]
    fn bottleneck_requires_reduction() {
        let mut store = ParamStore::new();
        assert!(BottleneckLayer::new(&mut store, "b", 4, 8, 0).is_err());
        assert!(BottleneckLayer::new(&mut store, "b2", 8, 4, 0).is_ok());
    }
}
