//! The assembled network: shared trunk, per-branch tails, the four heads,
//! batch-norm necks, classifiers and class centers.

use crate::autodiff::Var;
use crate::backbone::{branch_tail_forward, trunk_forward, TailSet, Trunk, TrunkConfig};
use crate::branches::{
    global_branch, gcp_branch, local_branch, ovr_relation_branch, BranchGemConfig, GcpBranch,
    GlobalBranch, LocalBranch, OvrBranch,
};
use crate::losses::ClassifierHead;
use crate::nn::{BatchNorm, Param, ParamStore, Session};
use crate::regularization::{bdb_mask_tensor, gcd_noise, BdbConfig, GcdConfig};
use crate::types::BranchId;
use anyhow::{ensure, Context, Result};
use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// GeM settings shared by the local and global branches.
#[derive(Clone, Debug)]
pub struct GemSettings {
    pub enabled: bool,
    pub learnable: bool,
    pub eps: f64,
    pub local_p: f64,
    pub global_p: f64,
}

impl Default for GemSettings {
    fn default() -> Self {
        GemSettings { enabled: true, learnable: true, eps: 1e-6, local_p: 1.0, global_p: 6.5 }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub branches: Vec<BranchId>,
    pub local_stripes: usize,
    pub gcp_stripes: usize,
    pub ovr_splits: Vec<usize>,
    pub bottleneck_channels: usize,
    pub gem: GemSettings,
    pub neck_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            trunk: TrunkConfig::osnet_like(),
            branches: BranchId::ALL.to_vec(),
            local_stripes: 4,
            gcp_stripes: 6,
            ovr_splits: vec![6],
            bottleneck_channels: 256,
            gem: GemSettings::default(),
            neck_enabled: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast CPU tests: tiny trunk at stride 8 so a
    /// 64x32 input still yields 8 rows for the 6-stripe branches.
    pub fn tiny(branches: &[BranchId]) -> Self {
        ModelConfig {
            trunk: TrunkConfig::tiny_test(32, 8),
            branches: branches.to_vec(),
            bottleneck_channels: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        ensure!(!self.branches.is_empty(), "at least one branch must be enabled");
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.branches {
            ensure!(seen.insert(*b), "branch {b} listed twice");
        }
        ensure!(self.local_stripes >= 1, "local branch needs at least one stripe");
        ensure!(self.gcp_stripes >= 2, "contrastive pooling needs at least 2 stripes");
        for &h in &self.ovr_splits {
            ensure!(h >= 2, "relation split must be at least 2, got {h}");
        }
        ensure!(
            self.bottleneck_channels < self.trunk.out_channels,
            "bottleneck width {} must be below the trunk width {}",
            self.bottleneck_channels,
            self.trunk.out_channels
        );
        ensure!(self.gem.eps > 0.0, "GeM eps must be positive");
        ensure!(self.gem.local_p >= 1.0 && self.gem.global_p >= 1.0, "GeM p must start at >= 1");
        Ok(())
    }

    pub fn has_branch(&self, b: BranchId) -> bool {
        self.branches.contains(&b)
    }

    /// Embedding width of one branch under this configuration.
    pub fn branch_dim(&self, b: BranchId) -> usize {
        let c_trunk = self.trunk.out_channels;
        let c_bottle = self.bottleneck_channels;
        match b {
            BranchId::Local => self.local_stripes * c_trunk,
            BranchId::Global => c_trunk,
            BranchId::Gcp => c_bottle,
            BranchId::Ovr => self.ovr_splits.iter().sum::<usize>() * c_bottle,
        }
    }

    /// Width of the concatenated test-time feature.
    pub fn embedding_dim(&self) -> usize {
        self.branches.iter().map(|&b| self.branch_dim(b)).sum()
    }
}

/// Regularizers applied during training forwards.
#[derive(Clone, Debug, Default)]
pub struct RegConfig {
    pub bdb: Option<BdbConfig>,
    pub gcd: Option<GcdConfig>,
}

/// Per-branch tensors produced by one forward pass.
pub struct BranchForward<'t> {
    pub branch: BranchId,
    /// Raw pooled embedding; used by the triplet and center losses.
    pub embedding: Var<'t>,
    /// Post-neck feature; the retrieval feature and classifier input.
    pub neck_out: Var<'t>,
    /// Classifier input after training-time noise (equals `neck_out` in
    /// eval mode).
    pub clf_input: Var<'t>,
}

pub struct ForwardOutput<'t> {
    pub branches: Vec<BranchForward<'t>>,
}

pub struct ReidModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub num_identities: usize,
    trunk: Trunk,
    tails: TailSet,
    local: Option<LocalBranch>,
    global: Option<GlobalBranch>,
    gcp: Option<GcpBranch>,
    ovr: Option<OvrBranch>,
    necks: BTreeMap<BranchId, BatchNorm>,
    pub heads: BTreeMap<BranchId, ClassifierHead>,
    pub centers: BTreeMap<BranchId, Param>,
}

impl ReidModel {
    pub fn new(cfg: &ModelConfig, num_identities: usize) -> Result<Self> {
        cfg.validate()?;
        ensure!(num_identities >= 1, "need at least one identity");
        let seed = cfg.seed;
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, &cfg.trunk, seed)?;
        let tails = TailSet::new(&mut store, &cfg.trunk, &cfg.branches, seed);
        let c = cfg.trunk.out_channels;

        let gem_local = BranchGemConfig {
            enabled: cfg.gem.enabled,
            init_p: cfg.gem.local_p,
            learnable: cfg.gem.learnable,
            eps: cfg.gem.eps,
        };
        let gem_global = BranchGemConfig { init_p: cfg.gem.global_p, ..gem_local.clone() };

        let local = cfg
            .has_branch(BranchId::Local)
            .then(|| LocalBranch::new(&mut store, &gem_local, cfg.local_stripes));
        let global = cfg
            .has_branch(BranchId::Global)
            .then(|| GlobalBranch::new(&mut store, &gem_global));
        let gcp = cfg
            .has_branch(BranchId::Gcp)
            .then(|| GcpBranch::new(&mut store, cfg.gcp_stripes, c, cfg.bottleneck_channels, seed))
            .transpose()?;
        let ovr = cfg
            .has_branch(BranchId::Ovr)
            .then(|| OvrBranch::new(&mut store, &cfg.ovr_splits, c, cfg.bottleneck_channels, seed))
            .transpose()?;

        let mut necks = BTreeMap::new();
        let mut heads = BTreeMap::new();
        let mut centers = BTreeMap::new();
        for &b in &cfg.branches {
            let dim = cfg.branch_dim(b);
            if cfg.neck_enabled {
                necks.insert(b, BatchNorm::new(&mut store, &format!("neck.{b}"), dim));
            }
            heads.insert(b, ClassifierHead::new(&mut store, &format!("head.{b}"), dim, num_identities, seed));
            centers.insert(
                b,
                store.add_buffer(
                    &format!("centers.{b}"),
                    ndarray::ArrayD::zeros(ndarray::IxDyn(&[num_identities, dim])),
                ),
            );
        }

        Ok(ReidModel {
            cfg: cfg.clone(),
            store,
            num_identities,
            trunk,
            tails,
            local,
            global,
            gcp,
            ovr,
            necks,
            heads,
            centers,
        })
    }

    /// One forward pass over all enabled branches.
    ///
    /// In training mode `reg_rng` drives batch drop-block and the Gaussian
    /// noise; in eval mode both regularizers are exact identities.
    pub fn forward<'t>(
        &self,
        sess: &Session<'t, '_>,
        images: &Array4<f64>,
        reg: &RegConfig,
        reg_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<'t>> {
        let fmap = trunk_forward(&self.trunk, sess, images)?;
        let fmap_shape = fmap.shape();

        // One shared drop rectangle per batch, sampled once.
        let mut rng_slot = reg_rng;
        let bdb = match (&reg.bdb, sess.training) {
            (Some(cfg), true) => {
                cfg.validate()?;
                let rng = rng_slot
                    .as_mut()
                    .map(|r| &mut **r)
                    .context("training-mode regularizers need an RNG stream")?;
                bdb_mask_tensor(&fmap_shape, cfg, rng).map(|m| (cfg.apply_to.clone(), m))
            }
            _ => None,
        };

        let mut branches = Vec::new();
        for &b in &self.cfg.branches {
            let mut tail = branch_tail_forward(&self.tails, sess, fmap, b)?;
            if let Some((apply_to, mask)) = &bdb {
                if apply_to.contains(&b) {
                    tail = tail.mul_const(mask.clone());
                }
            }
            let embedding = match b {
                BranchId::Local => local_branch(self.local.as_ref().unwrap(), sess, tail)?,
                BranchId::Global => global_branch(self.global.as_ref().unwrap(), sess, tail)?,
                BranchId::Gcp => gcp_branch(self.gcp.as_ref().unwrap(), sess, tail)?,
                BranchId::Ovr => ovr_relation_branch(self.ovr.as_ref().unwrap(), sess, tail)?,
            };
            let neck_out = match self.necks.get(&b) {
                Some(neck) => neck.forward(sess, embedding),
                None => embedding,
            };
            let clf_input = match (&reg.gcd, sess.training) {
                (Some(cfg), true) => {
                    cfg.validate()?;
                    let rng = rng_slot
                        .as_mut()
                        .map(|r| &mut **r)
                        .context("training-mode regularizers need an RNG stream")?;
                    match gcd_noise(&neck_out.shape(), cfg, rng, true) {
                        Some(noise) => neck_out.mul_const(noise),
                        None => neck_out,
                    }
                }
                _ => neck_out,
            };
            branches.push(BranchForward { branch: b, embedding, neck_out, clf_input });
        }
        Ok(ForwardOutput { branches })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};

    fn rand_images(seed: u64, n: usize, h: usize, w: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn branch_dims_follow_the_contract() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.branch_dim(BranchId::Local), 2048);
        assert_eq!(cfg.branch_dim(BranchId::Global), 512);
        assert_eq!(cfg.branch_dim(BranchId::Gcp), 256);
        assert_eq!(cfg.branch_dim(BranchId::Ovr), 1536);
        assert_eq!(cfg.embedding_dim(), 4352);

        let lg = ModelConfig {
            branches: vec![BranchId::Local, BranchId::Global],
            ..ModelConfig::default()
        };
        assert_eq!(lg.embedding_dim(), 2560);

        let splits = ModelConfig { ovr_splits: vec![2, 4, 6], ..ModelConfig::default() };
        assert_eq!(splits.branch_dim(BranchId::Ovr), 12 * 256);
    }

    #[test]
    fn forward_emits_every_enabled_branch_with_correct_dims() {
        let cfg = ModelConfig::tiny(&BranchId::ALL);
        let model = ReidModel::new(&cfg, 8).unwrap();
        let images = rand_images(1, 4, 64, 32);
        let tape = Tape::new();
        let sess = Session::new(&tape, &model.store, false);
        let out = model.forward(&sess, &images, &RegConfig::default(), None).unwrap();
        assert_eq!(out.branches.len(), 4);
        for bf in &out.branches {
            assert_eq!(bf.embedding.shape(), vec![4, cfg.branch_dim(bf.branch)]);
            assert_eq!(bf.neck_out.shape(), vec![4, cfg.branch_dim(bf.branch)]);
        }
    }

    #[test]
    fn disabling_branches_leaves_others_bitwise_unchanged() {
        // Same seed: the remaining branches' weights and outputs must agree.
        let all = ReidModel::new(&ModelConfig::tiny(&BranchId::ALL), 8).unwrap();
        let some = ReidModel::new(
            &ModelConfig::tiny(&[BranchId::Local, BranchId::Gcp]),
            8,
        )
        .unwrap();
        let images = rand_images(2, 2, 64, 32);
        let run = |model: &ReidModel| {
            let tape = Tape::new();
            let sess = Session::new(&tape, &model.store, false);
            let out = model.forward(&sess, &images, &RegConfig::default(), None).unwrap();
            out.branches
                .iter()
                .map(|bf| (bf.branch, bf.embedding.value().as_ref().clone()))
                .collect::<Vec<_>>()
        };
        let full = run(&all);
        let partial = run(&some);
        for (b, emb) in &partial {
            let reference = full.iter().find(|(fb, _)| fb == b).unwrap();
            assert_eq!(*emb, reference.1, "branch {b} must not depend on which others run");
        }
    }

    #[test]
    fn training_forward_with_regularizers_runs_and_eval_ignores_them() {
        let cfg = ModelConfig::tiny(&[BranchId::Local, BranchId::Global]);
        let model = ReidModel::new(&cfg, 4).unwrap();
        let images = rand_images(3, 4, 64, 32);
        let reg = RegConfig {
            bdb: Some(BdbConfig::default()),
            gcd: Some(GcdConfig::default()),
        };
        let tape = Tape::new();
        let sess = Session::new(&tape, &model.store, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = model.forward(&sess, &images, &reg, Some(&mut rng)).unwrap();
        // Noise applies to the classifier input only.
        for bf in &out.branches {
            assert_ne!(*bf.clf_input.value(), *bf.neck_out.value());
        }

        // Eval mode: regularizers vanish even with the config present.
        let tape = Tape::new();
        let sess = Session::new(&tape, &model.store, false);
        let out_eval = model.forward(&sess, &images, &reg, None).unwrap();
        let tape2 = Tape::new();
        let sess2 = Session::new(&tape2, &model.store, false);
        let out_plain = model.forward(&sess2, &images, &RegConfig::default(), None).unwrap();
        for (a, b) in out_eval.branches.iter().zip(&out_plain.branches) {
            assert_eq!(*a.neck_out.value(), *b.neck_out.value());
            assert_eq!(*a.clf_input.value(), *a.neck_out.value());
        }
    }

    #[test]
    fn config_validation_catches_mistakes() {
        let mut cfg = ModelConfig::default();
        cfg.branches = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.branches = vec![BranchId::Local, BranchId::Local];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.bottleneck_channels = 512;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(&BranchId::ALL);
        cfg.ovr_splits = vec![1];
        assert!(cfg.validate().is_err());
    }
}
