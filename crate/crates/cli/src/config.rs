//! Flat dotted-key run configuration.
//!
//! Config files are diff-able `key = value` lines (`#` comments allowed);
//! `--set key=value` overrides stack on top. Every key is declared in
//! [`KEYS`] with its default; unknown keys are rejected up front. The fully
//! resolved config round-trips through [`RunConfig::snapshot`], and
//! [`RunConfig::hash`] digests the canonical snapshot.

use anyhow::{bail, ensure, Context, Result};
use reid_core::backbone::{TrunkConfig, TrunkVariant};
use reid_core::data::{AugmentConfig, Layout, PkBatchSpec, SynthSpec};
use reid_core::evaluation::{DistanceKind, EvalOptions};
use reid_core::losses::{LossWeights, TripletConfig, TripletMode};
use reid_core::model::{GemSettings, ModelConfig, RegConfig};
use reid_core::regularization::{BdbConfig, GcdConfig};
use reid_core::training::{FitConfig, LossConfig, OptimConfig};
use reid_core::types::BranchId;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Every config key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "42"),
    ("trunk.variant", "osnet_like"),
    ("trunk.out_channels", "512"),
    ("trunk.share_tail_stages", "false"),
    ("trunk.total_stride", "16"),
    ("branches", "local,global,gcp,ovr"),
    ("local_stripes", "4"),
    ("gcp_stripes", "6"),
    ("ovr_splits", "6"),
    ("bottleneck_channels", "256"),
    ("gem.enabled", "true"),
    ("gem.learnable", "true"),
    ("gem.eps", "1e-6"),
    ("gem.local_p", "1"),
    ("gem.global_p", "6.5"),
    ("neck.enabled", "true"),
    ("loss.id_weight", "1"),
    ("loss.triplet_weight", "1"),
    ("loss.center_weight", "0.0005"),
    ("loss.triplet_mode", "softplus"),
    ("loss.triplet_margin", "0.3"),
    ("loss.triplet_branches", "all"),
    ("loss.center_branches", "all"),
    ("loss.center_lr", "0.5"),
    ("bdb.enabled", "false"),
    ("bdb.height_ratio", "0.3"),
    ("bdb.width_ratio", "1.0"),
    ("bdb.branches", "local"),
    ("gcd.enabled", "false"),
    ("gcd.sigma", "0.5"),
    ("optim.base_lr", "0.00035"),
    ("optim.lr_after_60", "0.000035"),
    ("optim.lr_after_130", "0.000003"),
    ("optim.weight_decay", "0.0005"),
    ("optim.momentum_beta", "0.9"),
    ("optim.beta2", "0.999"),
    ("optim.epochs", "160"),
    ("optim.warmup_epochs", "10"),
    ("optim.warmup_start_factor", "0.1"),
    ("optim.max_steps", "0"),
    ("batch.p", "16"),
    ("batch.k", "4"),
    ("augment.enabled", "true"),
    ("augment.flip_prob", "0.5"),
    ("augment.erase_prob", "0.5"),
    ("augment.erase_area_min", "0.02"),
    ("augment.erase_area_max", "0.4"),
    ("augment.erase_aspect_min", "0.3"),
    ("augment.erase_aspect_max", "3.3333333"),
    ("augment.erase_fill", "0.5"),
    ("data.root", ""),
    ("data.layout", "market_style"),
    ("data.height", "256"),
    ("data.width", "128"),
    ("synth.num_ids", "8"),
    ("synth.imgs_per_id", "8"),
    ("synth.query_per_id", "2"),
    ("synth.gallery_per_id", "2"),
    ("synth.height", "64"),
    ("synth.width", "32"),
    ("eval.distance", "euclidean"),
    ("eval.normalize", "true"),
    ("eval.batch_size", "32"),
    ("eval.max_rank", "20"),
    ("eval.every", "0"),
    ("checkpoint.every", "0"),
];

/// Environment variable overriding `data.root`.
pub const DATA_ROOT_ENV: &str = "REID_DATA_ROOT";

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {path:?}"))?;
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{path:?}:{}: expected `key = value`", lineno + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{path:?}:{}", lineno + 1))?;
        }
        Ok(cfg)
    }

    /// Set one key, rejecting anything not in the declared schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        ensure!(
            self.values.contains_key(key),
            "unknown config key {key:?} (see `reid keys` for the schema)"
        );
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply `key=value` override strings from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("override {item:?} must be key=value"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("undeclared config key {key:?}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| anyhow::anyhow!("config key {key} = {raw:?}: {e}"))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => bail!("config key {key} = {other:?}: expected true|false"),
        }
    }

    fn parse_branches(&self, key: &str, enabled: &[BranchId]) -> Result<Vec<BranchId>> {
        let raw = self.get(key);
        if raw.trim() == "all" {
            return Ok(enabled.to_vec());
        }
        raw.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<BranchId>())
            .collect()
    }

    fn parse_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| anyhow::anyhow!("config key {key}: {e}"))
            })
            .collect()
    }

    /// Canonical `key = value` lines, sorted by key.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Collision-resistant digest of the canonical snapshot.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.snapshot().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn branches(&self) -> Result<Vec<BranchId>> {
        let list = self
            .get("branches")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<BranchId>())
            .collect::<Result<Vec<_>>>()?;
        ensure!(!list.is_empty(), "config key branches must list at least one branch");
        Ok(list)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant: TrunkVariant = self.parse("trunk.variant")?;
        let trunk = TrunkConfig {
            variant,
            out_channels: self.parse("trunk.out_channels")?,
            share_tail_stages: self.parse_bool("trunk.share_tail_stages")?,
            total_stride: self.parse("trunk.total_stride")?,
        };
        let cfg = ModelConfig {
            trunk,
            branches: self.branches()?,
            local_stripes: self.parse("local_stripes")?,
            gcp_stripes: self.parse("gcp_stripes")?,
            ovr_splits: self.parse_usize_list("ovr_splits")?,
            bottleneck_channels: self.parse("bottleneck_channels")?,
            gem: GemSettings {
                enabled: self.parse_bool("gem.enabled")?,
                learnable: self.parse_bool("gem.learnable")?,
                eps: self.parse("gem.eps")?,
                local_p: self.parse("gem.local_p")?,
                global_p: self.parse("gem.global_p")?,
            },
            neck_enabled: self.parse_bool("neck.enabled")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let branches = self.branches()?;
        let weights = LossWeights {
            id: self.parse("loss.id_weight")?,
            triplet: self.parse("loss.triplet_weight")?,
            center: self.parse("loss.center_weight")?,
        };
        weights.validate()?;
        let mode: TripletMode = self.parse("loss.triplet_mode")?;
        Ok(LossConfig {
            weights,
            triplet: TripletConfig { mode, margin: self.parse("loss.triplet_margin")? },
            triplet_branches: self.parse_branches("loss.triplet_branches", &branches)?,
            center_branches: self.parse_branches("loss.center_branches", &branches)?,
            center_lr: self.parse("loss.center_lr")?,
        })
    }

    pub fn reg_config(&self) -> Result<RegConfig> {
        let branches = self.branches()?;
        let bdb = if self.parse_bool("bdb.enabled")? {
            let cfg = BdbConfig {
                height_ratio: self.parse("bdb.height_ratio")?,
                width_ratio: self.parse("bdb.width_ratio")?,
                apply_to: self.parse_branches("bdb.branches", &branches)?,
            };
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };
        let gcd = if self.parse_bool("gcd.enabled")? {
            let cfg = GcdConfig { sigma: self.parse("gcd.sigma")? };
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };
        Ok(RegConfig { bdb, gcd })
    }

    pub fn optim_config(&self) -> Result<OptimConfig> {
        let cfg = OptimConfig {
            base_lr: self.parse("optim.base_lr")?,
            lr_after_60: self.parse("optim.lr_after_60")?,
            lr_after_130: self.parse("optim.lr_after_130")?,
            weight_decay: self.parse("optim.weight_decay")?,
            momentum_beta: self.parse("optim.momentum_beta")?,
            beta2: self.parse("optim.beta2")?,
            epochs: self.parse("optim.epochs")?,
            warmup_epochs: self.parse("optim.warmup_epochs")?,
            warmup_start_factor: self.parse("optim.warmup_start_factor")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn batch_spec(&self) -> Result<PkBatchSpec> {
        let spec = PkBatchSpec { p: self.parse("batch.p")?, k: self.parse("batch.k")? };
        spec.validate()?;
        Ok(spec)
    }

    pub fn augment_config(&self) -> Result<Option<AugmentConfig>> {
        if !self.parse_bool("augment.enabled")? {
            return Ok(None);
        }
        let mut cfg = AugmentConfig::default();
        cfg.flip_prob = self.parse("augment.flip_prob")?;
        cfg.erase.prob = self.parse("augment.erase_prob")?;
        cfg.erase.area = (self.parse("augment.erase_area_min")?, self.parse("augment.erase_area_max")?);
        cfg.erase.aspect = (
            self.parse("augment.erase_aspect_min")?,
            self.parse("augment.erase_aspect_max")?,
        );
        cfg.erase.fill = self.parse("augment.erase_fill")?;
        cfg.validate()?;
        Ok(Some(cfg))
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let distance: DistanceKind = self.parse("eval.distance")?;
        Ok(EvalOptions {
            distance,
            normalize: self.parse_bool("eval.normalize")?,
            batch_size: self.parse("eval.batch_size")?,
            max_rank: self.parse("eval.max_rank")?,
        })
    }

    pub fn fit_config(&self) -> Result<FitConfig> {
        Ok(FitConfig {
            optim: self.optim_config()?,
            batch: self.batch_spec()?,
            losses: self.loss_config()?,
            reg: self.reg_config()?,
            augment: self.augment_config()?,
            seed: self.seed()?,
            eval_every: self.parse("eval.every")?,
            checkpoint_every: self.parse("checkpoint.every")?,
            max_steps: self.parse("optim.max_steps")?,
            eval: self.eval_options()?,
        })
    }

    pub fn layout(&self) -> Result<Layout> {
        self.parse("data.layout")
    }

    /// `data.root`, overridable through the environment.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            return Ok(PathBuf::from(root));
        }
        let root = self.get("data.root");
        ensure!(
            !root.is_empty(),
            "data.root is not set (or export {DATA_ROOT_ENV}) and the layout is not synthetic"
        );
        Ok(PathBuf::from(root))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        Ok(SynthSpec {
            num_ids: self.parse("synth.num_ids")?,
            imgs_per_id: self.parse("synth.imgs_per_id")?,
            query_per_id: self.parse("synth.query_per_id")?,
            gallery_per_id: self.parse("synth.gallery_per_id")?,
            height: self.parse("synth.height")?,
            width: self.parse("synth.width")?,
            seed: self.seed()?,
        })
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        Ok((self.parse("data.height")?, self.parse("data.width")?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let cfg = RunConfig::default();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.embedding_dim(), 4352);
        cfg.fit_config().unwrap();
        cfg.eval_options().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no.such.key", "1").is_err());
        assert!(cfg.apply_overrides(&["branches=local,global".into()]).is_ok());
        assert!(cfg.apply_overrides(&["bad-key=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["missing-equals".into()]).is_err());
    }

    #[test]
    fn snapshot_roundtrips_and_hash_tracks_content() {
        let mut cfg = RunConfig::default();
        cfg.set("branches", "local,global").unwrap();
        cfg.set("optim.epochs", "3").unwrap();
        let snap = cfg.snapshot();

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.cfg");
        std::fs::write(&path, &snap).unwrap();
        let reread = RunConfig::from_file(&path).unwrap();
        assert_eq!(reread.snapshot(), snap, "snapshot parses back to itself");
        assert_eq!(reread.hash(), cfg.hash());

        let mut other = cfg.clone();
        other.set("optim.epochs", "4").unwrap();
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn parse_errors_name_the_key() {
        let mut cfg = RunConfig::default();
        cfg.set("optim.epochs", "many").unwrap();
        let err = format!("{:#}", cfg.optim_config().unwrap_err());
        assert!(err.contains("optim.epochs"), "{err}");
    }

    #[test]
    fn table_variant_overrides_resolve() {
        // Branch-combination override.
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["branches=local,global".into()]).unwrap();
        assert_eq!(cfg.model_config().unwrap().embedding_dim(), 2560);

        // GeM off swaps the pooling to fixed averaging.
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["gem.enabled=false".into()]).unwrap();
        assert!(!cfg.model_config().unwrap().gem.enabled);

        // Relation splits variant.
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["ovr_splits=2,4,6".into()]).unwrap();
        assert_eq!(cfg.model_config().unwrap().ovr_splits, vec![2, 4, 6]);
    }
}
