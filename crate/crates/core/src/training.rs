//! The optimization loop: Adam with warmup + step learning-rate schedule,
//! single training steps, epoch orchestration and checkpointing hooks.

use crate::autodiff::{Grads, Tape, TensorData};
use crate::data::{augment, AugmentConfig, Dataset, ImageProvider, LabeledBatch, PkBatchSpec, PkSampler};
use crate::losses::{
    center_loss, center_update, id_loss, total_loss, triplet_loss_batch_hard, BranchLossTerms,
    CenterState, LossBreakdown, LossWeights, TripletConfig,
};
use crate::model::{RegConfig, ReidModel};
use crate::nn::{Param, ParamStore, Session};
use crate::types::BranchId;
use anyhow::{ensure, Context, Result};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Optimizer and schedule settings.
#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub lr_after_60: f64,
    pub lr_after_130: f64,
    pub weight_decay: f64,
    /// First-moment coefficient (the "momentum" of the recipe).
    pub momentum_beta: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 3.5e-4,
            lr_after_60: 3.5e-5,
            lr_after_130: 3e-6,
            weight_decay: 5e-4,
            momentum_beta: 0.9,
            beta2: 0.999,
            epochs: 160,
            warmup_epochs: 10,
            warmup_start_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_lr > self.lr_after_60 && self.lr_after_60 > self.lr_after_130,
            "learning rates must be strictly decreasing"
        );
        ensure!(self.lr_after_130 > 0.0, "learning rates must be positive");
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.warmup_epochs >= 1, "warmup must span at least one epoch");
        ensure!(
            (0.0..=1.0).contains(&self.warmup_start_factor),
            "warmup start factor must lie in [0, 1]"
        );
        ensure!((0.0..1.0).contains(&self.momentum_beta), "beta1 must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)");
        ensure!(self.weight_decay >= 0.0, "weight decay must be nonnegative");
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: linear warmup to `base_lr`, then the
/// step schedule (base until epoch 60, `lr_after_60` for 61–130,
/// `lr_after_130` afterward).
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    ensure!(
        epoch >= 1 && epoch <= cfg.epochs,
        "epoch {epoch} out of range 1..={}",
        cfg.epochs
    );
    if epoch < cfg.warmup_epochs {
        let t = (epoch - 1) as f64 / (cfg.warmup_epochs - 1).max(1) as f64;
        let factor = cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * t;
        return Ok(cfg.base_lr * factor);
    }
    Ok(if epoch <= 60 {
        cfg.base_lr
    } else if epoch <= 130 {
        cfg.lr_after_60
    } else {
        cfg.lr_after_130
    })
}

/// Adam with decoupled bookkeeping per parameter name, so the state can be
/// checkpointed alongside the weights.
pub struct Adam {
    pub lr: f64,
    pub step_count: u64,
    cfg: OptimConfig,
    moments: HashMap<String, (TensorData, TensorData)>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Adam {
            lr: cfg.base_lr,
            step_count: 0,
            cfg: cfg.clone(),
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self) -> &HashMap<String, (TensorData, TensorData)> {
        &self.moments
    }

    pub fn restore_moments(&mut self, moments: HashMap<String, (TensorData, TensorData)>, step: u64) {
        self.moments = moments;
        self.step_count = step;
    }

    /// Apply one update to every trainable bound parameter.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bindings: &[(Param, usize)],
        grads: &mut Grads,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.cfg.momentum_beta, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let eps = 1e-8;
        for &(param, node) in bindings {
            if !store.is_trainable(param) {
                continue;
            }
            let Some(grad) = grads.take_by_id(node) else { continue };
            let name = store.name(param).to_string();
            let value = store.value_mut(param);
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (TensorData::zeros(grad.raw_dim()), TensorData::zeros(grad.raw_dim())));
            ndarray::Zip::from(&mut *value)
                .and(&mut *m)
                .and(&mut *v)
                .and(&grad)
                .for_each(|w, m, v, &g| {
                    let g = g + self.cfg.weight_decay * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Training aborted on a non-finite loss; carries the offending component.
#[derive(Debug)]
pub struct TrainAbort {
    pub component: String,
    pub step: u64,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite loss component {:?} at step {}",
            self.component, self.step
        )
    }
}

impl std::error::Error for TrainAbort {}

/// Which losses attach to which branches, and the center update rate.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub triplet_branches: Vec<BranchId>,
    pub center_branches: Vec<BranchId>,
    pub center_lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            triplet_branches: BranchId::ALL.to_vec(),
            center_branches: BranchId::ALL.to_vec(),
            center_lr: 0.5,
        }
    }
}

/// One optimization step: forward, composite loss, backward, Adam update,
/// deferred batch-norm stat application and the center update.
pub fn train_step(
    model: &mut ReidModel,
    images: &ndarray::Array4<f64>,
    labels: &[usize],
    losses: &LossConfig,
    reg: &RegConfig,
    optimizer: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    losses.weights.validate()?;
    let (breakdown, mut grads, bindings, stats, embeddings) = {
        let tape = Tape::new();
        let sess = Session::new(&tape, &model.store, true);
        let out = model.forward(&sess, images, reg, Some(rng))?;

        let mut parts = Vec::new();
        let mut embeddings = Vec::new();
        for bf in &out.branches {
            let id = Some(id_loss(&sess, bf.clf_input, labels, &model.heads[&bf.branch])?);
            let triplet = if losses.triplet_branches.contains(&bf.branch) {
                Some(triplet_loss_batch_hard(bf.embedding, labels, &losses.triplet)?)
            } else {
                None
            };
            let center = if losses.center_branches.contains(&bf.branch) {
                let centers = crate::nn::as2(model.store.value(model.centers[&bf.branch])).to_owned();
                Some(center_loss(bf.embedding, labels, &centers)?)
            } else {
                None
            };
            parts.push(BranchLossTerms { branch: bf.branch, id, triplet, center });
            embeddings.push((
                bf.branch,
                crate::nn::as2(&bf.embedding.value()).to_owned(),
            ));
        }
        let (total, breakdown) = total_loss(&parts, &losses.weights)?;
        if let Some(component) = breakdown.first_non_finite() {
            return Err(TrainAbort { component, step: optimizer.step_count + 1 }.into());
        }
        let grads = tape.backward(total);
        let (bindings, stats) = sess.finish();
        (breakdown, grads, bindings, stats, embeddings)
    };

    optimizer.step(&mut model.store, &bindings, &mut grads);
    for (param, new_value) in stats {
        *model.store.value_mut(param) = new_value;
    }
    if losses.weights.center > 0.0 {
        for (branch, emb) in &embeddings {
            if !losses.center_branches.contains(branch) {
                continue;
            }
            let param = model.centers[branch];
            let mut state = CenterState {
                centers: crate::nn::as2(model.store.value(param)).to_owned(),
                center_lr: losses.center_lr,
            };
            center_update(&mut state, emb, labels);
            *model.store.value_mut(param) = state.centers.into_dyn();
        }
    }
    Ok(breakdown)
}

/// One JSON line per step in the training log.
#[derive(Serialize)]
struct StepRecord<'a> {
    step: u64,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub optim: OptimConfig,
    pub batch: PkBatchSpec,
    pub losses: LossConfig,
    pub reg: RegConfig,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Evaluate on query/gallery every N epochs (0 = only at the end).
    pub eval_every: usize,
    /// Write a checkpoint every N epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Hard cap on optimization steps (0 = no cap); the run still finalizes.
    pub max_steps: u64,
    pub eval: crate::evaluation::EvalOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optim: OptimConfig::default(),
            batch: PkBatchSpec::default(),
            losses: LossConfig::default(),
            reg: RegConfig::default(),
            augment: Some(AugmentConfig::default()),
            seed: 42,
            eval_every: 0,
            checkpoint_every: 0,
            max_steps: 0,
            eval: crate::evaluation::EvalOptions::default(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub steps: u64,
    pub epochs_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoints: Vec<PathBuf>,
    pub final_metrics: Option<crate::evaluation::RetrievalResult>,
}

/// Run the training loop; writes `log.jsonl` and `checkpoints/` under
/// `run_dir` when given. Resumes from `start_epoch` (1-based) when a
/// checkpoint was restored into the model and optimizer.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut ReidModel,
    dataset: &Dataset,
    provider: &dyn ImageProvider,
    cfg: &FitConfig,
    run_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<FitReport> {
    cfg.optim.validate()?;
    let sampler = PkSampler::new(dataset, cfg.batch)?;
    let mut optimizer_holder = None;
    fit_with_optimizer(model, dataset, provider, cfg, run_dir, start_epoch, &sampler, &mut optimizer_holder)
}

/// Inner loop that can reuse a restored optimizer (for resume).
#[allow(clippy::too_many_arguments)]
pub fn fit_with_optimizer(
    model: &mut ReidModel,
    dataset: &Dataset,
    provider: &dyn ImageProvider,
    cfg: &FitConfig,
    run_dir: Option<&Path>,
    start_epoch: usize,
    sampler: &PkSampler,
    optimizer: &mut Option<Adam>,
) -> Result<FitReport> {
    ensure!(start_epoch >= 1, "epochs are 1-based");
    let opt = optimizer.get_or_insert_with(|| Adam::new(&cfg.optim));

    let mut log: Option<std::io::BufWriter<std::fs::File>> = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("log.jsonl"))?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    let mut first_loss = None;
    let mut final_loss = 0.0;
    let mut checkpoints = Vec::new();
    let mut epochs_run = 0;
    let mut capped = false;

    'epochs: for epoch in start_epoch..=cfg.optim.epochs {
        opt.lr = lr_at(epoch, &cfg.optim)?;
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a ^ epoch as u64);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa7a7 ^ epoch as u64);
        let mut reg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc3c3 ^ epoch as u64);

        for batch in sampler.epoch_batches(dataset, &mut sample_rng) {
            if cfg.max_steps > 0 && opt.step_count >= cfg.max_steps {
                capped = true;
                break 'epochs;
            }
            let images = load_training_batch(dataset, provider, &batch, cfg.augment.as_ref(), &mut aug_rng)?;
            let breakdown = train_step(
                model,
                &images,
                &batch.labels,
                &cfg.losses,
                &cfg.reg,
                opt,
                &mut reg_rng,
            )?;
            first_loss.get_or_insert(breakdown.total);
            final_loss = breakdown.total;
            if let Some(log) = log.as_mut() {
                let record = StepRecord { step: opt.step_count, epoch, lr: opt.lr, losses: &breakdown };
                serde_json::to_writer(&mut *log, &record)?;
                log.write_all(b"\n")?;
            }
        }
        epochs_run = epoch;

        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            if let Ok(metrics) = evaluate_splits(model, dataset, provider, &cfg.eval) {
                if let Some(log) = log.as_mut() {
                    serde_json::to_writer(
                        &mut *log,
                        &serde_json::json!({ "epoch": epoch, "eval": metrics }),
                    )?;
                    log.write_all(b"\n")?;
                }
            }
        }

        if let Some(dir) = run_dir {
            let last = epoch == cfg.optim.epochs;
            if last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
                let path = dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"));
                crate::checkpoint::save_checkpoint(&path, model, Some(opt), epoch)?;
                let latest = dir.join("checkpoints").join("last.ckpt");
                std::fs::copy(&path, &latest)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }

    // Checkpoint the capped state too so short runs stay resumable.
    if capped {
        if let Some(dir) = run_dir {
            let path = dir.join("checkpoints").join("last.ckpt");
            crate::checkpoint::save_checkpoint(&path, model, Some(opt), epochs_run.max(start_epoch))?;
            checkpoints.push(path);
        }
    }

    let final_metrics = evaluate_splits(model, dataset, provider, &cfg.eval).ok();
    Ok(FitReport {
        steps: opt.step_count,
        epochs_run,
        first_loss: first_loss.unwrap_or(0.0),
        final_loss,
        checkpoints,
        final_metrics,
    })
}

/// Load, augment and stack the images of one PK batch.
pub fn load_training_batch(
    dataset: &Dataset,
    provider: &dyn ImageProvider,
    batch: &LabeledBatch,
    aug: Option<&AugmentConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<ndarray::Array4<f64>> {
    let mut images: Vec<Array3<f64>> = Vec::with_capacity(batch.record_indices.len());
    for &idx in &batch.record_indices {
        let record = dataset.records.get(idx).context("record index out of range")?;
        let img = provider.image(record)?;
        images.push(match aug {
            Some(cfg) => augment(&img, cfg, rng)?,
            None => img,
        });
    }
    crate::backbone::stack_images(&images)
}

/// Evaluate retrieval on the dataset's query/gallery splits.
pub fn evaluate_splits(
    model: &ReidModel,
    dataset: &Dataset,
    provider: &dyn ImageProvider,
    opts: &crate::evaluation::EvalOptions,
) -> Result<crate::evaluation::RetrievalResult> {
    let query: Vec<_> = dataset.split(crate::types::Split::Query).collect();
    let gallery: Vec<_> = dataset.split(crate::types::Split::Gallery).collect();
    crate::evaluation::evaluate_retrieval(model, provider, &query, &gallery, opts)
}
