//! The four entry points (train, evaluate, extract, ablate) plus run
//! directory management and exit-code classification.

use crate::config::RunConfig;
use anyhow::{anyhow, ensure, Context, Result};
use reid_core::checkpoint::{load_checkpoint, restore_model, restore_optimizer};
use reid_core::data::{
    ingest_dataset, synth_dataset, Dataset, DiskProvider, IdentityIndex, ImageProvider, Layout,
};
use reid_core::evaluation::RetrievalResult;
use reid_core::model::ReidModel;
use reid_core::training::{fit_with_optimizer, Adam, TrainAbort};
use reid_core::types::Split;
use serde_json::json;
use std::path::{Path, PathBuf};

/// Failure classes map to process exit codes: config 2, data 3, numeric 4.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn inner(&self) -> &anyhow::Error {
        match self {
            CliError::Config(e) | CliError::Data(e) | CliError::Numeric(e) | CliError::Other(e) => e,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.inner())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn config_err<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(CliError::Config)
}

fn data_err<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(CliError::Data)
}

/// Training errors are numeric aborts when the loss went non-finite.
fn train_err<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        if e.downcast_ref::<TrainAbort>().is_some() {
            CliError::Numeric(e)
        } else {
            CliError::Other(e)
        }
    })
}

/// Dataset plus its pixel source, resolved from the config.
pub fn resolve_dataset(cfg: &RunConfig) -> CliResult<(Dataset, Box<dyn ImageProvider>)> {
    let layout = config_err(cfg.layout())?;
    match layout {
        Layout::Synthetic => {
            let spec = config_err(cfg.synth_spec())?;
            let (dataset, provider) = data_err(synth_dataset(&spec))?;
            Ok((dataset, Box::new(provider)))
        }
        Layout::MarketStyle | Layout::Cuhk03Style => {
            let root = config_err(cfg.data_root())?;
            let dataset = data_err(
                ingest_dataset(&root, layout)
                    .with_context(|| format!("ingesting {layout:?} dataset from {root:?}")),
            )?;
            let (height, width) = config_err(cfg.image_size())?;
            Ok((dataset, Box::new(DiskProvider { height, width })))
        }
    }
}

fn metrics_json(cfg: &RunConfig, result: &RetrievalResult) -> serde_json::Value {
    let at = |k: usize| result.cmc.get(k - 1).copied().unwrap_or(1.0);
    json!({
        "mAP": result.map,
        "cmc": [at(1), at(5), at(10), at(20)],
        "num_query": result.num_query,
        "num_gallery": result.num_gallery,
        "skipped_queries": result.skipped_queries,
        "config_hash": cfg.hash(),
    })
}

fn prepare_run_dir(cfg: &RunConfig, run_dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run directory {run_dir:?}"))
        .map_err(CliError::Other)?;
    std::fs::write(run_dir.join("config.snapshot"), cfg.snapshot()).map_err(|e| CliError::Other(e.into()))?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub epochs_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub metrics: Option<RetrievalResult>,
}

/// `train`: fit on the configured dataset, writing the config snapshot,
/// dataset manifest, JSON-lines log, checkpoints and final metrics into the
/// run directory.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, resume: Option<&Path>) -> CliResult<TrainSummary> {
    let model_cfg = config_err(cfg.model_config())?;
    let fit_cfg = config_err(cfg.fit_config())?;
    let (dataset, provider) = resolve_dataset(cfg)?;
    let index = data_err(IdentityIndex::from_dataset(&dataset))?;

    let mut model =
        config_err(ReidModel::new(&model_cfg, index.num_identities()))?;
    let mut optimizer: Option<Adam> = None;
    let mut start_epoch = 1;
    if let Some(ckpt) = resume {
        let data = data_err(load_checkpoint(ckpt))?;
        config_err(restore_model(&mut model, &data))?;
        let mut opt = Adam::new(&fit_cfg.optim);
        restore_optimizer(&mut opt, &data);
        optimizer = Some(opt);
        start_epoch = data.epoch + 1;
    }

    prepare_run_dir(cfg, run_dir)?;
    data_err(dataset.manifest().save(&run_dir.join("manifest.json")))?;

    let sampler = data_err(reid_core::data::PkSampler::new(&dataset, fit_cfg.batch))?;
    let report = train_err(fit_with_optimizer(
        &mut model,
        &dataset,
        provider.as_ref(),
        &fit_cfg,
        Some(run_dir),
        start_epoch,
        &sampler,
        &mut optimizer,
    ))?;

    if let Some(metrics) = &report.final_metrics {
        let path = run_dir.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&metrics_json(cfg, metrics)).unwrap())
            .map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        steps: report.steps,
        epochs_run: report.epochs_run,
        first_loss: report.first_loss,
        final_loss: report.final_loss,
        metrics: report.final_metrics,
    })
}

/// Build the model shell for a checkpoint and load the weights into it.
fn model_from_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> CliResult<ReidModel> {
    let model_cfg = config_err(cfg.model_config())?;
    let data = data_err(load_checkpoint(checkpoint))?;
    let mut model = config_err(ReidModel::new(&model_cfg, data.num_identities))?;
    config_err(
        restore_model(&mut model, &data)
            .context("checkpoint does not match the configured model"),
    )?;
    Ok(model)
}

/// `evaluate`: retrieval metrics for a checkpoint on the configured
/// query/gallery splits; prints the metrics JSON and optionally writes it.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> CliResult<serde_json::Value> {
    let model = model_from_checkpoint(cfg, checkpoint)?;
    let (dataset, provider) = resolve_dataset(cfg)?;
    let opts = config_err(cfg.eval_options())?;
    let query: Vec<_> = dataset.split(Split::Query).collect();
    let gallery: Vec<_> = dataset.split(Split::Gallery).collect();
    let result = data_err(reid_core::evaluation::evaluate_retrieval(
        &model,
        provider.as_ref(),
        &query,
        &gallery,
        &opts,
    ))?;
    let value = metrics_json(cfg, &result);
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Other(e.into()))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&value).unwrap())
            .map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(value)
}

/// `extract`: embeddings for one split as JSON lines
/// `{path, person_id, camera_id, feature}`.
pub fn cmd_extract(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    out: &Path,
) -> CliResult<usize> {
    let model = model_from_checkpoint(cfg, checkpoint)?;
    let (dataset, provider) = resolve_dataset(cfg)?;
    let opts = config_err(cfg.eval_options())?;
    let records: Vec<_> = dataset.split(split).collect();
    if records.is_empty() {
        return Err(CliError::Data(anyhow!("split {split} is empty")));
    }
    let features = data_err(reid_core::evaluation::extract_features(
        &model,
        provider.as_ref(),
        &records,
        &opts,
    ))?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Other(e.into()))?;
    }
    let mut lines = String::new();
    for (record, row) in records.iter().zip(features.rows()) {
        let line = json!({
            "path": record.path,
            "person_id": record.person_id,
            "camera_id": record.camera_id,
            "feature": row.to_vec(),
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    std::fs::write(out, lines).map_err(|e| CliError::Other(e.into()))?;
    Ok(records.len())
}

/// One ablation cell: a label plus config overrides.
#[derive(Clone, Debug)]
pub struct RowSpec {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl RowSpec {
    /// Parse `label: key=value; key=value`.
    pub fn parse(raw: &str) -> Result<Self> {
        let (label, rest) = raw
            .split_once(':')
            .with_context(|| format!("row {raw:?} must be `label: key=value; ...`"))?;
        let mut overrides = Vec::new();
        for item in rest.split(';') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (k, v) = item
                .split_once('=')
                .with_context(|| format!("row override {item:?} must be key=value"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        ensure!(!overrides.is_empty(), "row {raw:?} has no overrides");
        Ok(RowSpec { label: label.trim().to_string(), overrides })
    }
}

/// Expand `key=v1|v2` grid axes into their cartesian product.
pub fn expand_grid(axes: &[String]) -> Result<Vec<RowSpec>> {
    let mut parsed: Vec<(String, Vec<String>)> = Vec::new();
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .with_context(|| format!("grid axis {axis:?} must be key=v1|v2|..."))?;
        let values: Vec<String> = values.split('|').map(|v| v.trim().to_string()).collect();
        ensure!(!values.is_empty(), "grid axis {axis:?} has no values");
        parsed.push((key.trim().to_string(), values));
    }
    ensure!(!parsed.is_empty(), "empty ablation grid");
    let mut rows = vec![RowSpec { label: String::new(), overrides: Vec::new() }];
    for (key, values) in &parsed {
        let mut next = Vec::new();
        for row in &rows {
            for value in values {
                let mut r = row.clone();
                if !r.label.is_empty() {
                    r.label.push(' ');
                }
                r.label.push_str(&format!("{key}={value}"));
                r.overrides.push((key.clone(), value.clone()));
                next.push(r);
            }
        }
        rows = next;
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub error: Option<String>,
}

/// `ablate`: run every cell at the configured scale and emit a results
/// table (markdown + CSV). Cell failures are recorded; the sweep continues.
pub fn cmd_ablate(base: &RunConfig, rows: &[RowSpec], run_dir: &Path) -> CliResult<Vec<AblationRow>> {
    if rows.is_empty() {
        return Err(CliError::Config(anyhow!("empty ablation grid")));
    }
    prepare_run_dir(base, run_dir)?;
    let mut results = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let cell_dir = run_dir.join("cells").join(format!("{i:02}"));
        let outcome = run_cell(base, row, &cell_dir);
        results.push(match outcome {
            Ok((map, rank1)) => AblationRow {
                label: row.label.clone(),
                map: Some(map),
                rank1: Some(rank1),
                error: None,
            },
            Err(e) => AblationRow {
                label: row.label.clone(),
                map: None,
                rank1: None,
                error: Some(e.to_string()),
            },
        });
    }

    let mut md = String::from("| variant | mAP | rank-1 |\n|---|---|---|\n");
    let mut csv = String::from("variant,mAP,rank1,error\n");
    for r in &results {
        match (r.map, r.rank1) {
            (Some(m), Some(r1)) => {
                md.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.label, m, r1));
                csv.push_str(&format!("{},{:.6},{:.6},\n", r.label, m, r1));
            }
            _ => {
                let err = r.error.as_deref().unwrap_or("failed");
                md.push_str(&format!("| {} | failed | failed |\n", r.label));
                csv.push_str(&format!("{},,,\"{}\"\n", r.label, err.replace('"', "'")));
            }
        }
    }
    std::fs::write(run_dir.join("ablation.md"), &md).map_err(|e| CliError::Other(e.into()))?;
    std::fs::write(run_dir.join("ablation.csv"), &csv).map_err(|e| CliError::Other(e.into()))?;
    Ok(results)
}

fn run_cell(base: &RunConfig, row: &RowSpec, cell_dir: &Path) -> CliResult<(f64, f64)> {
    let mut cfg = base.clone();
    for (k, v) in &row.overrides {
        config_err(cfg.set(k, v))?;
    }
    let summary = cmd_train(&cfg, cell_dir, None)?;
    let metrics = summary
        .metrics
        .ok_or_else(|| CliError::Data(anyhow!("cell produced no retrieval metrics")))?;
    Ok((metrics.map, metrics.rank1))
}

// anyhow::ensure! returns anyhow::Error; adapt it to CliError::Other inside
// functions returning CliResult.
impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}
