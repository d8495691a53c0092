use clap::{Parser, Subcommand};
use reid_cli::{cmd_ablate, cmd_evaluate, cmd_extract, cmd_train, expand_grid, CliError, RowSpec, RunConfig};
use reid_core::types::Split;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "reid",
    about = "Multi-branch person re-identification: train, evaluate, extract, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `--set branches=local,global`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory (config snapshot,
    /// checkpoints, JSON-lines log, final metrics).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (default: runs/<config-hash-prefix>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured query/gallery splits.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract embeddings for one split as JSON lines.
    Extract {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | query | gallery
        #[arg(long, default_value = "query")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation sweep and emit a markdown/CSV table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid axis `key=v1|v2`; repeat for a cartesian product.
        #[arg(long = "grid", value_name = "KEY=V1|V2")]
        grid: Vec<String>,
        /// Explicit cell `label: key=value; key=value`; repeatable.
        #[arg(long = "row", value_name = "LABEL: K=V; ...")]
        row: Vec<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Print the full config schema with defaults.
    Keys,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set).map_err(CliError::Config)?;
    Ok(cfg)
}

fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(&cfg.hash()[..16])
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Train { config, run_dir, resume } => {
            let cfg = load_config(&config)?;
            let dir = run_dir.unwrap_or_else(|| default_run_dir(&cfg));
            let summary = cmd_train(&cfg, &dir, resume.as_deref())?;
            println!(
                "trained {} steps over {} epochs; loss {:.4} -> {:.4}",
                summary.steps, summary.epochs_run, summary.first_loss, summary.final_loss
            );
            if let Some(m) = &summary.metrics {
                println!("mAP {:.4}  rank-1 {:.4}", m.map, m.rank1);
            }
            println!("run directory: {}", summary.run_dir.display());
            Ok(())
        }
        Command::Evaluate { config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let metrics = cmd_evaluate(&cfg, &checkpoint, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&metrics).unwrap());
            Ok(())
        }
        Command::Extract { config, checkpoint, split, out } => {
            let cfg = load_config(&config)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "query" => Split::Query,
                "gallery" => Split::Gallery,
                other => {
                    return Err(CliError::Config(anyhow::anyhow!(
                        "unknown split {other:?} (expected train|query|gallery)"
                    )))
                }
            };
            let count = cmd_extract(&cfg, &checkpoint, split, &out)?;
            println!("wrote {count} feature lines to {}", out.display());
            Ok(())
        }
        Command::Ablate { config, grid, row, run_dir } => {
            let cfg = load_config(&config)?;
            let mut rows: Vec<RowSpec> = Vec::new();
            for r in &row {
                rows.push(RowSpec::parse(r).map_err(CliError::Config)?);
            }
            if !grid.is_empty() {
                rows.extend(expand_grid(&grid).map_err(CliError::Config)?);
            }
            let dir = run_dir.unwrap_or_else(|| default_run_dir(&cfg));
            let table = cmd_ablate(&cfg, &rows, &dir)?;
            for r in &table {
                match (r.map, r.rank1) {
                    (Some(m), Some(r1)) => println!("{:<40} mAP {m:.4}  rank-1 {r1:.4}", r.label),
                    _ => println!("{:<40} FAILED: {}", r.label, r.error.as_deref().unwrap_or("?")),
                }
            }
            println!("table: {}", dir.join("ablation.md").display());
            Ok(())
        }
        Command::Keys => {
            for (k, v) in reid_cli::KEYS {
                println!("{k} = {v}");
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
