//! Library surface of the command-line harness, exposed so integration
//! tests can drive the commands directly.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_extract, cmd_train, expand_grid, resolve_dataset, AblationRow,
    CliError, CliResult, RowSpec, TrainSummary,
};
pub use config::{RunConfig, DATA_ROOT_ENV, KEYS};
