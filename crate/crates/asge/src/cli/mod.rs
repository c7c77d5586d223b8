//! Config-driven command layer: everything the `asge` binary can do is a
//! plain library function here, so runs are scriptable and testable without
//! spawning a process.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_goodness_dump, cmd_gradcheck, cmd_sweep, cmd_train, DumpArgs, EvalArgs,
    SweepArgs, SweepRow, TrainSummary,
};
pub use config::{load_config, resolve, CliOverrides, DatasetName, ResolvedRun, RunConfig};
