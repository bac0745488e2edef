//! Benchmark harness for the MetaAdamW optimizer toolkit: task registry,
//! training loop with early stopping, baseline comparison, ablation grids,
//! gradient-check suites, and SVG plots.

pub mod config;
pub mod gradcheck;
pub mod plot;
pub mod report;
pub mod tasks;
pub mod train;

use std::path::PathBuf;

/// Output root: the `META_ADAMW_OUT` environment variable, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("META_ADAMW_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
