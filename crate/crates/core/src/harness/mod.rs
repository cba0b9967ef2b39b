//! Synthetic testbeds, source pretraining, experiment runs and reports.

pub mod config;
pub mod data;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

/// Relative output paths are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "RICK_OUTPUT_ROOT";

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}
