//! One shadow run plus attack per value of a single config key, followed by
//! a combined report.

use std::path::{Path, PathBuf};

use super::attack::run_attack;
use super::config::ExperimentConfig;
use super::create_dir;
use super::report::{run_report, ReportOutput};
use super::shadow::run_shadow;
use crate::error::{ensure, Result};

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub run_dirs: Vec<PathBuf>,
    pub report: ReportOutput,
}

/// Runs `key=value` for each value under `out/<key>=<value>/` and reports
/// into `out/report/`. Completed runs are reused.
pub fn run_sweep(config: &ExperimentConfig, key: &str, values: &[String], out: &Path, workers: usize) -> Result<SweepOutput> {
    ensure!(!values.is_empty(), Config, "sweep needs at least one value");
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| config.with(key, v)).collect::<Result<_>>()?;
    create_dir(out)?;
    let mut run_dirs = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out.join(format!("{key}={}", value.trim()));
        log::info!("sweep: {key}={value} -> {}", dir.display());
        run_shadow(cfg, &dir, workers)?;
        run_attack(&dir, None, None, workers)?;
        run_dirs.push(dir);
    }
    let report = run_report(&run_dirs, None, &out.join("report"))?;
    Ok(SweepOutput { run_dirs, report })
}
