//! Configuration, run directories, evaluation sweeps and figure output.
//!
//! A run directory holds `config.toml` (the resolved configuration) plus
//! whatever the command produced: `metrics.csv` and `checkpoints/` for
//! training, `eval.csv`, `sweep_delta_t.csv`, `sweep_agents.csv`,
//! `heatmap.csv`, `oracle.csv`, and an SVG next to each table.

mod config;
pub mod plot;
mod sweeps;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{apply_override, ExperimentConfig, RunConfig};
pub use sweeps::{
    eval_row, evaluate_policies, heatmap, scaled_env, sweep_agents, sweep_delta_t, AgentsRow, DeltaTRow,
    EvalSettings, AGENTS_HEADER, DELTA_T_HEADER, EVAL_HEADER, HEATMAP_HEADER,
};

use crate::error::Result;
use crate::trainer::derive_seed;

/// Seed stream tags.
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const HEATMAP_STREAM: u64 = 3;

impl RunConfig {
    pub fn train_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, &[TRAIN_STREAM])
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, &[EVAL_STREAM])
    }

    pub fn heatmap_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, &[HEATMAP_STREAM])
    }
}

/// Creates `<output_dir>/<command>-<timestamp>` (suffixed if taken) and
/// writes the configuration snapshot into it.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = cfg.experiment.output_dir.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

/// Reads a `config.toml` snapshot back.
pub fn load_snapshot(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join("config.toml"), &[])
}
