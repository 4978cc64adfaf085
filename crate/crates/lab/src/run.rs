//! Single-experiment execution and its run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use flowrl_core::config::ExperimentConfig;
use flowrl_core::oracles::{tilted_gaussian_oracle, GaussianParams, RewardSpec};
use flowrl_core::training::{MetricsRow, Trainer};

use crate::artifacts::{
    create_dir, write_checkpoint, write_json, MetricsWriter, RunSummary, BUILD_ID,
};
use crate::config::save_config;
use crate::error::{LabError, LabResult};

/// Overrides the base directory for runs whose config names none.
pub const OUTPUT_ROOT_ENV: &str = "FLOWRL_OUTPUT_ROOT";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Record per-epoch wall time in `metrics.csv`. Off by default so that
    /// reruns produce byte-identical files; the total always lands in the
    /// summary.
    pub wall_clock: bool,
    /// Extra checkpoints every this many epochs; the final one is always
    /// written.
    pub checkpoint_every: Option<usize>,
    /// Write the last epoch's rollouts and estimator workspaces as JSON.
    pub dump_workspace: bool,
    /// Progress lines on stderr every this many epochs.
    pub log_every: Option<usize>,
}

/// Where a run writes: explicit path, then the config's `output_dir`
/// (relative to the output root), then `runs/seed-<seed>`.
pub fn resolve_output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    match &cfg.output_dir {
        Some(d) => root.join(d),
        None => root.join(format!("seed-{}", cfg.seed)),
    }
}

/// Closed-form optimum per condition when the reward is quadratic.
pub fn closed_form_oracle(cfg: &ExperimentConfig) -> Option<Vec<GaussianParams>> {
    if !matches!(cfg.reward, RewardSpec::Quadratic { .. }) {
        return None;
    }
    let reference = cfg.model.reference().ok()?;
    (0..cfg.model.conditions)
        .map(|c| tilted_gaussian_oracle(&reference, &cfg.reward, cfg.objective.beta, c).ok())
        .collect()
}

/// Trains `cfg` for its configured epochs, writing the run directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dir: &Path,
    opts: &RunOptions,
) -> LabResult<RunSummary> {
    cfg.validate()?;
    create_dir(dir)?;
    save_config(cfg, &dir.join("config.json"))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.capture = opts.dump_workspace;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let started = Instant::now();
    let mut last: Option<MetricsRow> = None;
    let mut failure = None;
    for epoch in 1..=cfg.train.epochs {
        let t0 = Instant::now();
        if let Err(e) = trainer.run_epoch() {
            failure = Some(LabError::from(e));
            break;
        }
        let mut row = trainer.evaluate()?;
        if opts.wall_clock {
            row.wall_ms = t0.elapsed().as_millis() as u64;
        }
        metrics.append(&row)?;
        last = Some(row);
        if opts
            .checkpoint_every
            .is_some_and(|k| k > 0 && epoch % k == 0)
        {
            write_checkpoint(&dir.join(format!("checkpoints/epoch-{epoch:05}")), &trainer)?;
        }
        if opts.log_every.is_some_and(|k| k > 0 && epoch % k == 0) {
            eprintln!(
                "epoch {epoch:>5}  reward {:>9.5}  kl {:>8.5}  tv {:>7.4}  nfe {}",
                row.mean_reward, row.kl_to_ref, row.tv_to_oracle, row.nfe_cumulative
            );
        }
    }
    write_checkpoint(&dir.join("checkpoints/final"), &trainer)?;
    if opts.dump_workspace {
        if let Some(c) = &trainer.captured {
            write_json(&dir.join("workspace.json"), &c.workspaces)?;
            let trajectories: Vec<_> = c
                .groups
                .iter()
                .flat_map(|g| g.trajectories.iter().flatten())
                .collect();
            write_json(&dir.join("rollouts.json"), &c.groups)?;
            if !trajectories.is_empty() {
                write_json(&dir.join("trajectories.json"), &trajectories)?;
            }
        }
    }
    if let Some(g) = &trainer.failed_group {
        write_json(&dir.join("failed_group.json"), g)?;
    }
    let summary = RunSummary {
        build_id: BUILD_ID.to_string(),
        status: String::from(if failure.is_some() {
            "aborted"
        } else {
            "completed"
        }),
        epochs_completed: trainer.state.epoch,
        final_metrics: last,
        parameter_count: trainer.parameter_count(),
        oracle_mean_reward: trainer.oracle_mean_reward(),
        oracle_gaussian: closed_form_oracle(cfg),
        total_wall_ms: started.elapsed().as_millis() as u64,
        error: failure.as_ref().map(|e| e.to_string()),
        config: cfg.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
