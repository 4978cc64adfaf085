//! Cartesian sweeps over the design space.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use flowrl_core::config::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::artifacts::{create_dir, write_json, BUILD_ID};
use crate::error::{LabError, LabResult};
use crate::run::{run_experiment, RunOptions};

/// Design-space axes a sweep may vary.
pub const AXES: [&str; 6] = [
    "objective",
    "weighting",
    "mc-scheme",
    "ratio-mode",
    "sampler-mode",
    "formula",
];

pub const COMPARISON_HEADER: &str = "cell,objective,formula,weighting,mc_scheme,ratio_mode,sampler_mode,status,epochs_completed,mean_reward,kl_to_ref,tv_to_oracle,nfe_cumulative,ratio_warnings";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> LabResult<Axis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| LabError::config("axis", format!("expected key=v1,v2, got `{spec}`")))?;
    let key = key.trim().replace('_', "-");
    if !AXES.contains(&key.as_str()) {
        return Err(LabError::config(
            "axis",
            format!("unknown axis `{key}`; expected one of {}", AXES.join(", ")),
        ));
    }
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(LabError::config(format!("axis.{key}"), "no values"));
    }
    Ok(Axis { key, values })
}

fn enum_value<T: for<'de> Deserialize<'de>>(key: &str, v: &str) -> LabResult<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|e| LabError::config(format!("axis.{key}"), format!("`{v}`: {e}")))
}

/// Writes one axis value into `cfg`. Unknown values are config errors; the
/// resulting combination is validated separately.
pub fn apply(cfg: &mut ExperimentConfig, key: &str, value: &str) -> LabResult<()> {
    match key {
        "objective" => cfg.objective.kind = enum_value(key, value)?,
        "weighting" => cfg.estimator.weighting = enum_value(key, value)?,
        "mc-scheme" => cfg.estimator.mc_scheme = enum_value(key, value)?,
        "ratio-mode" => cfg.estimator.ratio_mode = enum_value(key, value)?,
        "sampler-mode" => cfg.sampler.mode = enum_value(key, value)?,
        "formula" => cfg.estimator.formula = enum_value(key, value)?,
        other => return Err(LabError::config("axis", format!("unknown axis `{other}`"))),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub assignment: Vec<(String, String)>,
}

/// Row-major product with the last axis fastest.
pub fn cells(axes: &[Axis]) -> Vec<Cell> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<(String, String)>| {
                axis.values.iter().map(move |v| {
                    let mut a = prefix.clone();
                    a.push((axis.key.clone(), v.clone()));
                    a
                })
            })
            .collect();
    }
    out.into_iter()
        .map(|assignment| {
            let name = if assignment.is_empty() {
                String::from("base")
            } else {
                assignment
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join("__")
            };
            Cell { name, assignment }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: String,
    /// `completed`, `aborted`, `invalid` or `failed`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub build_id: String,
    pub seed: u64,
    pub cells: usize,
    pub completed: usize,
    pub invalid: usize,
    pub failed: usize,
    pub outcomes: Vec<CellOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    /// Cells in flight at once; 1 runs them in order.
    pub jobs: usize,
    pub log: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            log: false,
        }
    }
}

struct Planned {
    cell: Cell,
    cfg: ExperimentConfig,
    /// Why validation rejected the cell.
    invalid: Option<String>,
}

type Finished = (CellOutcome, Vec<String>);

fn plan(base: &ExperimentConfig, axes: &[Axis]) -> LabResult<Vec<Planned>> {
    let mut out = Vec::new();
    for cell in cells(axes) {
        let mut cfg = base.clone();
        for (k, v) in &cell.assignment {
            apply(&mut cfg, k, v)?;
        }
        let invalid = cfg.validate().err().map(|e| e.to_string());
        out.push(Planned { cell, cfg, invalid });
    }
    Ok(out)
}

fn comparison_row(
    cell: &Cell,
    cfg: &ExperimentConfig,
    status: &str,
    summary: Option<&crate::artifacts::RunSummary>,
) -> Vec<String> {
    let est = &cfg.estimator;
    let mut row = vec![
        cell.name.clone(),
        cfg.objective.kind.name().to_string(),
        est.formula.name().to_string(),
        est.weighting.name().to_string(),
        est.mc_scheme.name().to_string(),
        est.ratio_mode.name().to_string(),
        cfg.sampler.mode.name().to_string(),
        status.to_string(),
    ];
    match summary.and_then(|s| s.final_metrics.as_ref().map(|m| (s, m))) {
        Some((s, m)) => row.extend([
            s.epochs_completed.to_string(),
            m.mean_reward.to_string(),
            m.kl_to_ref.to_string(),
            m.tv_to_oracle.to_string(),
            m.nfe_cumulative.to_string(),
            m.ratio_warnings.to_string(),
        ]),
        None => row.extend(std::iter::repeat_n(String::new(), 6)),
    }
    row
}

/// Runs every valid cell under `root/<cell>` with the base seed, then
/// writes `comparison.csv` and `sweep_summary.json` into `root`.
pub fn run_sweep(
    base: &ExperimentConfig,
    axes: &[Axis],
    root: &Path,
    opts: &SweepOptions,
) -> LabResult<SweepSummary> {
    let planned = plan(base, axes)?;
    create_dir(root)?;
    let run_opts = RunOptions::default();
    let results: Vec<Mutex<Option<Finished>>> = planned.iter().map(|_| Mutex::new(None)).collect();
    let run_one = |i: usize| {
        let p = &planned[i];
        let result = match &p.invalid {
            Some(reason) => {
                if opts.log {
                    eprintln!("skipping {}: {reason}", p.cell.name);
                }
                (
                    CellOutcome {
                        cell: p.cell.name.clone(),
                        status: String::from("invalid"),
                        reason: Some(reason.clone()),
                        dir: None,
                    },
                    comparison_row(&p.cell, &p.cfg, "invalid", None),
                )
            }
            None => {
                let cfg = &p.cfg;
                let dir = root.join(&p.cell.name);
                if opts.log {
                    eprintln!("running {}", p.cell.name);
                }
                let outcome = run_experiment(cfg, &dir, &run_opts);
                let summary = crate::artifacts::read_json(&dir.join("summary.json")).ok();
                let (status, reason) = match &outcome {
                    Ok(_) => ("completed", None),
                    Err(LabError::Numerical(m)) => ("aborted", Some(m.clone())),
                    Err(e) => ("failed", Some(e.to_string())),
                };
                (
                    CellOutcome {
                        cell: p.cell.name.clone(),
                        status: status.to_string(),
                        reason,
                        dir: Some(dir),
                    },
                    comparison_row(&p.cell, cfg, status, summary.as_ref()),
                )
            }
        };
        *results[i].lock().expect("no poisoned cells") = Some(result);
    };
    let jobs = opts.jobs.max(1);
    if jobs == 1 {
        (0..planned.len()).for_each(run_one);
    } else {
        let next = Mutex::new(0usize);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(planned.len()) {
                s.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().expect("counter");
                        let i = *n;
                        *n += 1;
                        i
                    };
                    if i >= planned.len() {
                        break;
                    }
                    run_one(i);
                });
            }
        });
    }
    let finished: Vec<Finished> = results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("no poisoned cells")
                .expect("every cell ran")
        })
        .collect();
    let path = root.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(COMPARISON_HEADER.split(','))?;
    for (_, row) in &finished {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| LabError::io(&path, e))?;
    let outcomes: Vec<CellOutcome> = finished.into_iter().map(|(o, _)| o).collect();
    let count = |s: &str| outcomes.iter().filter(|o| o.status == s).count();
    let summary = SweepSummary {
        build_id: BUILD_ID.to_string(),
        seed: base.seed,
        cells: outcomes.len(),
        completed: count("completed"),
        invalid: count("invalid"),
        failed: count("failed") + count("aborted"),
        outcomes,
    };
    write_json(&root.join("sweep_summary.json"), &summary)?;
    Ok(summary)
}
