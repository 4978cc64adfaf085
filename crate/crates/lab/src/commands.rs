//! Oracle export, gradient checks and checkpoint evaluation.

use std::path::{Path, PathBuf};

use flowrl_core::config::ExperimentConfig;
use flowrl_core::gradcheck::{run_suite, GradCheckOptions, GradCheckReport, SuiteSpec};
use flowrl_core::numerics::{BackwardFault, OpKind};
use flowrl_core::oracles::{
    oracle_grid, proximal_gaussian_step, proximal_recursion, tilted_gaussian_oracle,
    GaussianParams, GridDistribution, RewardSpec,
};
use flowrl_core::training::{MetricsRow, Trainer};
use serde::{Deserialize, Serialize};

use crate::artifacts::{create_dir, restore_checkpoint, write_grid_csv, write_json, BUILD_ID};
use crate::error::{LabError, LabResult};

/// Relative tolerance of the gradient suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Proximal step size; `None` takes the config's.
    pub eta: Option<f64>,
    pub iterations: usize,
    /// The recursion stops early once TV to the target falls below this.
    pub tv_floor: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            eta: None,
            iterations: 200,
            tv_floor: 1e-13,
        }
    }
}

/// Per-condition closed forms written to `gaussian.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianOracle {
    pub condition: usize,
    pub reference: GaussianParams,
    pub oracle: GaussianParams,
    /// One proximal step from the reference.
    pub proximal_step: GaussianParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConditionSummary {
    pub condition: usize,
    pub cells: usize,
    pub mass_sum: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub iterations: usize,
    pub final_tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub build_id: String,
    pub beta: f64,
    pub eta: f64,
    pub conditions: Vec<OracleConditionSummary>,
    pub gaussian: Option<Vec<GaussianOracle>>,
}

/// Iterations whose full masses land in `proximal_iterates_c<c>.csv`.
fn saved_iterate(k: usize) -> bool {
    k <= 2 || [5, 10, 20, 50, 100, 200].contains(&k)
}

fn write_iterates(path: &Path, iterates: &[(usize, &GridDistribution)]) -> LabResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some((_, first)) = iterates.first() else {
        return Ok(());
    };
    let mut header = vec![String::from("iteration")];
    header.extend((0..first.dim()).map(|j| format!("x{j}")));
    header.push(String::from("mass"));
    w.write_record(&header)?;
    for (k, g) in iterates {
        for (i, m) in g.masses.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(g.center(i).iter().map(|x| x.to_string()));
            rec.push(m.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Writes the tilt grid, the proximal iterates and, for quadratic rewards,
/// the closed-form Gaussians for every condition.
pub fn run_oracle(
    cfg: &ExperimentConfig,
    dir: &Path,
    opts: &OracleOptions,
) -> LabResult<OracleSummary> {
    cfg.validate()?;
    let eta = opts.eta.unwrap_or(cfg.objective.eta);
    if !(eta > 0.0) {
        return Err(LabError::config(
            "eta",
            format!("must be positive, got {eta}"),
        ));
    }
    let beta = cfg.objective.beta;
    let reference = cfg.model.reference()?;
    create_dir(dir)?;
    let mut conditions = Vec::new();
    for c in 0..cfg.model.conditions {
        let target = oracle_grid(&reference, &cfg.reward, beta, c, cfg.eval.bins)?;
        write_grid_csv(&dir.join(format!("grid_c{c}.csv")), &target)?;
        let pi_0 = GridDistribution::from_log_density(
            target.lower.clone(),
            target.upper.clone(),
            target.bins,
            |x| reference.log_density(x, c),
        )?;
        let tv_path = dir.join(format!("proximal_tv_c{c}.csv"));
        let mut tv_csv = csv::Writer::from_path(&tv_path)?;
        tv_csv.write_record(["iteration", "tv_to_target"])?;
        let mut current = pi_0;
        let mut tv = current.tv(&target)?;
        tv_csv.write_record([String::from("0"), tv.to_string()])?;
        let mut saved = vec![(0, current.clone())];
        let mut done = 0;
        for k in 1..=opts.iterations {
            if tv <= opts.tv_floor {
                break;
            }
            let next = proximal_recursion(&target, &current, eta)?;
            let next_tv = next.tv(&target)?;
            // Past the rounding floor TV stalls; the column stays strictly decreasing.
            if !(next_tv < tv) {
                break;
            }
            current = next;
            tv = next_tv;
            done = k;
            tv_csv.write_record([k.to_string(), tv.to_string()])?;
            if saved_iterate(k) {
                saved.push((k, current.clone()));
            }
        }
        tv_csv.flush().map_err(|e| LabError::io(&tv_path, e))?;
        if saved.last().map(|s| s.0) != Some(done) {
            saved.push((done, current.clone()));
        }
        let refs: Vec<(usize, &GridDistribution)> = saved.iter().map(|(k, g)| (*k, g)).collect();
        write_iterates(&dir.join(format!("proximal_iterates_c{c}.csv")), &refs)?;
        conditions.push(OracleConditionSummary {
            condition: c,
            cells: target.cells(),
            mass_sum: target.masses.iter().sum(),
            mean: target.mean(),
            variance: target.variance(),
            iterations: done,
            final_tv: tv,
        });
    }
    let gaussian = if matches!(cfg.reward, RewardSpec::Quadratic { .. }) {
        let mut out = Vec::new();
        for c in 0..cfg.model.conditions {
            let ref_params = GaussianParams {
                mean: reference.means[c].clone(),
                variance: reference.variances[c].clone(),
            };
            let oracle = tilted_gaussian_oracle(&reference, &cfg.reward, beta, c)?;
            out.push(GaussianOracle {
                condition: c,
                proximal_step: proximal_gaussian_step(&oracle, &ref_params, eta),
                reference: ref_params,
                oracle,
            });
        }
        write_json(&dir.join("gaussian.json"), &out)?;
        Some(out)
    } else {
        None
    };
    let summary = OracleSummary {
        build_id: BUILD_ID.to_string(),
        beta,
        eta,
        conditions,
        gaussian,
    };
    write_json(&dir.join("oracle_summary.json"), &summary)?;
    Ok(summary)
}

/// Suite shapes from a config: model sizes, seed and objective strengths.
pub fn suite_from_config(cfg: &ExperimentConfig) -> SuiteSpec {
    SuiteSpec {
        dim: cfg.model.dim,
        conditions: cfg.model.conditions,
        hidden: cfg.model.hidden.clone(),
        seed: cfg.seed,
        beta: cfg.objective.beta,
        eta: cfg.objective.eta,
        clip_eps: cfg.objective.clip_eps,
    }
}

pub fn parse_op(name: &str) -> LabResult<OpKind> {
    OpKind::DIFFERENTIABLE
        .into_iter()
        .find(|op| op.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|o| o.name()).collect();
            LabError::config(
                "corrupt-op",
                format!("unknown op `{name}`; expected one of {}", known.join(", ")),
            )
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutput {
    pub build_id: String,
    pub passed: bool,
    /// Deliberately broken backward rule, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupted_op: Option<String>,
    pub offending_ops: Vec<String>,
    pub failed_checks: Vec<String>,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

pub fn run_gradcheck(spec: &SuiteSpec, corrupt: Option<OpKind>) -> LabResult<GradCheckOutput> {
    let mut opts = GradCheckOptions::with_tolerance(GRADCHECK_TOLERANCE);
    opts.fault = corrupt.map(|op| BackwardFault { op, factor: 1.5 });
    let report = run_suite(spec, &opts)?;
    Ok(GradCheckOutput {
        build_id: BUILD_ID.to_string(),
        passed: report.passed(),
        corrupted_op: corrupt.map(|o| o.name().to_string()),
        offending_ops: report
            .offending_ops()
            .into_iter()
            .map(String::from)
            .collect(),
        failed_checks: report.failures().map(|c| c.name.clone()).collect(),
        report,
    })
}

/// Metrics of a checkpoint, with the config it was trained under.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> LabResult<MetricsRow> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.clone())?;
    restore_checkpoint(checkpoint, &mut trainer)?;
    Ok(trainer.evaluate()?)
}

/// A run directory's final checkpoint, or the path itself if it already is
/// one.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join("manifest.json").is_file() {
        path.to_path_buf()
    } else {
        path.join("checkpoints").join("final")
    }
}
