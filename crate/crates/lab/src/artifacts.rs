//! On-disk formats: metrics CSV, checkpoints, summaries and oracle exports.

use std::fs::{self, File};
use std::path::Path;

use flowrl_core::config::ExperimentConfig;
use flowrl_core::numerics::{ParamSet, Tensor};
use flowrl_core::oracles::{GaussianParams, GridDistribution};
use flowrl_core::training::{MetricsRow, Trainer, METRICS_HEADER};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

/// Identifies the build that produced an artifact, `git describe` style.
pub const BUILD_ID: &str = env!("FLOWRL_BUILD_ID");

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> LabResult<T> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Other(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> LabResult<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

/// Appends metrics rows, flushing each so partial runs stay readable.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> LabResult<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        inner.write_record(METRICS_HEADER.split(','))?;
        inner.flush().map_err(|e| LabError::io(path, e))?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &MetricsRow) -> LabResult<()> {
        self.inner.serialize(row)?;
        self.inner
            .flush()
            .map_err(|e| LabError::Other(format!("metrics flush: {e}")))
    }
}

pub fn read_metrics(path: &Path) -> LabResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(LabError::Other(format!(
            "{}: unexpected header {}",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(LabError::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Start within the flat array.
    pub offset: usize,
}

/// Describes how the flat parameter arrays of a checkpoint are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub build_id: String,
    pub epoch: usize,
    pub nfe: u64,
    pub parameter_count: usize,
    /// Dense layers as (weight, bias) pairs, then the condition embedding.
    pub tensors: Vec<TensorEntry>,
    pub theta: String,
    pub theta_old: String,
}

fn flatten<P: ParamSet>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data().to_vec()).collect()
}

pub fn write_checkpoint(dir: &Path, trainer: &Trainer) -> LabResult<()> {
    create_dir(dir)?;
    let mut offset = 0;
    let tensors = trainer
        .state
        .theta
        .tensors()
        .iter()
        .map(|t| {
            let e = TensorEntry {
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        build_id: BUILD_ID.to_string(),
        epoch: trainer.state.epoch,
        nfe: trainer.state.nfe,
        parameter_count: trainer.parameter_count(),
        tensors,
        theta: String::from("theta.json"),
        theta_old: String::from("theta_old.json"),
    };
    write_json(&dir.join("theta.json"), &flatten(&trainer.state.theta))?;
    write_json(
        &dir.join("theta_old.json"),
        &flatten(&trainer.state.theta_old),
    )?;
    write_json(&dir.join("manifest.json"), &manifest)
}

fn fill<P: ParamSet>(p: &mut P, flat: &[f64], manifest: &CheckpointManifest) -> LabResult<()> {
    let mut tensors = p.tensors_mut();
    if tensors.len() != manifest.tensors.len() || flat.len() != manifest.parameter_count {
        return Err(LabError::config(
            "checkpoint",
            "parameter layout does not match the configured model",
        ));
    }
    for (t, e) in tensors.iter_mut().zip(&manifest.tensors) {
        if t.shape() != e.shape.as_slice() {
            return Err(LabError::config(
                "checkpoint",
                format!(
                    "tensor shape {:?} where the model has {:?}",
                    e.shape,
                    t.shape()
                ),
            ));
        }
        let n = t.len();
        **t = Tensor::new(e.shape.clone(), flat[e.offset..e.offset + n].to_vec())?;
    }
    Ok(())
}

/// Loads `theta` and `theta_old` into a trainer built from the same config.
pub fn restore_checkpoint(dir: &Path, trainer: &mut Trainer) -> LabResult<CheckpointManifest> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let theta: Vec<f64> = read_json(&dir.join(&manifest.theta))?;
    let theta_old: Vec<f64> = read_json(&dir.join(&manifest.theta_old))?;
    fill(&mut trainer.state.theta, &theta, &manifest)?;
    fill(&mut trainer.state.theta_old, &theta_old, &manifest)?;
    trainer.state.epoch = manifest.epoch;
    trainer.state.nfe = manifest.nfe;
    Ok(manifest)
}

/// `summary.json` of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub build_id: String,
    /// `completed` or `aborted`.
    pub status: String,
    pub epochs_completed: usize,
    #[serde(rename = "final")]
    pub final_metrics: Option<MetricsRow>,
    pub parameter_count: usize,
    pub oracle_mean_reward: Option<f64>,
    /// Closed-form optimum per condition, for quadratic rewards.
    pub oracle_gaussian: Option<Vec<GaussianParams>>,
    pub total_wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
}

/// Grid as tidy CSV: one row per cell with its center and mass.
pub fn write_grid_csv(path: &Path, grid: &GridDistribution) -> LabResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..grid.dim()).map(|j| format!("x{j}")).collect();
    header.push(String::from("mass"));
    w.write_record(&header)?;
    for (i, m) in grid.masses.iter().enumerate() {
        let mut rec: Vec<String> = grid.center(i).iter().map(|x| x.to_string()).collect();
        rec.push(m.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}
