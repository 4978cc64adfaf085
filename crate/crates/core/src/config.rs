//! The full experiment configuration and its cross-field validation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FieldModel, GaussianReference};
use crate::likelihood::{EstimatorConfig, Formula};
use crate::numerics::{Activation, AdamConfig};
use crate::objectives::ObjectiveConfig;
use crate::oracles::RewardSpec;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    #[serde(default = "one")]
    pub conditions: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Diagonal Gaussian `pi_ref` per condition; standard normal if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
}

fn one() -> usize {
    1
}
fn default_embed() -> usize {
    4
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            conditions: 1,
            embed_dim: default_embed(),
            hidden: default_hidden(),
            activation: default_activation(),
            reference: None,
        }
    }

    pub fn reference(&self) -> Result<GaussianReference> {
        match &self.reference {
            None => Ok(GaussianReference::standard(self.dim, self.conditions)),
            Some(r) => GaussianReference::new(r.means.clone(), r.variances.clone())
                .map_err(|e| Error::config("model.reference", format!("{e}"))),
        }
    }

    pub fn field_model(&self) -> Result<FieldModel> {
        Ok(FieldModel {
            dim: self.dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            base: self.reference()?,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model.dim", "must be positive"));
        }
        if self.conditions == 0 {
            return Err(Error::config("model.conditions", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(
                "model.hidden",
                "layer widths must be positive",
            ));
        }
        let r = self.reference()?;
        if r.conditions() != self.conditions || r.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::config(
                "model.reference",
                format!(
                    "needs {} conditions of dimension {}",
                    self.conditions, self.dim
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_prompts")]
    pub prompts_per_epoch: usize,
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default = "one")]
    pub grad_steps: usize,
    /// `1`: `min(0.001 i, 0.5)`; `2`: `min(0.01 i, 0.8)`.
    #[serde(default = "default_decay")]
    pub ema_decay: u32,
    #[serde(default = "default_optimizer")]
    pub optimizer: AdamConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_prompts() -> usize {
    8
}
fn default_group() -> usize {
    8
}
fn default_decay() -> u32 {
    1
}
fn default_optimizer() -> AdamConfig {
    AdamConfig::with_lr(1e-3)
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            prompts_per_epoch: default_prompts(),
            group_size: default_group(),
            grad_steps: 1,
            ema_decay: default_decay(),
            optimizer: default_optimizer(),
            grad_clip: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.prompts_per_epoch", self.prompts_per_epoch),
            ("train.grad_steps", self.grad_steps),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.group_size < 2 {
            return Err(Error::config(
                "train.group_size",
                "groups need at least 2 rollouts",
            ));
        }
        if self.grad_steps > self.prompts_per_epoch * self.group_size {
            return Err(Error::config(
                "train.grad_steps",
                "more gradient steps than rollouts per epoch",
            ));
        }
        if !matches!(self.ema_decay, 1 | 2) {
            return Err(Error::config(
                "train.ema_decay",
                "decay type must be 1 or 2",
            ));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::config(
                "train.optimizer.lr",
                "must be finite and non-negative",
            ));
        }
        if !(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0) {
            return Err(Error::config("train.optimizer", "betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("train.optimizer.eps", "must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples drawn from the current policy per metrics row.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    /// Oracle grid bins per axis.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Monte-Carlo draws per sample for the KL metric.
    #[serde(default = "one")]
    pub kl_mc: usize,
}

fn default_eval_samples() -> usize {
    2000
}
fn default_bins() -> usize {
    crate::oracles::DEFAULT_BINS
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            bins: default_bins(),
            kl_mc: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub estimator: EstimatorConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub reward: RewardSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    /// Estimator config with the grid resolution resolved from the sampler.
    pub fn resolved_estimator(&self) -> EstimatorConfig {
        let mut e = self.estimator;
        if e.steps.is_none() {
            e.steps = Some(self.sampler.steps);
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.resolved_estimator().validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.reward
            .validate(self.model.dim, self.model.conditions)?;
        if self.estimator.formula == Formula::Trajectory && !self.sampler.mode.is_sde() {
            return Err(Error::config(
                "estimator.formula",
                format!(
                    "the trajectory estimator can only be computed with the SDE sampler, got sampler.mode = {}",
                    self.sampler.mode.name()
                ),
            ));
        }
        if self.eval.samples == 0 || self.eval.bins == 0 || self.eval.kl_mc == 0 {
            return Err(Error::config(
                "eval",
                "samples, bins and kl_mc must be positive",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{McScheme, RatioMode, Weighting};
    use crate::objectives::ObjectiveKind;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            seed: 1,
            model: ModelConfig::new(1),
            sampler: SamplerConfig::ode(10),
            estimator: EstimatorConfig::elbo(Weighting::Adaptive, McScheme::SingleTimestep),
            objective: ObjectiveConfig::new(ObjectiveKind::Pepg),
            train: TrainConfig::new(5),
            reward: RewardSpec::standard_quadratic(1),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }

    #[test]
    fn trajectory_with_ode_is_rejected_naming_the_sampler() {
        let mut c = base();
        c.estimator = EstimatorConfig::trajectory(RatioMode::ExpOfSum);
        match c.validate() {
            Err(Error::Config { path, reason }) => {
                assert_eq!(path, "estimator.formula");
                assert!(reason.contains("SDE sampler"));
            }
            other => panic!("{other:?}"),
        }
        c.sampler = SamplerConfig::sde(40, 0.7);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn nested_paths_are_reported() {
        let mut c = base();
        c.train.group_size = 1;
        assert!(
            matches!(c.validate(), Err(Error::Config { path, .. }) if path == "train.group_size")
        );
        let mut c = base();
        c.reward = RewardSpec::standard_quadratic(2);
        assert!(
            matches!(c.validate(), Err(Error::Config { path, .. }) if path == "reward.centers")
        );
    }

    #[test]
    fn estimator_grid_follows_sampler() {
        assert_eq!(base().resolved_estimator().steps, Some(10));
    }
}
