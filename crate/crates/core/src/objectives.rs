//! Group advantages and the four policy-gradient losses.
//!
//! Losses are returned as scalars to minimize. Per-sample terms are
//! averaged over every sample in the batch, masked ones included.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::GroupTerms;
use crate::numerics::{Tape, Tensor, Var};
use crate::sampler::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Epg,
    Pepg,
    Par,
    Grpo,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Epg => "epg",
            ObjectiveKind::Pepg => "pepg",
            ObjectiveKind::Par => "par",
            ObjectiveKind::Grpo => "grpo",
        }
    }

    fn uses_eta(self) -> bool {
        matches!(self, ObjectiveKind::Pepg | ObjectiveKind::Par)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageNorm {
    MeanCentered,
    MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// KL strength.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Proximal step size (PEPG, PAR).
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_clip")]
    pub clip_eps: f64,
    /// `None` picks mean-std for GRPO and mean-centering otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage_norm: Option<AdvantageNorm>,
    #[serde(default = "default_floor")]
    pub std_floor: f64,
}

fn default_beta() -> f64 {
    1e-3
}
fn default_eta() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    0.2
}
fn default_floor() -> f64 {
    1e-8
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            beta: default_beta(),
            eta: default_eta(),
            clip_eps: default_clip(),
            advantage_norm: None,
            std_floor: default_floor(),
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn advantage_norm(&self) -> AdvantageNorm {
        self.advantage_norm.unwrap_or(match self.kind {
            ObjectiveKind::Grpo => AdvantageNorm::MeanStd,
            _ => AdvantageNorm::MeanCentered,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("objective.beta", "must be positive"));
        }
        if self.kind.uses_eta() && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("objective.eta", "must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("objective.clip_eps", "must lie in (0, 1)"));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::config("objective.std_floor", "must be positive"));
        }
        Ok(())
    }
}

/// `R - mean(R)`.
pub fn advantage_epg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::config(
            "train.group_size",
            format!("advantages need G >= 2, got {}", rewards.len()),
        ));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoAdvantages {
    pub values: Vec<f64>,
    /// Set when the population std is below the floor; values are zero.
    pub skip: bool,
}

/// `(R - mean) / (std + floor)` with the population std.
pub fn advantage_grpo(rewards: &[f64], std_floor: f64) -> Result<GrpoAdvantages> {
    let centered = advantage_epg(rewards)?;
    let var = centered.iter().map(|a| a * a).sum::<f64>() / centered.len() as f64;
    let std = libm::sqrt(var);
    if std < std_floor {
        return Ok(GrpoAdvantages {
            values: alloc::vec![0.0; centered.len()],
            skip: true,
        });
    }
    Ok(GrpoAdvantages {
        values: centered.iter().map(|a| a / (std + std_floor)).collect(),
        skip: false,
    })
}

/// One condition's rollouts under the old policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub condition: usize,
    pub samples: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Mean-centered or std-normalized, per the objective config. PEPG and
    /// PAR rescale these by `eta / beta` inside the loss.
    pub advantages: Vec<f64>,
    pub skip: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<Vec<Trajectory>>,
}

impl RolloutGroup {
    pub fn new(
        condition: usize,
        samples: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        trajectories: Option<Vec<Trajectory>>,
        cfg: &ObjectiveConfig,
    ) -> Result<Self> {
        if samples.len() != rewards.len()
            || trajectories
                .as_ref()
                .is_some_and(|t| t.len() != samples.len())
        {
            return Err(Error::shape(
                "rollout_group",
                format!("{} samples with {} rewards", samples.len(), rewards.len()),
            ));
        }
        let (advantages, skip) = match cfg.advantage_norm() {
            AdvantageNorm::MeanCentered => (advantage_epg(&rewards)?, false),
            AdvantageNorm::MeanStd => {
                let a = advantage_grpo(&rewards, cfg.std_floor)?;
                (a.values, a.skip)
            }
        };
        Ok(Self {
            condition,
            samples,
            rewards,
            advantages,
            skip,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `A_pepg = A_par = (eta / beta) A_epg`.
pub fn proximal_advantages(advantages: &[f64], cfg: &ObjectiveConfig) -> Vec<f64> {
    let s = cfg.eta / cfg.beta;
    advantages.iter().map(|a| s * a).collect()
}

/// Advantages and sample mask for one mini-batch, aligned with the terms.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub advantages: &'a [f64],
    /// `0` drops a sample from the loss (skip-flagged GRPO groups).
    pub mask: Option<&'a [f64]>,
    pub terms: &'a GroupTerms,
}

fn check(tape: &Tape, inp: &LossInputs<'_>) -> Result<usize> {
    let n = tape.value(inp.terms.ratio).len();
    if inp.advantages.len() != n || inp.mask.is_some_and(|m| m.len() != n) {
        return Err(Error::shape(
            "loss",
            format!(
                "{} advantages for {n} likelihood terms",
                inp.advantages.len()
            ),
        ));
    }
    Ok(n)
}

fn constant(tape: &mut Tape, v: Vec<f64>) -> Var {
    tape.constant(Tensor::vector(v))
}

fn stopped(tape: &mut Tape, v: Vec<f64>) -> Var {
    tape.stop_gradient(Tensor::vector(v))
}

/// `-mean(mask * (surrogate - strength * kl))`.
fn finish(tape: &mut Tape, surrogate: Var, inp: &LossInputs<'_>, strength: f64) -> Result<Var> {
    let mut per = surrogate;
    if let Some(kl) = inp.terms.kl {
        let k = tape.scale(kl, strength);
        per = tape.sub(per, k)?;
    }
    if let Some(mask) = inp.mask {
        let m = constant(tape, mask.to_vec());
        per = tape.mul(per, m)?;
    }
    let mean = tape.mean(per);
    Ok(tape.neg(mean))
}

/// `-mean[sg(rho) A loglik_new - beta kl]`.
pub fn loss_epg(tape: &mut Tape, inp: LossInputs<'_>, cfg: &ObjectiveConfig) -> Result<Var> {
    check(tape, &inp)?;
    if !tape.requires_grad(inp.terms.loglik_new) {
        return Err(Error::Contract(String::from(
            "EPG needs a differentiable log-likelihood",
        )));
    }
    let coef: Vec<f64> = tape
        .value(inp.terms.ratio)
        .data()
        .iter()
        .zip(inp.advantages)
        .map(|(r, a)| r * a)
        .collect();
    let coef = stopped(tape, coef);
    let surrogate = tape.mul(inp.terms.loglik_new, coef)?;
    finish(tape, surrogate, &inp, cfg.beta)
}

/// `-mean[(A_pepg - log sg(rho)) rho - eta kl]`.
pub fn loss_pepg(tape: &mut Tape, inp: LossInputs<'_>, cfg: &ObjectiveConfig) -> Result<Var> {
    check(tape, &inp)?;
    require_ratio_grad(tape, &inp)?;
    let adv = proximal_advantages(inp.advantages, cfg);
    let coef: Vec<f64> = adv
        .iter()
        .zip(tape.value(inp.terms.log_ratio).data())
        .map(|(a, lr)| a - lr)
        .collect();
    let coef = stopped(tape, coef);
    let surrogate = tape.mul(inp.terms.ratio, coef)?;
    finish(tape, surrogate, &inp, cfg.eta)
}

/// `mean[1/2 sg(rho) (A_par - log rho)^2 + eta kl]`.
pub fn loss_par(tape: &mut Tape, inp: LossInputs<'_>, cfg: &ObjectiveConfig) -> Result<Var> {
    check(tape, &inp)?;
    require_ratio_grad(tape, &inp)?;
    let adv = constant(tape, proximal_advantages(inp.advantages, cfg));
    let gap = tape.sub(adv, inp.terms.log_ratio)?;
    let sq = tape.square(gap);
    let half_rho: Vec<f64> = tape
        .value(inp.terms.ratio)
        .data()
        .iter()
        .map(|r| -0.5 * r)
        .collect();
    let w = stopped(tape, half_rho);
    // negated regression term, so `finish` flips it back into a penalty
    let surrogate = tape.mul(sq, w)?;
    finish(tape, surrogate, &inp, cfg.eta)
}

/// `-mean[min(rho A, clip(rho, 1 - eps, 1 + eps) A) - beta kl]`.
pub fn loss_grpo(tape: &mut Tape, inp: LossInputs<'_>, cfg: &ObjectiveConfig) -> Result<Var> {
    check(tape, &inp)?;
    require_ratio_grad(tape, &inp)?;
    let adv = constant(tape, inp.advantages.to_vec());
    let plain = tape.mul(inp.terms.ratio, adv)?;
    let clipped = tape.clamp(inp.terms.ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(plain, clipped)?;
    finish(tape, surrogate, &inp, cfg.beta)
}

fn require_ratio_grad(tape: &Tape, inp: &LossInputs<'_>) -> Result<()> {
    if tape.requires_grad(inp.terms.ratio) {
        Ok(())
    } else {
        Err(Error::Contract(String::from(
            "ratio-based losses need a differentiable ratio",
        )))
    }
}

/// Dispatches on `cfg.kind`.
pub fn objective_loss(tape: &mut Tape, inp: LossInputs<'_>, cfg: &ObjectiveConfig) -> Result<Var> {
    match cfg.kind {
        ObjectiveKind::Epg => loss_epg(tape, inp, cfg),
        ObjectiveKind::Pepg => loss_pepg(tape, inp, cfg),
        ObjectiveKind::Par => loss_par(tape, inp, cfg),
        ObjectiveKind::Grpo => loss_grpo(tape, inp, cfg),
    }
}
