//! The outer loop: rollouts under the old policy, advantage estimation,
//! mini-batch gradient steps on the current policy and the EMA update of the
//! old policy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::flow::{FieldModel, FieldParams, FieldView, GaussianReference};
use crate::likelihood::{
    estimate_kl, evaluate_terms, prepare_terms, EstimatorConfig, LikelihoodInput,
    LikelihoodWorkspace, Policy, PreparedTerms,
};
use crate::numerics::{adam_step, AdamState, ParamGrads, ParamSet, Tape};
use crate::objectives::{objective_loss, LossInputs, RolloutGroup};
use crate::oracles::{oracle_grid, reward, reward_grid, tv_distance, GridDistribution};
use crate::rng::{self, derive_key, stream};
use crate::sampler::{sample_batch, RolloutRequest, SamplerConfig};

/// Header of the per-epoch metrics CSV.
pub const METRICS_HEADER: &str =
    "epoch,mean_reward,kl_to_ref,tv_to_oracle,nfe_cumulative,ratio_warnings,wall_ms";

/// Old-policy mixing weight `alpha_i` for epoch `i >= 1`.
pub fn ema_decay(i: usize, decay_type: u32) -> Result<f64> {
    if i == 0 {
        return Err(Error::Domain(String::from("EMA epochs are counted from 1")));
    }
    let i = i as f64;
    match decay_type {
        1 => Ok((0.001 * i).min(0.5)),
        2 => Ok((0.01 * i).min(0.8)),
        other => Err(Error::config(
            "train.ema_decay",
            format!("unknown decay type {other}"),
        )),
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub mean_reward: f64,
    pub kl_to_ref: f64,
    pub tv_to_oracle: f64,
    pub nfe_cumulative: u64,
    pub ratio_warnings: u64,
    pub wall_ms: u64,
}

/// Training-time summary of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean reward of the epoch's rollouts under the old policy.
    pub rollout_reward: f64,
    pub losses: Vec<f64>,
    pub alpha: f64,
    pub clipped: usize,
    pub skipped_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub theta: FieldParams,
    pub theta_old: FieldParams,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Velocity evaluations spent on training rollouts.
    pub nfe: u64,
    pub ratio_warnings: u64,
}

/// A configured experiment and its evolving state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: FieldModel,
    pub reference: GaussianReference,
    pub state: TrainState,
    estimator: EstimatorConfig,
    oracles: Option<Vec<GridDistribution>>,
    /// Group whose loss went non-finite, kept for diagnostics.
    pub failed_group: Option<RolloutGroup>,
    /// When set, each epoch keeps its rollouts and estimator workspaces.
    pub capture: bool,
    pub captured: Option<EpochCapture>,
}

/// Everything an epoch's estimator touched, for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCapture {
    pub epoch: usize,
    pub groups: Vec<RolloutGroup>,
    /// One per gradient step.
    pub workspaces: Vec<LikelihoodWorkspace>,
}

struct Sample {
    group: usize,
    member: usize,
    advantage: f64,
    mask: f64,
}

impl Trainer {
    /// Validates `config` and initializes `theta = theta_old = theta_ref`.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model.field_model()?;
        let reference = config.model.reference()?;
        let theta = model.init_params(true, &mut stream(config.seed, "init", &[]))?;
        let optimizer = AdamState::new(config.train.optimizer, &theta);
        let oracles = if config.model.dim <= 2 {
            let beta = config.objective.beta;
            (0..config.model.conditions)
                .map(|c| oracle_grid(&reference, &config.reward, beta, c, config.eval.bins))
                .collect::<Result<Vec<_>>>()
                .map(Some)?
        } else {
            None
        };
        Ok(Self {
            estimator: config.resolved_estimator(),
            state: TrainState {
                theta_old: theta.clone(),
                theta,
                optimizer,
                epoch: 0,
                nfe: 0,
                ratio_warnings: 0,
            },
            config,
            model,
            reference,
            oracles,
            failed_group: None,
            capture: false,
            captured: None,
        })
    }

    /// Oracle distribution for condition `c`, when `d <= 2`.
    pub fn oracle(&self, c: usize) -> Option<&GridDistribution> {
        self.oracles.as_ref().map(|o| &o[c])
    }

    /// `E_{pi*}[R]` averaged over conditions.
    pub fn oracle_mean_reward(&self) -> Option<f64> {
        let oracles = self.oracles.as_ref()?;
        let total: f64 = oracles
            .iter()
            .enumerate()
            .map(|(c, g)| {
                reward_grid(&self.config.reward, g, c)
                    .iter()
                    .zip(&g.masses)
                    .map(|(r, m)| r * m)
                    .sum::<f64>()
            })
            .sum();
        Some(total / oracles.len() as f64)
    }

    pub fn theta(&self) -> FieldView<'_> {
        FieldView {
            model: &self.model,
            params: &self.state.theta,
        }
    }

    pub fn theta_old(&self) -> FieldView<'_> {
        FieldView {
            model: &self.model,
            params: &self.state.theta_old,
        }
    }

    fn rollouts(&self, epoch: usize) -> Result<(Vec<RolloutGroup>, u64)> {
        let cfg = &self.config;
        let (p, g) = (cfg.train.prompts_per_epoch, cfg.train.group_size);
        let mut prompt_rng = stream(cfg.seed, "prompts", &[epoch as u64]);
        let mut sampler = cfg.sampler;
        sampler.record_trajectory =
            self.estimator.formula == crate::likelihood::Formula::Trajectory;
        let old = self.theta_old();
        let mut groups = Vec::with_capacity(p);
        let mut nfe = 0;
        for prompt in 0..p {
            let c = rng::index(&mut prompt_rng, cfg.model.conditions);
            let requests: Vec<RolloutRequest> = (0..g)
                .map(|m| RolloutRequest {
                    condition: c,
                    stream_key: derive_key(
                        cfg.seed,
                        "rollout",
                        &[epoch as u64, prompt as u64, c as u64, m as u64],
                    ),
                })
                .collect();
            let out = sample_batch(&old, &sampler, &requests)?;
            nfe += out.nfe;
            let rewards = out
                .terminals
                .iter()
                .map(|x| reward(&cfg.reward, x, c))
                .collect();
            groups.push(RolloutGroup::new(
                c,
                out.terminals,
                rewards,
                out.trajectories,
                &cfg.objective,
            )?);
        }
        Ok((groups, nfe))
    }

    fn minibatches(&self, groups: &[RolloutGroup]) -> Vec<Vec<Sample>> {
        let mut flat = Vec::new();
        for (gi, grp) in groups.iter().enumerate() {
            for m in 0..grp.len() {
                flat.push(Sample {
                    group: gi,
                    member: m,
                    advantage: grp.advantages[m],
                    mask: if grp.skip { 0.0 } else { 1.0 },
                });
            }
        }
        let k = self.config.train.grad_steps;
        let size = flat.len() / k;
        let mut batches: Vec<Vec<Sample>> = Vec::with_capacity(k);
        let mut it = flat.into_iter();
        for b in 0..k {
            let take = if b + 1 == k { usize::MAX } else { size };
            batches.push(it.by_ref().take(take).collect());
        }
        batches
    }

    fn prepare(
        &self,
        epoch: usize,
        batch: &[Sample],
        groups: &[RolloutGroup],
    ) -> Result<PreparedTerms> {
        let inputs: Vec<LikelihoodInput<'_>> = batch
            .iter()
            .map(|s| {
                let grp = &groups[s.group];
                match &grp.trajectories {
                    Some(t) if self.estimator.formula == crate::likelihood::Formula::Trajectory => {
                        LikelihoodInput::Path(&t[s.member])
                    }
                    _ => LikelihoodInput::Terminal {
                        x0: &grp.samples[s.member],
                        condition: grp.condition,
                    },
                }
            })
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = batch
            .iter()
            .map(|s| {
                stream(
                    self.config.seed,
                    "estimator",
                    &[epoch as u64, s.group as u64, s.member as u64],
                )
            })
            .collect();
        let old = self.theta_old();
        prepare_terms(
            &old,
            Some(&self.reference),
            &inputs,
            &self.estimator,
            &mut rngs,
        )
    }

    /// One gradient step on `prepared`; returns the loss, the clip count and,
    /// when capturing, the workspace.
    fn step(
        &mut self,
        prepared: &PreparedTerms,
        batch: &[Sample],
    ) -> Result<(f64, usize, Option<LikelihoodWorkspace>)> {
        let mut tape = Tape::new();
        let bound = self.state.theta.bind(&mut tape);
        let terms = evaluate_terms(
            &mut tape,
            Policy::Taped {
                model: &self.model,
                bound: &bound,
            },
            prepared,
        )?;
        let advantages: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        let mask: Vec<f64> = batch.iter().map(|s| s.mask).collect();
        let any_masked = mask.contains(&0.0);
        let loss = objective_loss(
            &mut tape,
            LossInputs {
                advantages: &advantages,
                mask: any_masked.then_some(mask.as_slice()),
                terms: &terms,
            },
            &self.config.objective,
        )?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let mut pg = ParamGrads(bound.vars().into_iter().map(|v| grads.get(v)).collect());
        if let Some(c) = self.config.train.grad_clip {
            pg.clip_global_norm(c);
        }
        adam_step(&mut self.state.optimizer, &mut self.state.theta, &pg)?;
        let ws = self.capture.then_some(terms.workspace);
        Ok((value, terms.clipped, ws))
    }

    /// Rollouts, gradient steps over the epoch's mini-batches, EMA update.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let epoch = self.state.epoch + 1;
        let (groups, nfe) = self.rollouts(epoch)?;
        let batches = self.minibatches(&groups);
        let prepared = batches
            .iter()
            .map(|b| self.prepare(epoch, b, &groups))
            .collect::<Result<Vec<_>>>()?;
        let mut losses = Vec::with_capacity(batches.len());
        let mut clipped = 0;
        let mut workspaces = Vec::new();
        for (b, p) in batches.iter().zip(&prepared) {
            match self.step(p, b) {
                Ok((l, c, ws)) => {
                    losses.push(l);
                    clipped += c;
                    workspaces.extend(ws);
                }
                Err(e) => {
                    if let Some(s) = b.first() {
                        self.failed_group = Some(groups[s.group].clone());
                    }
                    return Err(e);
                }
            }
        }
        let alpha = ema_decay(epoch, self.config.train.ema_decay)?;
        let theta = self.state.theta.clone();
        self.state.theta_old.ema_into(&theta, alpha);
        self.state.epoch = epoch;
        self.state.nfe += nfe;
        self.state.ratio_warnings += clipped as u64;
        let n: usize = groups.iter().map(|g| g.len()).sum();
        let rollout_reward = groups.iter().flat_map(|g| g.rewards.iter()).sum::<f64>() / n as f64;
        let skipped_groups = groups.iter().filter(|g| g.skip).count();
        if self.capture {
            self.captured = Some(EpochCapture {
                epoch,
                groups,
                workspaces,
            });
        }
        Ok(EpochReport {
            epoch,
            rollout_reward,
            losses,
            alpha,
            clipped,
            skipped_groups,
        })
    }

    /// Samples from the current policy with noise fixed across epochs.
    pub fn eval_samples(
        &self,
        count: usize,
        sampler: &SamplerConfig,
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        let conds = self.config.model.conditions;
        let requests: Vec<RolloutRequest> = (0..count)
            .map(|j| RolloutRequest {
                condition: j % conds,
                stream_key: derive_key(self.config.seed, "eval", &[j as u64]),
            })
            .collect();
        let mut s = *sampler;
        s.record_trajectory = false;
        let out = sample_batch(&self.theta(), &s, &requests)?;
        Ok(requests
            .iter()
            .map(|r| r.condition)
            .zip(out.terminals)
            .collect())
    }

    /// Metrics for the current policy; `wall_ms` is left to the caller.
    pub fn evaluate(&self) -> Result<MetricsRow> {
        self.evaluate_with(self.config.eval.samples)
    }

    pub fn evaluate_with(&self, count: usize) -> Result<MetricsRow> {
        let cfg = &self.config;
        let samples = self.eval_samples(count, &cfg.sampler)?;
        let mean_reward = samples
            .iter()
            .map(|(c, x)| reward(&cfg.reward, x, *c))
            .sum::<f64>()
            / count as f64;
        let conds = cfg.model.conditions;
        let mut kl_total = 0.0;
        let mut tv_total = 0.0;
        for c in 0..conds {
            let xs: Vec<Vec<f64>> = samples
                .iter()
                .filter(|(ci, _)| *ci == c)
                .map(|(_, x)| x.clone())
                .collect();
            if xs.is_empty() {
                continue;
            }
            let mut r = stream(cfg.seed, "eval-kl", &[c as u64]);
            let kl = estimate_kl(
                &self.theta(),
                &self.reference,
                &xs,
                c,
                &mut r,
                cfg.eval.kl_mc,
                &self.estimator,
            )?;
            kl_total += kl.value * xs.len() as f64;
            if let Some(o) = self.oracle(c) {
                tv_total += tv_distance(&xs, o)?.tv * xs.len() as f64;
            }
        }
        let tv_to_oracle = if self.oracles.is_some() {
            tv_total / count as f64
        } else {
            f64::NAN
        };
        Ok(MetricsRow {
            epoch: self.state.epoch,
            mean_reward,
            kl_to_ref: kl_total / count as f64,
            tv_to_oracle,
            nfe_cumulative: self.state.nfe,
            ratio_warnings: self.state.ratio_warnings,
            wall_ms: 0,
        })
    }

    /// Sample mean and variance per coordinate under the current policy.
    pub fn sample_moments(&self, count: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let samples = self.eval_samples(count, &self.config.sampler)?;
        let d = self.config.model.dim;
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for (_, x) in &samples {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for (_, x) in &samples {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        Ok((mean, var))
    }

    /// Parameter count of `theta`.
    pub fn parameter_count(&self) -> usize {
        self.state.theta.parameter_count()
    }
}
