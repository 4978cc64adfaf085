//! Reverse-process integration: Euler-Maruyama for the SDE family and
//! Euler / Heun for the probability-flow ODE.
//!
//! Integration runs from `t_start = 1 - delta` down to `0` over the grid
//! `{(N-1)/N, ..., 1/N, 0}`. The reverse step is `x <- x - drift * dt` with
//! `dt > 0`, which is the sign that keeps the data marginal invariant.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{diffusion_coefficient, Velocity};
use crate::rng;

/// Noise level used for SDE sampling when none is configured.
pub const DEFAULT_SDE_NOISE_LEVEL: f64 = 0.7;
pub const DEFAULT_T_START_CLAMP: f64 = 1e-3;
pub const DEFAULT_ODE_STEPS: usize = 10;
pub const DEFAULT_SDE_STEPS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    SdeEuler,
    OdeEuler,
    OdeHeun2,
}

impl SamplerMode {
    pub fn is_sde(self) -> bool {
        matches!(self, SamplerMode::SdeEuler)
    }

    /// Velocity evaluations per integration step.
    pub fn stages(self) -> u64 {
        match self {
            SamplerMode::OdeHeun2 => 2,
            SamplerMode::SdeEuler | SamplerMode::OdeEuler => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::SdeEuler => "sde-euler",
            SamplerMode::OdeEuler => "ode-euler",
            SamplerMode::OdeHeun2 => "ode-heun2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub steps: usize,
    /// `a` in the reverse process; `None` means 0.7 for SDE and 0 for ODE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_level: Option<f64>,
    #[serde(default)]
    pub record_trajectory: bool,
    #[serde(default = "default_clamp")]
    pub t_start_clamp: f64,
}

fn default_clamp() -> f64 {
    DEFAULT_T_START_CLAMP
}

impl SamplerConfig {
    pub fn ode(steps: usize) -> Self {
        Self {
            mode: SamplerMode::OdeHeun2,
            steps,
            noise_level: None,
            record_trajectory: false,
            t_start_clamp: DEFAULT_T_START_CLAMP,
        }
    }

    pub fn ode_euler(steps: usize) -> Self {
        Self {
            mode: SamplerMode::OdeEuler,
            ..Self::ode(steps)
        }
    }

    pub fn sde(steps: usize, noise_level: f64) -> Self {
        Self {
            mode: SamplerMode::SdeEuler,
            steps,
            noise_level: Some(noise_level),
            record_trajectory: false,
            t_start_clamp: DEFAULT_T_START_CLAMP,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn noise_level(&self) -> f64 {
        match (self.mode.is_sde(), self.noise_level) {
            (true, Some(a)) => a,
            (true, None) => DEFAULT_SDE_NOISE_LEVEL,
            (false, a) => a.unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::config("sampler.steps", "at least 2 steps required"));
        }
        let a = self.noise_level();
        if self.mode.is_sde() && !(a > 0.0 && a <= 1.0) {
            return Err(Error::config(
                "sampler.noise_level",
                format!("SDE sampling needs a in (0, 1], got {a}"),
            ));
        }
        if !self.mode.is_sde() && a != 0.0 {
            return Err(Error::config(
                "sampler.noise_level",
                format!("ODE sampling needs a = 0, got {a}"),
            ));
        }
        let d = self.t_start_clamp;
        if !(d > 0.0 && d < 1.0 / self.steps as f64) {
            return Err(Error::config(
                "sampler.t_start_clamp",
                format!(
                    "needs 0 < delta < 1/N = {}, got {d}",
                    1.0 / self.steps as f64
                ),
            ));
        }
        Ok(())
    }

    /// Integration times `t_N = 1 - delta > t_{N-1} = (N-1)/N > ... > t_0 = 0`.
    pub fn timesteps(&self) -> Vec<f64> {
        let n = self.steps;
        let mut ts: Vec<f64> = (0..n).rev().map(|i| i as f64 / n as f64).collect();
        ts.insert(0, 1.0 - self.t_start_clamp);
        ts
    }

    /// Velocity evaluations needed for one rollout.
    pub fn nfe_per_rollout(&self) -> u64 {
        self.steps as u64 * self.mode.stages()
    }
}

/// Recorded reverse path of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Strictly decreasing, ending at `0`.
    pub timesteps: Vec<f64>,
    /// `states[i]` is the state at `timesteps[i]`.
    pub states: Vec<Vec<f64>>,
    pub condition: usize,
    pub noise_level: f64,
    /// Grid resolution `N`, needed to reproduce the clamped coefficients.
    pub steps: usize,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }

    pub fn is_stochastic(&self) -> bool {
        self.noise_level > 0.0
    }
}

/// Drift of the reverse process:
/// `v + g^2 / (2t) * (x + (1 - t) v)` with `g = a sqrt(2t / (1 - t))`.
pub fn reverse_drift<V: Velocity + ?Sized>(
    field: &V,
    x: &[f64],
    t: f64,
    c: usize,
    noise_level: f64,
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!(
            "reverse drift needs t in (0, 1), got {t}"
        )));
    }
    let v = field.eval_batch(x, &[t], &[c])?;
    let g = diffusion_coefficient(t, noise_level);
    Ok(drift_from_velocity(x, &v, t, g * g))
}

pub(crate) fn drift_from_velocity(x: &[f64], v: &[f64], t: f64, g2: f64) -> Vec<f64> {
    if g2 == 0.0 {
        return v.to_vec();
    }
    let k = g2 / (2.0 * t);
    x.iter()
        .zip(v)
        .map(|(&xi, &vi)| vi + k * (xi + (1.0 - t) * vi))
        .collect()
}

/// Squared diffusion coefficient used on a step leaving `t`. The coefficient
/// is evaluated at `min(t, 1 - 1/N)` because it diverges at `t = 1`.
pub fn clamped_g2(t: f64, noise_level: f64, steps: usize) -> f64 {
    let tc = t.min(1.0 - 1.0 / steps as f64);
    let g = diffusion_coefficient(tc, noise_level);
    g * g
}

/// Gaussian transition of one Euler-Maruyama step from `t_from` to `t_to`
/// given the velocity `v` at `(x, t_from)`: returns `(mean, variance)`.
pub fn transition_mean_var(
    x: &[f64],
    v: &[f64],
    t_from: f64,
    t_to: f64,
    noise_level: f64,
    steps: usize,
) -> (Vec<f64>, f64) {
    let tc = transition_coefficients(t_from, t_to, noise_level, steps);
    let mean = x
        .iter()
        .zip(v)
        .map(|(&xi, &vi)| tc.state * xi + tc.velocity * vi)
        .collect();
    (mean, tc.variance)
}

/// The transition mean is affine in the state and the velocity:
/// `mean = state * x + velocity * v`, with isotropic `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoefficients {
    pub state: f64,
    pub velocity: f64,
    pub variance: f64,
}

pub fn transition_coefficients(
    t_from: f64,
    t_to: f64,
    noise_level: f64,
    steps: usize,
) -> TransitionCoefficients {
    let dt = t_from - t_to;
    let g2 = clamped_g2(t_from, noise_level, steps);
    let k = if g2 == 0.0 { 0.0 } else { g2 / (2.0 * t_from) };
    TransitionCoefficients {
        state: 1.0 - dt * k,
        velocity: -dt * (1.0 + k * (1.0 - t_from)),
        variance: g2 * dt,
    }
}

/// One Heun (explicit trapezoidal) step of `dx/dt = v` backwards by `dt`.
pub fn heun2_step<V: Velocity + ?Sized>(
    field: &V,
    x: &[f64],
    t: f64,
    dt: f64,
    c: usize,
) -> Result<Vec<f64>> {
    let n = x.len() / field.dim().max(1);
    let cs = vec![c; n];
    heun2_batch(field, x, &vec![t; n], &vec![t - dt; n], &cs)
}

fn heun2_batch<V: Velocity + ?Sized>(
    field: &V,
    x: &[f64],
    t_from: &[f64],
    t_to: &[f64],
    c: &[usize],
) -> Result<Vec<f64>> {
    let d = field.dim();
    let v1 = field.eval_batch(x, t_from, c)?;
    let mut pred = x.to_vec();
    for (i, p) in pred.iter_mut().enumerate() {
        *p -= (t_from[i / d] - t_to[i / d]) * v1[i];
    }
    let v2 = field.eval_batch(&pred, t_to, c)?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &xi)| xi - 0.5 * (t_from[i / d] - t_to[i / d]) * (v1[i] + v2[i]))
        .collect())
}

/// One rollout request: the condition and the key of its private RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutRequest {
    pub condition: usize,
    pub stream_key: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub terminals: Vec<Vec<f64>>,
    pub trajectories: Option<Vec<Trajectory>>,
    /// Velocity evaluations, counted per rollout and per stage.
    pub nfe: u64,
}

/// Integrates every request in lockstep. Each rollout draws its initial
/// noise and SDE increments from its own stream, so results do not depend
/// on batch composition.
pub fn sample_batch<V: Velocity + ?Sized>(
    field: &V,
    cfg: &SamplerConfig,
    requests: &[RolloutRequest],
) -> Result<SampleOutput> {
    cfg.validate()?;
    let d = field.dim();
    let n = requests.len();
    let a = cfg.noise_level();
    let ts = cfg.timesteps();
    let conds: Vec<usize> = requests.iter().map(|r| r.condition).collect();
    let mut rngs: Vec<_> = requests
        .iter()
        .map(|r| rand_chacha::ChaCha8Rng::from_key(r.stream_key))
        .collect();
    let mut x = vec![0.0; n * d];
    for (i, r) in rngs.iter_mut().enumerate() {
        rng::fill_normal(r, &mut x[i * d..(i + 1) * d]);
    }
    let mut states: Option<Vec<Vec<Vec<f64>>>> = cfg.record_trajectory.then(|| {
        (0..n)
            .map(|i| {
                let mut s = Vec::with_capacity(ts.len());
                s.push(x[i * d..(i + 1) * d].to_vec());
                s
            })
            .collect()
    });
    let mut nfe = 0u64;
    for (step, w) in ts.windows(2).enumerate() {
        let (t_from, t_to) = (w[0], w[1]);
        let dt = t_from - t_to;
        x = match cfg.mode {
            SamplerMode::OdeHeun2 => {
                nfe += 2 * n as u64;
                heun2_batch(field, &x, &vec![t_from; n], &vec![t_to; n], &conds)?
            }
            SamplerMode::OdeEuler => {
                nfe += n as u64;
                let v = field.eval_batch(&x, &vec![t_from; n], &conds)?;
                x.iter().zip(&v).map(|(xi, vi)| xi - dt * vi).collect()
            }
            SamplerMode::SdeEuler => {
                nfe += n as u64;
                let v = field.eval_batch(&x, &vec![t_from; n], &conds)?;
                let mut next = vec![0.0; n * d];
                for (i, r) in rngs.iter_mut().enumerate() {
                    let rows = i * d..(i + 1) * d;
                    let (mean, var) = transition_mean_var(
                        &x[rows.clone()],
                        &v[rows.clone()],
                        t_from,
                        t_to,
                        a,
                        cfg.steps,
                    );
                    let sd = libm::sqrt(var);
                    for (j, m) in mean.into_iter().enumerate() {
                        next[i * d + j] = m + sd * rng::normal(r);
                    }
                }
                next
            }
        };
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite state in rollout {} at step {step} (t {t_from} -> {t_to})",
                bad / d
            )));
        }
        if let Some(states) = states.as_mut() {
            for (i, s) in states.iter_mut().enumerate() {
                s.push(x[i * d..(i + 1) * d].to_vec());
            }
        }
    }
    let terminals = (0..n).map(|i| x[i * d..(i + 1) * d].to_vec()).collect();
    let trajectories = states.map(|all| {
        all.into_iter()
            .zip(&conds)
            .map(|(states, &condition)| Trajectory {
                timesteps: ts.clone(),
                states,
                condition,
                noise_level: a,
                steps: cfg.steps,
            })
            .collect()
    });
    Ok(SampleOutput {
        terminals,
        trajectories,
        nfe,
    })
}

/// Single rollout from `seed`. Always records the trajectory.
pub fn sample<V: Velocity + ?Sized>(
    field: &V,
    cfg: &SamplerConfig,
    c: usize,
    seed: u64,
) -> Result<Trajectory> {
    let cfg = cfg.recording();
    let out = sample_batch(
        field,
        &cfg,
        &[RolloutRequest {
            condition: c,
            stream_key: seed,
        }],
    )?;
    let mut trajs = out.trajectories.unwrap_or_default();
    trajs
        .pop()
        .ok_or_else(|| Error::Contract(alloc::string::String::from("sampler produced no rollout")))
}

trait FromKey {
    fn from_key(key: u64) -> Self;
}

impl FromKey for rand_chacha::ChaCha8Rng {
    fn from_key(key: u64) -> Self {
        use rand_core::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(key)
    }
}
