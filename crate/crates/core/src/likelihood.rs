//! Log-likelihood surrogates, policy ratios and the KL regularizer.
//!
//! Every estimator is evaluated on a [`Tape`]: the trainable policy
//! contributes differentiable velocities while fixed policies (old,
//! reference, analytic) enter as constants. Running both through the same
//! arithmetic makes `ratio(theta, theta) == 1` hold bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{forward_noise, BoundField, FieldModel, Velocity};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;
use crate::sampler::{transition_coefficients, Trajectory};

pub const DEFAULT_T_MIN: f64 = 1e-3;
pub const DEFAULT_LOG_RATIO_BOUND: f64 = 20.0;
pub const DEFAULT_GRID_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formula {
    Trajectory,
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    PathKl,
    Simple,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McScheme {
    SingleTimestep,
    AllTimestep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    ExpOfSum,
    SumOfExp,
    SingleSampleSimple,
    SingleSampleAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub formula: Formula,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default = "default_scheme")]
    pub mc_scheme: McScheme,
    #[serde(default = "default_ratio_mode")]
    pub ratio_mode: RatioMode,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    /// Timestep grid resolution; `None` follows the sampler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default = "default_bound")]
    pub log_ratio_bound: f64,
    /// Monte-Carlo draws per sample for the KL regularizer.
    #[serde(default = "default_kl_mc")]
    pub kl_mc: usize,
}

fn default_weighting() -> Weighting {
    Weighting::Adaptive
}
fn default_scheme() -> McScheme {
    McScheme::SingleTimestep
}
fn default_ratio_mode() -> RatioMode {
    RatioMode::ExpOfSum
}
fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}
fn default_bound() -> f64 {
    DEFAULT_LOG_RATIO_BOUND
}
fn default_kl_mc() -> usize {
    1
}

impl Formula {
    pub fn name(self) -> &'static str {
        match self {
            Formula::Trajectory => "trajectory",
            Formula::Elbo => "elbo",
        }
    }
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::PathKl => "path-kl",
            Weighting::Simple => "simple",
            Weighting::Adaptive => "adaptive",
        }
    }
}

impl McScheme {
    pub fn name(self) -> &'static str {
        match self {
            McScheme::SingleTimestep => "single-timestep",
            McScheme::AllTimestep => "all-timestep",
        }
    }
}

impl RatioMode {
    pub fn name(self) -> &'static str {
        match self {
            RatioMode::ExpOfSum => "exp-of-sum",
            RatioMode::SumOfExp => "sum-of-exp",
            RatioMode::SingleSampleSimple => "single-sample-simple",
            RatioMode::SingleSampleAdaptive => "single-sample-adaptive",
        }
    }
}

impl EstimatorConfig {
    pub fn elbo(weighting: Weighting, mc_scheme: McScheme) -> Self {
        Self {
            formula: Formula::Elbo,
            weighting,
            mc_scheme,
            ratio_mode: RatioMode::ExpOfSum,
            t_min: DEFAULT_T_MIN,
            steps: None,
            log_ratio_bound: DEFAULT_LOG_RATIO_BOUND,
            kl_mc: 1,
        }
    }

    pub fn trajectory(ratio_mode: RatioMode) -> Self {
        Self {
            formula: Formula::Trajectory,
            ratio_mode,
            ..Self::elbo(Weighting::Simple, McScheme::SingleTimestep)
        }
    }

    pub fn single_sample(adaptive: bool) -> Self {
        let (weighting, ratio_mode) = if adaptive {
            (Weighting::Adaptive, RatioMode::SingleSampleAdaptive)
        } else {
            (Weighting::Simple, RatioMode::SingleSampleSimple)
        };
        Self {
            ratio_mode,
            ..Self::elbo(weighting, McScheme::SingleTimestep)
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self
    }

    pub fn grid_steps(&self) -> usize {
        self.steps.unwrap_or(DEFAULT_GRID_STEPS)
    }

    /// Weighting actually applied; single-sample ratio modes pin it.
    pub fn effective_weighting(&self) -> Weighting {
        match self.ratio_mode {
            RatioMode::SingleSampleSimple => Weighting::Simple,
            RatioMode::SingleSampleAdaptive => Weighting::Adaptive,
            _ => self.weighting,
        }
    }

    pub fn effective_scheme(&self) -> McScheme {
        match self.ratio_mode {
            RatioMode::SingleSampleSimple | RatioMode::SingleSampleAdaptive => {
                McScheme::SingleTimestep
            }
            _ => self.mc_scheme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config("estimator.t_min", "must lie in (0, 1)"));
        }
        if let Some(n) = self.steps {
            if n < 1 {
                return Err(Error::config("estimator.steps", "must be positive"));
            }
        }
        if !(self.log_ratio_bound > 0.0) {
            return Err(Error::config(
                "estimator.log_ratio_bound",
                "must be positive",
            ));
        }
        if self.kl_mc < 1 {
            return Err(Error::config(
                "estimator.kl_mc",
                "at least one draw required",
            ));
        }
        match (self.formula, self.ratio_mode) {
            (Formula::Elbo, RatioMode::SumOfExp) => Err(Error::config(
                "estimator.ratio_mode",
                "sum-of-exp needs per-step terms and is only defined for the trajectory formula",
            )),
            (
                Formula::Trajectory,
                RatioMode::SingleSampleSimple | RatioMode::SingleSampleAdaptive,
            ) => Err(Error::config(
                "estimator.ratio_mode",
                "single-sample ratios are ELBO estimates; use formula = elbo",
            )),
            _ => Ok(()),
        }
    }

    /// ELBO timesteps: the grid `{1/N, ..., 1}` restricted to `t >= t_min`.
    pub fn elbo_grid(&self) -> Vec<f64> {
        let n = self.grid_steps();
        (1..=n)
            .map(|k| k as f64 / n as f64)
            .filter(|&t| t >= self.t_min)
            .collect()
    }
}

/// Weight applied to the squared residual norm at time `t`.
///
/// The adaptive weight `t d / ||r||_1` is treated as a constant by callers
/// that differentiate, so its gradient is `2 w r`.
pub fn residual_weight(weighting: Weighting, t: f64, residual: &[f64]) -> f64 {
    match weighting {
        Weighting::PathKl => (1.0 - t) / t,
        Weighting::Simple => 1.0,
        Weighting::Adaptive => {
            let l1: f64 = residual.iter().map(|r| r.abs()).sum();
            if l1 == 0.0 {
                0.0
            } else {
                t * residual.len() as f64 / l1
            }
        }
    }
}

/// Weighted flow-matching loss at one `(t, epsilon)` draw.
pub fn elbo_term<V: Velocity + ?Sized>(
    field: &V,
    x0: &[f64],
    t: f64,
    epsilon: &[f64],
    c: usize,
    weighting: Weighting,
    t_min: f64,
) -> Result<f64> {
    if !(t >= t_min && t <= 1.0) {
        return Err(Error::Domain(format!(
            "ELBO term at t = {t} outside [{t_min}, 1]"
        )));
    }
    let s = forward_noise(x0, t, epsilon)?;
    let v = field.eval_batch(&s.x_t, &[t], &[c])?;
    let r: Vec<f64> = v.iter().zip(&s.v_target).map(|(a, b)| a - b).collect();
    let sq: f64 = r.iter().map(|x| x * x).sum();
    Ok(residual_weight(weighting, t, &r) * sq)
}

/// One forward-noising draw shared by every policy evaluated on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboDraw {
    pub t: f64,
    pub epsilon: Vec<f64>,
    pub x_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

impl ElboDraw {
    pub fn new(x0: &[f64], t: f64, epsilon: Vec<f64>) -> Result<Self> {
        let s = forward_noise(x0, t, &epsilon)?;
        Ok(Self {
            t,
            epsilon,
            x_t: s.x_t,
            v_target: s.v_target,
        })
    }
}

/// Everything one sample's likelihood evaluation touched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleWorkspace {
    pub condition: usize,
    pub x0: Vec<f64>,
    pub draws: Vec<ElboDraw>,
    pub kl_draws: Vec<ElboDraw>,
    /// Velocities under the new and old policy at the estimator's query
    /// points, row-major.
    pub new_velocity: Vec<f64>,
    pub old_velocity: Vec<f64>,
    /// Per-draw weighted ELBO losses or per-step transition log-densities.
    pub new_terms: Vec<f64>,
    pub old_terms: Vec<f64>,
    pub loglik_new: f64,
    pub loglik_old: f64,
    pub log_ratio: f64,
    pub clipped: bool,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodWorkspace {
    pub samples: Vec<SampleWorkspace>,
}

/// A policy evaluated during estimation.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// Enters the tape as constants.
    Fixed(&'a dyn Velocity),
    /// Differentiable in the bound parameters.
    Taped {
        model: &'a FieldModel,
        bound: &'a BoundField,
    },
}

impl Policy<'_> {
    fn dim(&self) -> usize {
        match self {
            Policy::Fixed(f) => f.dim(),
            Policy::Taped { model, .. } => model.dim,
        }
    }

    fn velocity(&self, tape: &mut Tape, x: &[f64], t: &[f64], c: &[usize]) -> Result<Var> {
        match self {
            Policy::Fixed(f) => {
                let v = f.eval_batch(x, t, c)?;
                Ok(tape.constant(Tensor::raw_matrix(t.len(), f.dim(), v)))
            }
            Policy::Taped { model, bound } => model.eval_tape(tape, bound, x, t, c),
        }
    }
}

/// What a likelihood is computed from.
#[derive(Debug, Clone, Copy)]
pub enum LikelihoodInput<'a> {
    Terminal { x0: &'a [f64], condition: usize },
    Path(&'a Trajectory),
}

impl LikelihoodInput<'_> {
    pub fn condition(&self) -> usize {
        match self {
            LikelihoodInput::Terminal { condition, .. } => *condition,
            LikelihoodInput::Path(t) => t.condition,
        }
    }

    pub fn x0(&self) -> &[f64] {
        match self {
            LikelihoodInput::Terminal { x0, .. } => x0,
            LikelihoodInput::Path(t) => t.terminal(),
        }
    }
}

/// Stacked query rows shared across policies.
#[derive(Debug, Clone)]
struct Rows {
    x: Vec<f64>,
    t: Vec<f64>,
    c: Vec<usize>,
    lens: Vec<usize>,
}

impl Rows {
    fn new() -> Self {
        Self {
            x: Vec::new(),
            t: Vec::new(),
            c: Vec::new(),
            lens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct ElboRows {
    rows: Rows,
    v_target: Vec<f64>,
}

fn draw_grid<R: RngCore>(
    x0: &[f64],
    grid: &[f64],
    scheme: McScheme,
    rng: &mut R,
) -> Result<Vec<ElboDraw>> {
    let d = x0.len();
    let times: Vec<f64> = match scheme {
        McScheme::SingleTimestep => vec![grid[rng::index(rng, grid.len())]],
        McScheme::AllTimestep => grid.to_vec(),
    };
    times
        .into_iter()
        .map(|t| {
            let mut eps = vec![0.0; d];
            rng::fill_normal(rng, &mut eps);
            ElboDraw::new(x0, t, eps)
        })
        .collect()
}

fn elbo_rows(samples: &[(usize, &[ElboDraw])]) -> ElboRows {
    let mut rows = Rows::new();
    let mut v_target = Vec::new();
    for &(c, draws) in samples {
        rows.lens.push(draws.len());
        for dr in draws {
            rows.x.extend_from_slice(&dr.x_t);
            rows.t.push(dr.t);
            rows.c.push(c);
            v_target.extend_from_slice(&dr.v_target);
        }
    }
    ElboRows { rows, v_target }
}

/// Per-row weighted losses and per-sample mean log-likelihood `-mean(loss)`.
fn elbo_terms(
    tape: &mut Tape,
    policy: Policy<'_>,
    er: &ElboRows,
    weighting: Weighting,
) -> Result<(Var, Var, Var)> {
    let d = policy.dim();
    let r_rows = er.rows.t.len();
    let v = policy.velocity(tape, &er.rows.x, &er.rows.t, &er.rows.c)?;
    let target = tape.constant(Tensor::raw_matrix(r_rows, d, er.v_target.clone()));
    let resid = tape.sub(v, target)?;
    let weights: Vec<f64> = {
        let rv = tape.value(resid).data();
        (0..r_rows)
            .map(|i| residual_weight(weighting, er.rows.t[i], &rv[i * d..(i + 1) * d]))
            .collect()
    };
    let sq = tape.square(resid);
    let sq = tape.sum_rows(sq)?;
    let w = tape.stop_gradient(Tensor::vector(weights));
    let terms = tape.mul(sq, w)?;
    let sums = tape.segment_sum(terms, &er.rows.lens)?;
    let inv = tape.constant(Tensor::vector(
        er.rows.lens.iter().map(|&l| -1.0 / l as f64).collect(),
    ));
    let ll = tape.mul(sums, inv)?;
    Ok((v, terms, ll))
}

#[derive(Debug, Clone)]
struct PathRows {
    rows: Rows,
    /// Constant part of `x_next - mean`, row-major.
    offset: Vec<f64>,
    /// Per-row velocity coefficient of the transition mean.
    vel_coef: Vec<f64>,
    variance: Vec<f64>,
}

fn check_path(traj: &Trajectory, d: usize) -> Result<()> {
    if !traj.is_stochastic() {
        return Err(Error::Estimator(String::from(
            "trajectory formula needs an SDE path: with a = 0 the Gaussian transition is degenerate",
        )));
    }
    let k = traj.timesteps.len();
    if k < 2 || traj.states.len() != k {
        return Err(Error::Estimator(format!(
            "trajectory has {k} timesteps and {} states",
            traj.states.len()
        )));
    }
    if !traj.timesteps.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::Estimator(String::from(
            "trajectory timesteps must strictly decrease",
        )));
    }
    if traj
        .states
        .iter()
        .any(|s| s.len() != d || s.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Estimator(String::from(
            "trajectory states must be finite and of dimension d",
        )));
    }
    Ok(())
}

fn path_rows(trajs: &[&Trajectory], d: usize) -> Result<PathRows> {
    let mut pr = PathRows {
        rows: Rows::new(),
        offset: Vec::new(),
        vel_coef: Vec::new(),
        variance: Vec::new(),
    };
    for traj in trajs {
        check_path(traj, d)?;
        pr.rows.lens.push(traj.timesteps.len() - 1);
        for i in 0..traj.timesteps.len() - 1 {
            let (t_from, t_to) = (traj.timesteps[i], traj.timesteps[i + 1]);
            let tc = transition_coefficients(t_from, t_to, traj.noise_level, traj.steps);
            let (x, y) = (&traj.states[i], &traj.states[i + 1]);
            pr.rows.x.extend_from_slice(x);
            pr.rows.t.push(t_from);
            pr.rows.c.push(traj.condition);
            pr.offset
                .extend(x.iter().zip(y).map(|(xi, yi)| yi - tc.state * xi));
            pr.vel_coef.push(tc.velocity);
            pr.variance.push(tc.variance);
        }
    }
    Ok(pr)
}

/// Per-step transition log-densities and their per-path sums.
fn path_terms(tape: &mut Tape, policy: Policy<'_>, pr: &PathRows) -> Result<(Var, Var, Var)> {
    let d = policy.dim();
    let n = pr.rows.t.len();
    let v = policy.velocity(tape, &pr.rows.x, &pr.rows.t, &pr.rows.c)?;
    let coef: Vec<f64> = (0..n * d).map(|i| pr.vel_coef[i / d]).collect();
    let coef = tape.constant(Tensor::raw_matrix(n, d, coef));
    let offset = tape.constant(Tensor::raw_matrix(n, d, pr.offset.clone()));
    let scaled = tape.mul(v, coef)?;
    let e = tape.sub(offset, scaled)?;
    let sq = tape.square(e);
    let sq = tape.sum_rows(sq)?;
    let prec = tape.constant(Tensor::vector(
        pr.variance.iter().map(|&s| -0.5 / s).collect(),
    ));
    let quad = tape.mul(sq, prec)?;
    let norm = tape.constant(Tensor::vector(
        pr.variance
            .iter()
            .map(|&s| -0.5 * d as f64 * libm::log(2.0 * core::f64::consts::PI * s))
            .collect(),
    ));
    let terms = tape.add(quad, norm)?;
    let ll = tape.segment_sum(terms, &pr.rows.lens)?;
    Ok((v, terms, ll))
}

/// Differentiable per-sample quantities for a rollout group.
#[derive(Debug, Clone)]
pub struct GroupTerms {
    /// Guarded `log rho`, shape `[n]`.
    pub log_ratio: Var,
    pub ratio: Var,
    pub loglik_new: Var,
    /// Per-sample KL estimate, present when a reference was supplied.
    pub kl: Option<Var>,
    /// Samples whose log-ratio hit the overflow guard.
    pub clipped: usize,
    pub workspace: LikelihoodWorkspace,
}

#[derive(Debug, Clone)]
enum QueryRows {
    Elbo(ElboRows),
    Path(PathRows),
}

impl QueryRows {
    fn lens(&self) -> &[usize] {
        match self {
            QueryRows::Elbo(e) => &e.rows.lens,
            QueryRows::Path(p) => &p.rows.lens,
        }
    }
}

#[derive(Debug, Clone)]
struct KlRows {
    rows: ElboRows,
    reference_velocity: Vec<f64>,
}

/// Draws and every old-policy and reference quantity for a set of inputs,
/// fixed once so repeated gradient steps see identical `(t, epsilon)`.
#[derive(Debug, Clone)]
pub struct PreparedTerms {
    cfg: EstimatorConfig,
    dim: usize,
    rows: QueryRows,
    old_terms: Vec<f64>,
    old_loglik: Vec<f64>,
    kl: Option<KlRows>,
    workspace: LikelihoodWorkspace,
}

impl PreparedTerms {
    pub fn len(&self) -> usize {
        self.old_loglik.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_loglik.is_empty()
    }

    pub fn workspace(&self) -> &LikelihoodWorkspace {
        &self.workspace
    }

    pub fn old_loglik(&self) -> &[f64] {
        &self.old_loglik
    }
}

/// Draws estimator randomness for `inputs` and evaluates the old policy and
/// the reference on it. `rngs[i]` supplies the draws of sample `i`.
pub fn prepare_terms<R: RngCore>(
    old: &dyn Velocity,
    reference: Option<&dyn Velocity>,
    inputs: &[LikelihoodInput<'_>],
    cfg: &EstimatorConfig,
    rngs: &mut [R],
) -> Result<PreparedTerms> {
    cfg.validate()?;
    if rngs.len() != inputs.len() {
        return Err(Error::shape(
            "prepare_terms",
            format!("{} inputs with {} rng streams", inputs.len(), rngs.len()),
        ));
    }
    let d = old.dim();
    if reference.is_some_and(|r| r.dim() != d) {
        return Err(Error::shape(
            "prepare_terms",
            "policies disagree on dimension",
        ));
    }
    let grid = cfg.elbo_grid();
    if grid.is_empty() {
        return Err(Error::config(
            "estimator.t_min",
            "no grid timestep lies above t_min",
        ));
    }
    let mut ws: Vec<SampleWorkspace> = inputs
        .iter()
        .map(|inp| SampleWorkspace {
            condition: inp.condition(),
            x0: inp.x0().to_vec(),
            ..SampleWorkspace::default()
        })
        .collect();
    let mut scratch = Tape::new();
    let rows = match cfg.formula {
        Formula::Elbo => {
            for (w, r) in ws.iter_mut().zip(rngs.iter_mut()) {
                w.draws = draw_grid(&w.x0, &grid, cfg.effective_scheme(), r)?;
            }
            QueryRows::Elbo(elbo_rows(
                &ws.iter()
                    .map(|w| (w.condition, w.draws.as_slice()))
                    .collect::<Vec<_>>(),
            ))
        }
        Formula::Trajectory => {
            let trajs = inputs
                .iter()
                .map(|inp| match inp {
                    LikelihoodInput::Path(t) => Ok(*t),
                    LikelihoodInput::Terminal { .. } => Err(Error::Estimator(String::from(
                        "trajectory formula needs recorded SDE trajectories",
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            QueryRows::Path(path_rows(&trajs, d)?)
        }
    };
    let (ov, ot, ol) = policy_terms(&mut scratch, Policy::Fixed(old), &rows, cfg)?;
    let (old_velocity, old_terms, old_loglik) = (
        scratch.value(ov).data().to_vec(),
        scratch.value(ot).data().to_vec(),
        scratch.value(ol).data().to_vec(),
    );
    let mut row = 0;
    for (w, &len) in ws.iter_mut().zip(rows.lens()) {
        w.old_velocity = old_velocity[row * d..(row + len) * d].to_vec();
        w.old_terms = old_terms[row..row + len].to_vec();
        row += len;
    }
    for (w, &l) in ws.iter_mut().zip(&old_loglik) {
        w.loglik_old = l;
    }
    let kl = match reference {
        Some(reference) => {
            let draws = kl_draws(&ws, &grid, cfg, rngs)?;
            for (w, k) in ws.iter_mut().zip(draws) {
                w.kl_draws = k;
            }
            let er = elbo_rows(
                &ws.iter()
                    .map(|w| (w.condition, w.kl_draws.as_slice()))
                    .collect::<Vec<_>>(),
            );
            let reference_velocity = reference.eval_batch(&er.rows.x, &er.rows.t, &er.rows.c)?;
            Some(KlRows {
                rows: er,
                reference_velocity,
            })
        }
        None => None,
    };
    Ok(PreparedTerms {
        cfg: *cfg,
        dim: d,
        rows,
        old_terms,
        old_loglik,
        kl,
        workspace: LikelihoodWorkspace { samples: ws },
    })
}

fn policy_terms(
    tape: &mut Tape,
    policy: Policy<'_>,
    rows: &QueryRows,
    cfg: &EstimatorConfig,
) -> Result<(Var, Var, Var)> {
    match rows {
        QueryRows::Elbo(er) => elbo_terms(tape, policy, er, cfg.effective_weighting()),
        QueryRows::Path(pr) => path_terms(tape, policy, pr),
    }
}

/// Records the new policy's terms against a [`PreparedTerms`] on `tape`.
pub fn evaluate_terms(
    tape: &mut Tape,
    new: Policy<'_>,
    prepared: &PreparedTerms,
) -> Result<GroupTerms> {
    let d = prepared.dim;
    if new.dim() != d {
        return Err(Error::shape(
            "evaluate_terms",
            "policies disagree on dimension",
        ));
    }
    let cfg = &prepared.cfg;
    let bound = cfg.log_ratio_bound;
    let (nv, nt, nl) = policy_terms(tape, new, &prepared.rows, cfg)?;
    let ol = tape.constant(Tensor::vector(prepared.old_loglik.clone()));
    let raw = tape.sub(nl, ol)?;
    let (log_ratio, ratio, clipped) = if cfg.ratio_mode == RatioMode::SumOfExp {
        let ot = tape.constant(Tensor::vector(prepared.old_terms.clone()));
        let (ratio, log_ratio, clipped) =
            sum_of_exp_ratio(tape, nt, ot, prepared.rows.lens(), bound)?;
        (log_ratio, ratio, clipped)
    } else {
        let clipped = tape
            .value(raw)
            .data()
            .iter()
            .filter(|x| x.abs() > bound)
            .count();
        let lr = if clipped == 0 {
            raw
        } else {
            tape.clamp(raw, -bound, bound)
        };
        (lr, tape.exp(lr), clipped)
    };
    let kl = match &prepared.kl {
        Some(k) => Some(kl_terms(tape, new, k)?),
        None => None,
    };

    let mut workspace = prepared.workspace.clone();
    let (vals_v, vals_t) = (tape.value(nv).data(), tape.value(nt).data());
    let mut row = 0;
    for (i, (w, &len)) in workspace
        .samples
        .iter_mut()
        .zip(prepared.rows.lens())
        .enumerate()
    {
        w.new_velocity = vals_v[row * d..(row + len) * d].to_vec();
        w.new_terms = vals_t[row..row + len].to_vec();
        w.loglik_new = tape.value(nl).data()[i];
        w.log_ratio = tape.value(log_ratio).data()[i];
        w.clipped = tape.value(raw).data()[i].abs() > bound;
        w.kl = kl.map(|k| tape.value(k).data()[i]);
        row += len;
    }
    Ok(GroupTerms {
        log_ratio,
        ratio,
        loglik_new: nl,
        kl,
        clipped,
        workspace,
    })
}

/// [`prepare_terms`] followed by [`evaluate_terms`].
pub fn group_terms<R: RngCore>(
    tape: &mut Tape,
    new: Policy<'_>,
    old: &dyn Velocity,
    reference: Option<&dyn Velocity>,
    inputs: &[LikelihoodInput<'_>],
    cfg: &EstimatorConfig,
    rngs: &mut [R],
) -> Result<GroupTerms> {
    let prepared = prepare_terms(old, reference, inputs, cfg, rngs)?;
    evaluate_terms(tape, new, &prepared)
}

/// `rho = mean_i exp(clamp(lr_i))`; returns `(rho, ln rho, clipped samples)`.
fn sum_of_exp_ratio(
    tape: &mut Tape,
    new_terms: Var,
    old_terms: Var,
    lens: &[usize],
    bound: f64,
) -> Result<(Var, Var, usize)> {
    let step_lr = tape.sub(new_terms, old_terms)?;
    let vals = tape.value(step_lr).data().to_vec();
    let mut clipped = 0;
    let mut start = 0;
    for &l in lens {
        if vals[start..start + l].iter().any(|x| x.abs() > bound) {
            clipped += 1;
        }
        start += l;
    }
    let guarded = if clipped == 0 {
        step_lr
    } else {
        tape.clamp(step_lr, -bound, bound)
    };
    let per_step = tape.exp(guarded);
    let sums = tape.segment_sum(per_step, lens)?;
    let inv = tape.constant(Tensor::vector(
        lens.iter().map(|&l| 1.0 / l as f64).collect(),
    ));
    let ratio = tape.mul(sums, inv)?;
    let log_ratio = tape.ln(ratio)?;
    Ok((ratio, log_ratio, clipped))
}

fn kl_draws<R: RngCore>(
    ws: &[SampleWorkspace],
    grid: &[f64],
    cfg: &EstimatorConfig,
    rngs: &mut [R],
) -> Result<Vec<Vec<ElboDraw>>> {
    let reuse = cfg.formula == Formula::Elbo && cfg.effective_scheme() == McScheme::SingleTimestep;
    ws.iter()
        .zip(rngs.iter_mut())
        .map(|(w, r)| {
            let mut draws = Vec::with_capacity(cfg.kl_mc);
            if reuse {
                draws.push(w.draws[0].clone());
            }
            while draws.len() < cfg.kl_mc {
                draws.extend(draw_grid(&w.x0, grid, McScheme::SingleTimestep, r)?);
            }
            Ok(draws)
        })
        .collect()
}

/// Per-sample `mean ||v_new - v_ref||^2` over the KL draws.
fn kl_terms(tape: &mut Tape, new: Policy<'_>, k: &KlRows) -> Result<Var> {
    let er = &k.rows;
    let n = er.rows.t.len();
    let v = new.velocity(tape, &er.rows.x, &er.rows.t, &er.rows.c)?;
    let vr = tape.constant(Tensor::raw_matrix(
        n,
        new.dim(),
        k.reference_velocity.clone(),
    ));
    let diff = tape.sub(v, vr)?;
    let sq = tape.square(diff);
    let sq = tape.sum_rows(sq)?;
    let sums = tape.segment_sum(sq, &er.rows.lens)?;
    let inv = tape.constant(Tensor::vector(
        er.rows.lens.iter().map(|&l| 1.0 / l as f64).collect(),
    ));
    tape.mul(sums, inv)
}

/// ELBO log-likelihood of `x0` up to a constant, with its draws.
pub fn log_likelihood_elbo_with_workspace<V: Velocity + ?Sized, R: RngCore>(
    field: &V,
    x0: &[f64],
    c: usize,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<(f64, SampleWorkspace)> {
    if cfg.formula != Formula::Elbo {
        return Err(Error::Estimator(String::from(
            "ELBO estimate requested with formula = trajectory",
        )));
    }
    cfg.validate()?;
    let grid = cfg.elbo_grid();
    if grid.is_empty() {
        return Err(Error::config(
            "estimator.t_min",
            "no grid timestep lies above t_min",
        ));
    }
    let draws = draw_grid(x0, &grid, cfg.effective_scheme(), rng)?;
    let er = elbo_rows(&[(c, draws.as_slice())]);
    let mut tape = Tape::new();
    let policy = Policy::Fixed(&DynVelocity(field));
    let (v, terms, ll) = elbo_terms(&mut tape, policy, &er, cfg.effective_weighting())?;
    let value = tape.value(ll).data()[0];
    let ws = SampleWorkspace {
        condition: c,
        x0: x0.to_vec(),
        draws,
        new_velocity: tape.value(v).data().to_vec(),
        new_terms: tape.value(terms).data().to_vec(),
        loglik_new: value,
        ..SampleWorkspace::default()
    };
    Ok((value, ws))
}

pub fn log_likelihood_elbo<V: Velocity + ?Sized, R: RngCore>(
    field: &V,
    x0: &[f64],
    c: usize,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<f64> {
    log_likelihood_elbo_with_workspace(field, x0, c, cfg, rng).map(|(v, _)| v)
}

/// Per-transition Gaussian log-densities along an SDE path.
pub fn transition_log_terms<V: Velocity + ?Sized>(
    field: &V,
    traj: &Trajectory,
) -> Result<Vec<f64>> {
    let pr = path_rows(&[traj], field.dim())?;
    let mut tape = Tape::new();
    let (_, terms, _) = path_terms(&mut tape, Policy::Fixed(&DynVelocity(field)), &pr)?;
    Ok(tape.value(terms).data().to_vec())
}

/// Trajectory log-likelihood up to a constant: the sum of transition terms.
pub fn log_likelihood_trajectory<V: Velocity + ?Sized>(
    field: &V,
    traj: &Trajectory,
) -> Result<f64> {
    Ok(transition_log_terms(field, traj)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioValue {
    pub ratio: f64,
    pub log_ratio: f64,
    pub clipped: bool,
}

/// Gradient-free policy ratio for a single input.
pub fn policy_ratio<R: RngCore>(
    new: &dyn Velocity,
    old: &dyn Velocity,
    input: LikelihoodInput<'_>,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<RatioValue> {
    let mut tape = Tape::new();
    let g = group_terms(
        &mut tape,
        Policy::Fixed(new),
        old,
        None,
        &[input],
        cfg,
        core::slice::from_mut(rng),
    )?;
    Ok(RatioValue {
        ratio: tape.value(g.ratio).data()[0],
        log_ratio: tape.value(g.log_ratio).data()[0],
        clipped: g.clipped > 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// Batch mean of the per-sample estimates.
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub mc_count: usize,
}

/// `mean ||v_new - v_ref||^2` over forward-noised draws of each `x0`, with
/// `t` uniform on the grid `{1/N, ..., 1}` above `t_min`.
pub fn estimate_kl<R: RngCore>(
    new: &dyn Velocity,
    reference: &dyn Velocity,
    x0s: &[Vec<f64>],
    c: usize,
    rng: &mut R,
    mc_count: usize,
    cfg: &EstimatorConfig,
) -> Result<KlEstimate> {
    if mc_count < 1 {
        return Err(Error::config(
            "estimator.kl_mc",
            "at least one draw required",
        ));
    }
    let grid = cfg.elbo_grid();
    let mut ws = Vec::with_capacity(x0s.len());
    for x0 in x0s {
        let mut kl_draws = Vec::with_capacity(mc_count);
        for _ in 0..mc_count {
            kl_draws.extend(draw_grid(x0, &grid, McScheme::SingleTimestep, rng)?);
        }
        ws.push(SampleWorkspace {
            condition: c,
            x0: x0.clone(),
            kl_draws,
            ..SampleWorkspace::default()
        });
    }
    let er = elbo_rows(
        &ws.iter()
            .map(|w| (w.condition, w.kl_draws.as_slice()))
            .collect::<Vec<_>>(),
    );
    let reference_velocity = reference.eval_batch(&er.rows.x, &er.rows.t, &er.rows.c)?;
    let rows = KlRows {
        rows: er,
        reference_velocity,
    };
    let mut tape = Tape::new();
    let kl = kl_terms(&mut tape, Policy::Fixed(new), &rows)?;
    let per_sample = tape.value(kl).data().to_vec();
    let value = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    Ok(KlEstimate {
        value,
        per_sample,
        mc_count,
    })
}

/// Adapts `?Sized` generic fields to `&dyn Velocity`.
struct DynVelocity<'a, V: ?Sized>(&'a V);

impl<V: Velocity + ?Sized> Velocity for DynVelocity<'_, V> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval_batch(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.0.eval_batch(x, t, c)
    }
}
