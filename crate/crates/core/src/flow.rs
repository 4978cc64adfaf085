//! Flow-model substrate: the `alpha = 1 - t`, `sigma = t` schedule, forward
//! noising, conditional velocities and velocity fields.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, BoundMlp, MlpParams, ParamSet, Tape, Tensor, Var};

pub fn alpha(t: f64) -> f64 {
    1.0 - t
}

pub fn sigma(t: f64) -> f64 {
    t
}

/// Reverse-process diffusion coefficient `g(t, a) = a * sqrt(2t / (1 - t))`.
/// Diverges as `t -> 1`; callers clamp.
pub fn diffusion_coefficient(t: f64, noise_level: f64) -> f64 {
    if noise_level == 0.0 {
        return 0.0;
    }
    noise_level * libm::sqrt(2.0 * t / (1.0 - t))
}

/// The schedule together with its stochasticity level and step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub noise_level: f64,
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn new(noise_level: f64, steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_level) {
            return Err(Error::config(
                "sampler.noise_level",
                format!("{noise_level} outside [0, 1]"),
            ));
        }
        if steps == 0 {
            return Err(Error::config("sampler.steps", "must be positive"));
        }
        Ok(Self { noise_level, steps })
    }

    pub fn alpha(&self, t: f64) -> f64 {
        alpha(t)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        sigma(t)
    }

    pub fn g(&self, t: f64) -> f64 {
        diffusion_coefficient(t, self.noise_level)
    }

    /// `T = {1/N, 2/N, ..., 1}`.
    pub fn grid(&self) -> Vec<f64> {
        time_grid(self.steps)
    }
}

/// `{1/N, 2/N, ..., 1}`; the last entry is exactly `1`.
pub fn time_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

/// A clean point pushed through the forward process at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

/// `x_t = (1 - t) x0 + t eps` and `v = eps - x0`.
pub fn forward_noise(x0: &[f64], t: f64, epsilon: &[f64]) -> Result<FlowSample> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!(
            "forward_noise needs t in (0, 1], got {t}"
        )));
    }
    if x0.len() != epsilon.len() {
        return Err(Error::shape(
            "forward_noise",
            format!("x0 has {} components, noise {}", x0.len(), epsilon.len()),
        ));
    }
    let x_t = x0
        .iter()
        .zip(epsilon)
        .map(|(&x, &e)| alpha(t) * x + sigma(t) * e)
        .collect();
    let v_target = x0.iter().zip(epsilon).map(|(&x, &e)| e - x).collect();
    Ok(FlowSample {
        x0: x0.to_vec(),
        epsilon: epsilon.to_vec(),
        t,
        x_t,
        v_target,
    })
}

/// Anything that maps `(x, t, c)` to a velocity in `R^d`.
///
/// Batches are row-major: `x` is `[n, d]`, `t` and `c` have `n` entries.
pub trait Velocity {
    fn dim(&self) -> usize;

    fn eval_batch(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>>;
}

fn check_batch(dim: usize, x: &[f64], t: &[f64], c: &[usize]) -> Result<()> {
    let n = t.len();
    if x.len() != n * dim || c.len() != n {
        return Err(Error::shape(
            "eval_velocity",
            format!(
                "{} state values, {n} times, {} conditions for d = {dim}",
                x.len(),
                c.len()
            ),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(String::from(
            "non-finite state passed to a velocity field",
        )));
    }
    if let Some(bad) = t.iter().find(|&&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::Domain(format!("velocity queried at t = {bad}")));
    }
    Ok(())
}

/// Diagonal Gaussian reference distribution per condition, and its exact
/// marginal velocity `E[eps - x0 | x_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianReference {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianReference {
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let Some(d) = means.first().map(Vec::len) else {
            return Err(Error::config(
                "reference.means",
                "at least one condition required",
            ));
        };
        if d == 0 {
            return Err(Error::config(
                "reference.means",
                "dimension must be positive",
            ));
        }
        if means.len() != variances.len() || means.iter().chain(&variances).any(|m| m.len() != d) {
            return Err(Error::config(
                "reference",
                "means and variances must share condition count and dimension",
            ));
        }
        if variances
            .iter()
            .flatten()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::config(
                "reference.variances",
                "variances must be positive",
            ));
        }
        Ok(Self { means, variances })
    }

    /// Standard normal `N(0, I_d)` for `conditions` conditions.
    pub fn standard(dim: usize, conditions: usize) -> Self {
        Self {
            means: vec![vec![0.0; dim]; conditions],
            variances: vec![vec![1.0; dim]; conditions],
        }
    }

    pub fn conditions(&self) -> usize {
        self.means.len()
    }

    /// Per-component `(slope, offset)` with `v = slope * x + offset`.
    pub fn coefficients(&self, t: f64, c: usize, j: usize) -> (f64, f64) {
        let (mu, s2) = (self.means[c][j], self.variances[c][j]);
        let var_t = (1.0 - t) * (1.0 - t) * s2 + t * t;
        let slope = (t - (1.0 - t) * s2) / var_t;
        (slope, -mu - slope * (1.0 - t) * mu)
    }

    pub fn log_density(&self, x: &[f64], c: usize) -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, &xj)| {
                let (mu, s2) = (self.means[c][j], self.variances[c][j]);
                -0.5 * libm::log(2.0 * core::f64::consts::PI * s2)
                    - (xj - mu) * (xj - mu) / (2.0 * s2)
            })
            .sum()
    }
}

impl Velocity for GaussianReference {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn eval_batch(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_batch(d, x, t, c)?;
        if let Some(&bad) = c.iter().find(|&&ci| ci >= self.conditions()) {
            return Err(Error::Domain(format!("condition {bad} out of range")));
        }
        let mut out = vec![0.0; x.len()];
        for (i, (&ti, &ci)) in t.iter().zip(c).enumerate() {
            for j in 0..d {
                let (slope, offset) = self.coefficients(ti, ci, j);
                out[i * d + j] = slope * x[i * d + j] + offset;
            }
        }
        Ok(out)
    }
}

/// Architecture of the learned field: an MLP residual over `[x, t, embed(c)]`
/// added to an analytic Gaussian base velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    pub dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub base: GaussianReference,
}

/// Trainable parameters `theta` of a [`FieldModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub mlp: MlpParams,
    pub embedding: Tensor,
}

impl ParamSet for FieldParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.mlp.tensors();
        v.push(&self.embedding);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.mlp.tensors_mut();
        v.push(&mut self.embedding);
        v
    }
}

impl FieldParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundField {
        BoundField {
            mlp: self.mlp.bind(tape),
            embedding: tape.param(self.embedding.clone()),
        }
    }

    /// Elementwise `(1 - alpha) * theta + alpha * old`, written into `self`.
    /// Stated as an increment so equal inputs stay bit-identical.
    pub fn ema_into(&mut self, theta: &FieldParams, alpha: f64) {
        for (old, new) in self.tensors_mut().into_iter().zip(theta.tensors()) {
            for (o, &n) in old.data_mut().iter_mut().zip(new.data()) {
                *o += (1.0 - alpha) * (n - *o);
            }
        }
    }
}

/// [`FieldParams`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundField {
    pub mlp: BoundMlp,
    pub embedding: Var,
}

impl BoundField {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.push(self.embedding);
        v
    }
}

impl FieldModel {
    pub fn conditions(&self) -> usize {
        self.base.conditions()
    }

    pub fn input_width(&self) -> usize {
        self.dim + 1 + self.embed_dim
    }

    /// Seeded parameters. With `zero_output` the residual starts at zero, so
    /// the initial field equals the analytic base exactly.
    pub fn init_params<R: RngCore>(&self, zero_output: bool, rng: &mut R) -> Result<FieldParams> {
        let mut sizes = vec![self.input_width()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.dim);
        let mlp = MlpParams::init(&sizes, self.activation, zero_output, rng)?;
        let n = self.conditions() * self.embed_dim;
        let emb = (0..n).map(|_| crate::rng::normal(rng) * 0.5).collect();
        Ok(FieldParams {
            mlp,
            embedding: Tensor::new(vec![self.conditions(), self.embed_dim], emb)?,
        })
    }

    fn features(&self, params: &FieldParams, x: &[f64], t: &[f64], c: &[usize]) -> Result<Tensor> {
        let (d, e) = (self.dim, self.embed_dim);
        let w = self.input_width();
        let mut feat = Vec::with_capacity(t.len() * w);
        for (i, (&ti, &ci)) in t.iter().zip(c).enumerate() {
            if ci >= self.conditions() {
                return Err(Error::Domain(format!("condition {ci} out of range")));
            }
            feat.extend_from_slice(&x[i * d..(i + 1) * d]);
            feat.push(ti);
            feat.extend_from_slice(&params.embedding.data()[ci * e..(ci + 1) * e]);
        }
        Ok(Tensor::raw_matrix(t.len(), w, feat))
    }

    /// Gradient-free batch evaluation under `params`.
    pub fn eval(
        &self,
        params: &FieldParams,
        x: &[f64],
        t: &[f64],
        c: &[usize],
    ) -> Result<Vec<f64>> {
        check_batch(self.dim, x, t, c)?;
        let feat = self.features(params, x, t, c)?;
        let residual = params.mlp.forward(&feat)?;
        let mut out = self.base.eval_batch(x, t, c)?;
        for (o, r) in out.iter_mut().zip(residual.data()) {
            *o += r;
        }
        Ok(out)
    }

    /// Batch evaluation recorded on `tape`; differentiable in `bound`.
    pub fn eval_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundField,
        x: &[f64],
        t: &[f64],
        c: &[usize],
    ) -> Result<Var> {
        check_batch(self.dim, x, t, c)?;
        let n = t.len();
        let xt = tape.constant(Tensor::raw_matrix(n, self.dim, x.to_vec()));
        let tt = tape.constant(Tensor::raw_matrix(n, 1, t.to_vec()));
        let emb = tape.gather_rows(bound.embedding, c)?;
        let feat = tape.concat_cols(&[xt, tt, emb])?;
        let residual = bound.mlp.forward(tape, feat)?;
        let base = tape.constant(Tensor::raw_matrix(
            n,
            self.dim,
            self.base.eval_batch(x, t, c)?,
        ));
        tape.add(base, residual)
    }

    /// Binds a parameter set to this architecture.
    pub fn with_params(&self, params: FieldParams) -> LearnedField {
        LearnedField {
            model: self.clone(),
            params,
        }
    }
}

/// Architecture plus a concrete parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedField {
    pub model: FieldModel,
    pub params: FieldParams,
}

impl Velocity for LearnedField {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn eval_batch(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.model.eval(&self.params, x, t, c)
    }
}

/// Borrowed view of a model with one of its parameter snapshots.
#[derive(Debug, Clone, Copy)]
pub struct FieldView<'a> {
    pub model: &'a FieldModel,
    pub params: &'a FieldParams,
}

impl Velocity for FieldView<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn eval_batch(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.model.eval(self.params, x, t, c)
    }
}

/// Velocity field of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VelocityField {
    AnalyticGaussian(GaussianReference),
    LearnedMlp(LearnedField),
}

impl Velocity for VelocityField {
    fn dim(&self) -> usize {
        match self {
            VelocityField::AnalyticGaussian(g) => g.dim(),
            VelocityField::LearnedMlp(f) => f.dim(),
        }
    }

    fn eval_batch(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        match self {
            VelocityField::AnalyticGaussian(g) => g.eval_batch(x, t, c),
            VelocityField::LearnedMlp(f) => f.eval_batch(x, t, c),
        }
    }
}

/// Velocity of `field` at a single point.
pub fn eval_velocity<V: Velocity + ?Sized>(
    field: &V,
    x: &[f64],
    t: f64,
    c: usize,
) -> Result<Vec<f64>> {
    field.eval_batch(x, &[t], &[c])
}

/// `v_theta(x_t, t, c) - v_target`.
pub fn fm_residual<V: Velocity + ?Sized>(
    field: &V,
    sample: &FlowSample,
    c: usize,
) -> Result<Vec<f64>> {
    let v = eval_velocity(field, &sample.x_t, sample.t, c)?;
    Ok(v.iter().zip(&sample.v_target).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn schedule_endpoints() {
        assert_eq!((alpha(0.0), sigma(0.0)), (1.0, 0.0));
        assert_eq!((alpha(1.0), sigma(1.0)), (0.0, 1.0));
        for t in time_grid(7) {
            assert_eq!(alpha(t) + sigma(t), 1.0);
            assert_eq!(diffusion_coefficient(t, 0.0), 0.0);
        }
        let g = time_grid(4);
        assert_eq!(g, vec![0.25, 0.5, 0.75, 1.0]);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn forward_noise_examples() {
        let s = forward_noise(&[1.0], 0.5, &[0.0]).unwrap();
        assert_eq!(s.x_t, vec![0.5]);
        assert_eq!(s.v_target, vec![-1.0]);
        let s = forward_noise(&[0.0], 1.0, &[0.37]).unwrap();
        assert_eq!((s.x_t[0], s.v_target[0]), (0.37, 0.37));
        let s = forward_noise(&[1.0, -1.0], 0.25, &[0.3, 0.7]).unwrap();
        assert!((s.x_t[0] - 0.825).abs() < 1e-15 && (s.x_t[1] + 0.575).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_rejects_bad_time() {
        assert!(matches!(
            forward_noise(&[1.0], 0.0, &[0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            forward_noise(&[1.0], 1.5, &[0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn analytic_standard_field_closed_form() {
        let g = GaussianReference::standard(1, 1);
        assert_eq!(eval_velocity(&g, &[3.7], 0.5, 0).unwrap(), vec![0.0]);
        let v = eval_velocity(&g, &[1.0], 0.9, 0).unwrap()[0];
        assert!((v - 0.8 / 0.82).abs() < 1e-12);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let g = GaussianReference::standard(1, 1);
        assert!(matches!(
            eval_velocity(&g, &[f64::NAN], 0.5, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn residual_examples() {
        let g = GaussianReference::standard(2, 1);
        let s = forward_noise(&[0.4, -0.2], 0.5, &[0.1, 0.3]).unwrap();
        let mut exact = s.clone();
        exact.v_target = eval_velocity(&g, &s.x_t, 0.5, 0).unwrap();
        assert_eq!(fm_residual(&g, &exact, 0).unwrap(), vec![0.0, 0.0]);
    }

    fn tiny_model() -> FieldModel {
        FieldModel {
            dim: 2,
            embed_dim: 2,
            hidden: vec![8],
            activation: Activation::Tanh,
            base: GaussianReference::standard(2, 3),
        }
    }

    #[test]
    fn zero_residual_matches_base() {
        let m = tiny_model();
        let p = m.init_params(true, &mut stream(1, "init", &[])).unwrap();
        let x = [0.3, -1.2, 2.0, 0.5];
        let t = [0.2, 0.9];
        let c = [0, 2];
        assert_eq!(
            m.eval(&p, &x, &t, &c).unwrap(),
            m.base.eval_batch(&x, &t, &c).unwrap()
        );
    }

    #[test]
    fn taped_eval_matches_plain_and_is_reproducible() {
        let m = tiny_model();
        let p = m.init_params(false, &mut stream(2, "init", &[])).unwrap();
        let x = [0.3, -1.2, 2.0, 0.5];
        let (t, c) = ([0.2, 0.9], [1, 2]);
        let plain = m.eval(&p, &x, &t, &c).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let v = m.eval_tape(&mut tape, &b, &x, &t, &c).unwrap();
        for (a, b) in tape.value(v).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        let p2 = m.init_params(false, &mut stream(2, "init", &[])).unwrap();
        assert_eq!(m.eval(&p2, &x, &t, &c).unwrap(), plain);
    }

    #[test]
    fn ema_is_convex_combination() {
        let m = tiny_model();
        let theta = m.init_params(false, &mut stream(3, "init", &[])).unwrap();
        let mut old = m.init_params(false, &mut stream(4, "init", &[])).unwrap();
        let before = old.flatten();
        old.ema_into(&theta, 0.3);
        for ((o, b), n) in old.flatten().iter().zip(&before).zip(theta.flatten()) {
            assert!((o - (0.7 * n + 0.3 * b)).abs() < 1e-15);
        }
    }
}
