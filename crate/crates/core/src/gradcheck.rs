//! Finite-difference verification of every backward rule, a composite MLP,
//! and every objective/estimator combination on a tiny field.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FieldModel, FieldParams, FieldView, GaussianReference};
use crate::likelihood::{
    evaluate_terms, prepare_terms, EstimatorConfig, Formula, LikelihoodInput, McScheme, Policy,
    RatioMode, Weighting,
};
use crate::numerics::{Activation, BackwardFault, MlpParams, OpKind, ParamSet, Tape, Tensor, Var};
use crate::objectives::{objective_loss, LossInputs, ObjectiveConfig, ObjectiveKind};
use crate::rng::{self, stream};
use crate::sampler::{sample, SamplerConfig, Trajectory};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-7;
/// Tolerance of the library test suite.
pub const STRICT_TOLERANCE: f64 = 1e-4;
/// Tolerance of the command-line gradient check.
pub const REPORT_TOLERANCE: f64 = 1e-3;
/// Largest residual-network parameter count the suite accepts.
pub const MAX_PARAMETERS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute disagreement always accepted.
    pub abs_floor: f64,
    /// Corrupted backward rule, for negative controls.
    pub fault: Option<BackwardFault>,
}

impl GradCheckOptions {
    pub fn with_tolerance(rel_tol: f64) -> Self {
        Self {
            step: DEFAULT_STEP,
            rel_tol,
            abs_floor: DEFAULT_ABS_FLOOR,
            fault: None,
        }
    }
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Operations recorded by the checked computation.
    pub ops: Vec<String>,
    /// Max relative error per parameter tensor. Entries whose absolute
    /// disagreement is within the floor pass regardless.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckOutcome>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Operations whose isolated checks failed.
    pub fn offending_ops(&self) -> Vec<&str> {
        self.failures()
            .filter_map(|c| c.name.strip_prefix("op:"))
            .collect()
    }
}

/// Plain list of tensors as a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorList(pub Vec<Tensor>);

impl ParamSet for TensorList {
    fn tensors(&self) -> Vec<&Tensor> {
        self.0.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.iter_mut().collect()
    }
}

fn weights_like(shape: &[usize], seed: u64) -> Result<Tensor> {
    let n = shape.iter().product();
    let mut r = stream(seed, "gradcheck-seed", &[n as u64]);
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng::normal(&mut r)).collect(),
    )
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares reverse-mode gradients of `<W, f(params)>` with central
/// differences, where `W` is a fixed random weighting of the output.
///
/// `f` builds the computation from `params` and returns the output together
/// with the leaves it bound, in [`ParamSet::tensors`] order. Stop-gradient
/// constants are held at their unperturbed values during differencing.
pub fn check_gradient<P, F>(
    name: &str,
    params: &P,
    f: F,
    opts: &GradCheckOptions,
) -> Result<CheckOutcome>
where
    P: ParamSet + Clone,
    F: Fn(&mut Tape, &P) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = match opts.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let (out, vars) = f(&mut tape, params)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if vars.len() != sizes.len() {
        return Err(Error::Contract(format!(
            "{name}: bound {} leaves for {} parameter tensors",
            vars.len(),
            sizes.len()
        )));
    }
    let seed = weights_like(tape.value(out).shape(), 0x5EED)?;
    let grads = tape.backward_seeded(out, seed.clone())?;
    let frozen = tape.stopped().to_vec();
    let ops = tape
        .op_kinds()
        .into_iter()
        .map(|k| String::from(k.name()))
        .collect();

    let eval = |flat: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.load_flat(flat)?;
        let mut t = Tape::replaying(frozen.clone());
        let (o, _) = f(&mut t, &p)?;
        Ok(dot(t.value(o), &seed))
    };
    let base = params.flatten();
    let mut per_param = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    let mut passed = true;
    for (var, &n) in vars.iter().zip(&sizes) {
        let analytic = grads.get(*var);
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let mut x = base.clone();
            x[offset + j] += opts.step;
            let up = eval(&x)?;
            x[offset + j] = base[offset + j] - opts.step;
            let down = eval(&x)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let diff = (a - numeric).abs();
            if diff.is_nan() {
                passed = false;
                worst = f64::NAN;
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if diff > opts.abs_floor && rel > opts.rel_tol {
                passed = false;
            }
            worst = worst.max(rel);
        }
        per_param.push(worst);
        offset += n;
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(CheckOutcome {
        name: String::from(name),
        ops,
        per_param,
        max_rel_error,
        passed,
    })
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| lo + (hi - lo) * rng::uniform_f64(r))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn leaves(tape: &mut Tape, p: &TensorList) -> Vec<Var> {
    p.0.iter().map(|t| tape.param(t.clone())).collect()
}

type OpCase = (OpKind, Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn op_cases(seed: u64) -> Result<Vec<OpCase>> {
    let mut r = stream(seed, "gradcheck-ops", &[]);
    let m = |r: &mut ChaCha8Rng| random(r, &[3, 2], -1.5, 1.5);
    // kinks of clamp and minimum stay far from every probe point
    let clamp_in = Tensor::new(vec![2, 3], vec![-1.2, -0.3, 0.1, 0.4, 0.9, 1.7])?;
    let min_a = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0])?;
    let min_b = Tensor::new(vec![4], vec![0.1, -0.2, 2.6, -0.7])?;
    Ok(vec![
        (OpKind::Add, vec![m(&mut r)?, m(&mut r)?], |t, v| {
            t.add(v[0], v[1])
        }),
        (OpKind::Sub, vec![m(&mut r)?, m(&mut r)?], |t, v| {
            t.sub(v[0], v[1])
        }),
        (OpKind::Mul, vec![m(&mut r)?, m(&mut r)?], |t, v| {
            t.mul(v[0], v[1])
        }),
        (OpKind::Neg, vec![m(&mut r)?], |t, v| Ok(t.neg(v[0]))),
        (OpKind::Scale, vec![m(&mut r)?], |t, v| {
            Ok(t.scale(v[0], -1.7))
        }),
        (OpKind::AddScalar, vec![m(&mut r)?], |t, v| {
            Ok(t.add_scalar(v[0], 0.3))
        }),
        (
            OpKind::MatMul,
            vec![m(&mut r)?, random(&mut r, &[2, 4], -1.0, 1.0)?],
            |t, v| t.matmul(v[0], v[1]),
        ),
        (
            OpKind::AddRow,
            vec![m(&mut r)?, random(&mut r, &[2], -1.0, 1.0)?],
            |t, v| t.add_row(v[0], v[1]),
        ),
        (OpKind::Tanh, vec![m(&mut r)?], |t, v| Ok(t.tanh(v[0]))),
        (OpKind::Exp, vec![m(&mut r)?], |t, v| Ok(t.exp(v[0]))),
        (
            OpKind::Ln,
            vec![random(&mut r, &[3, 2], 0.5, 2.0)?],
            |t, v| t.ln(v[0]),
        ),
        (OpKind::Square, vec![m(&mut r)?], |t, v| Ok(t.square(v[0]))),
        (OpKind::SumRows, vec![m(&mut r)?], |t, v| t.sum_rows(v[0])),
        (OpKind::Sum, vec![m(&mut r)?], |t, v| Ok(t.sum(v[0]))),
        (OpKind::Mean, vec![m(&mut r)?], |t, v| Ok(t.mean(v[0]))),
        (
            OpKind::ConcatCols,
            vec![m(&mut r)?, random(&mut r, &[3, 1], -1.0, 1.0)?],
            |t, v| t.concat_cols(&[v[0], v[1]]),
        ),
        (
            OpKind::GatherRows,
            vec![random(&mut r, &[4, 2], -1.0, 1.0)?],
            |t, v| t.gather_rows(v[0], &[0, 2, 2, 3]),
        ),
        (OpKind::Clamp, vec![clamp_in], |t, v| {
            Ok(t.clamp(v[0], -0.5, 0.5))
        }),
        (OpKind::Minimum, vec![min_a, min_b], |t, v| {
            t.minimum(v[0], v[1])
        }),
        (
            OpKind::SegmentSum,
            vec![random(&mut r, &[5], -1.0, 1.0)?],
            |t, v| t.segment_sum(v[0], &[2, 3]),
        ),
    ])
}

/// One isolated check per differentiable primitive.
pub fn check_ops(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckOutcome>> {
    op_cases(seed)?
        .into_iter()
        .map(|(kind, inputs, build)| {
            check_gradient(
                &format!("op:{}", kind.name()),
                &TensorList(inputs),
                |tape, p| {
                    let vars = leaves(tape, p);
                    Ok((build(tape, &vars)?, vars))
                },
                opts,
            )
        })
        .collect()
}

/// A seeded random `2-8-1` tanh network on a small batch.
pub fn check_mlp(seed: u64, opts: &GradCheckOptions) -> Result<CheckOutcome> {
    let mut r = stream(seed, "gradcheck-mlp", &[]);
    let net = MlpParams::init(&[2, 8, 1], Activation::Tanh, false, &mut r)?;
    let input = random(&mut r, &[5, 2], -1.5, 1.5)?;
    check_gradient(
        "mlp:2-8-1",
        &net,
        |tape, p| {
            let bound = p.bind(tape);
            let x = tape.constant(input.clone());
            Ok((bound.forward(tape, x)?, bound.vars()))
        },
        opts,
    )
}

/// Tiny problem shared by the objective/estimator checks.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub model: FieldModel,
    pub theta: FieldParams,
    pub theta_old: FieldParams,
    pub x0: Vec<Vec<f64>>,
    pub conditions: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub seed: u64,
}

impl GradCheckProblem {
    /// Builds the problem; `theta_old` is a perturbation of `theta` so the
    /// ratio is away from one.
    pub fn new(dim: usize, conditions: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let model = FieldModel {
            dim,
            embed_dim: 2,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
            base: GaussianReference::standard(dim, conditions),
        };
        let mut r = stream(seed, "gradcheck-problem", &[]);
        let theta = model.init_params(false, &mut r)?;
        let count = ParamSet::parameter_count(&theta);
        if count > MAX_PARAMETERS {
            return Err(Error::config(
                "model.hidden",
                format!("gradient checks need at most {MAX_PARAMETERS} parameters, got {count}"),
            ));
        }
        let mut theta_old = theta.clone();
        let flat: Vec<f64> = ParamSet::flatten(&theta)
            .iter()
            .map(|w| w + 0.05 * rng::normal(&mut r))
            .collect();
        ParamSet::load_flat(&mut theta_old, &flat)?;
        let n = 4;
        let conds: Vec<usize> = (0..n).map(|i| i % conditions).collect();
        let x0 = (0..n)
            .map(|_| (0..dim).map(|_| rng::normal(&mut r)).collect())
            .collect();
        let old = FieldView {
            model: &model,
            params: &theta_old,
        };
        let sde = SamplerConfig::sde(4, 0.7);
        let trajectories = conds
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                sample(
                    &old,
                    &sde,
                    c,
                    crate::rng::derive_key(seed, "gradcheck-path", &[i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            theta,
            theta_old,
            x0,
            conditions: conds,
            trajectories,
            advantages: vec![0.8, -0.3, 1.1, -1.6],
            seed,
        })
    }
}

/// Every estimator mode exercised by the suite.
pub fn estimator_modes() -> Vec<(String, EstimatorConfig)> {
    let mut modes = Vec::new();
    for w in [Weighting::PathKl, Weighting::Simple, Weighting::Adaptive] {
        for s in [McScheme::SingleTimestep, McScheme::AllTimestep] {
            modes.push((
                format!("elbo/{}/{}", w.name(), s.name()),
                EstimatorConfig::elbo(w, s).with_steps(4),
            ));
        }
    }
    for adaptive in [false, true] {
        let cfg = EstimatorConfig::single_sample(adaptive).with_steps(4);
        modes.push((format!("elbo/{}", cfg.ratio_mode.name()), cfg));
    }
    for mode in [RatioMode::ExpOfSum, RatioMode::SumOfExp] {
        modes.push((
            format!("trajectory/{}", mode.name()),
            EstimatorConfig::trajectory(mode).with_steps(4),
        ));
    }
    modes
}

/// Gradient of one objective under one estimator mode.
pub fn check_objective(
    problem: &GradCheckProblem,
    estimator: &EstimatorConfig,
    objective: &ObjectiveConfig,
    name: &str,
    opts: &GradCheckOptions,
) -> Result<CheckOutcome> {
    let inputs: Vec<LikelihoodInput<'_>> = match estimator.formula {
        Formula::Trajectory => problem
            .trajectories
            .iter()
            .map(LikelihoodInput::Path)
            .collect(),
        Formula::Elbo => problem
            .x0
            .iter()
            .zip(&problem.conditions)
            .map(|(x0, &condition)| LikelihoodInput::Terminal { x0, condition })
            .collect(),
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..inputs.len())
        .map(|i| stream(problem.seed, "gradcheck-estimator", &[i as u64]))
        .collect();
    let old = FieldView {
        model: &problem.model,
        params: &problem.theta_old,
    };
    let prepared = prepare_terms(
        &old,
        Some(&problem.model.base),
        &inputs,
        estimator,
        &mut rngs,
    )?;
    check_gradient(
        name,
        &problem.theta,
        |tape, p| {
            let bound = p.bind(tape);
            let terms = evaluate_terms(
                tape,
                Policy::Taped {
                    model: &problem.model,
                    bound: &bound,
                },
                &prepared,
            )?;
            let loss = objective_loss(
                tape,
                LossInputs {
                    advantages: &problem.advantages,
                    mask: None,
                    terms: &terms,
                },
                objective,
            )?;
            Ok((loss, bound.vars()))
        },
        opts,
    )
}

/// Shapes and strengths for a full suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub dim: usize,
    pub conditions: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub beta: f64,
    pub eta: f64,
    pub clip_eps: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            conditions: 2,
            hidden: vec![6],
            seed: 0,
            beta: 0.5,
            eta: 0.3,
            clip_eps: 0.2,
        }
    }
}

/// Every primitive, the composite MLP, and each objective under each
/// estimator mode.
pub fn run_suite(spec: &SuiteSpec, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut checks = check_ops(spec.seed, opts)?;
    checks.push(check_mlp(spec.seed, opts)?);
    let problem = GradCheckProblem::new(spec.dim, spec.conditions, &spec.hidden, spec.seed)?;
    for (mode, est) in estimator_modes() {
        for kind in [
            ObjectiveKind::Epg,
            ObjectiveKind::Pepg,
            ObjectiveKind::Par,
            ObjectiveKind::Grpo,
        ] {
            let mut obj = ObjectiveConfig::new(kind)
                .with_beta(spec.beta)
                .with_eta(spec.eta);
            obj.clip_eps = spec.clip_eps;
            let name = format!("{}:{mode}", kind.name());
            checks.push(check_objective(&problem, &est, &obj, &name, opts)?);
        }
    }
    Ok(GradCheckReport {
        tolerance: opts.rel_tol,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_has_a_case() {
        let cases = op_cases(1).unwrap();
        let kinds: Vec<OpKind> = cases.iter().map(|c| c.0).collect();
        assert_eq!(kinds, OpKind::DIFFERENTIABLE.to_vec());
    }

    #[test]
    fn oversized_models_are_refused() {
        let err = GradCheckProblem::new(2, 1, &[64, 64], 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}
