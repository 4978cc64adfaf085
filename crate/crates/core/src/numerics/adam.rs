use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::mlp::{ParamGrads, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Moment accumulators mirroring a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before any parameter is touched.
pub fn adam_step<P: ParamSet + ?Sized>(
    state: &mut AdamState,
    params: &mut P,
    grads: &ParamGrads,
) -> Result<()> {
    let n = state.first.len();
    if grads.0.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradient tensors for {n} parameters", grads.0.len()),
        ));
    }
    for (i, (g, m)) in grads.0.iter().zip(&state.first).enumerate() {
        if g.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    m.shape()
                ),
            ));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter tensor {i}, element {j} (value {})",
                g.data()[j]
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(beta1, f64::from(t));
    let c2 = 1.0 - libm::pow(beta2, f64::from(t));
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads.0)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((pk, &gk), mk), vk) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mk = beta1 * *mk + (1.0 - beta1) * gk;
            *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
            let m_hat = *mk / c1;
            let v_hat = *vk / c2;
            *pk -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
