use alloc::format;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::tape::{matmul_raw, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::uniform_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Identity => x,
        }
    }
}

/// One fully-connected layer; `weight` is `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Any collection of trainable tensors with a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenation of every parameter value, in order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.parameter_count();
        if flat.len() != expected {
            return Err(Error::shape(
                "load_flat",
                format!("expected {expected} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Gradients aligned with [`ParamSet::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(Tensor::squared_norm).sum())
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in &mut self.0 {
                for x in t.data_mut() {
                    *x *= s;
                }
            }
        }
    }
}

/// Weights and biases of a small fully-connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    /// Seeded uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    /// With `zero_output`, the last layer starts at exactly zero.
    pub fn init<R: RngCore>(
        sizes: &[usize],
        hidden: Activation,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(
                "model.hidden",
                format!("invalid layer sizes {sizes:?}"),
            ));
        }
        let n_layers = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = l + 1 == n_layers;
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| {
                        if last && zero_output {
                            0.0
                        } else {
                            (2.0 * uniform_f64(rng) - 1.0) * bound
                        }
                    })
                    .collect()
            };
            let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?;
            let bias = Tensor::vector(draw(fan_out));
            layers.push(DenseLayer {
                weight,
                bias,
                activation: if last { Activation::Identity } else { hidden },
            });
        }
        Ok(Self { layers })
    }

    /// Single linear identity layer of width `n`.
    pub fn identity(n: usize) -> Self {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Self {
            layers: alloc::vec![DenseLayer {
                weight: w,
                bias: Tensor::zeros(&[n]),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[1]
    }

    /// Gradient-free forward pass over `[n, fan_in]` rows.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        check_input(self.fan_in(), input)?;
        let mut h = input.clone();
        for layer in &self.layers {
            let mut z = matmul_raw(&h, &layer.weight);
            let m = layer.bias.len();
            for (i, x) in z.data_mut().iter_mut().enumerate() {
                *x = layer.activation.apply(*x + layer.bias.data()[i % m]);
            }
            h = z;
        }
        Ok(h)
    }

    /// Registers every weight and bias as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.param(l.weight.clone()),
                        tape.param(l.bias.clone()),
                        l.activation,
                    )
                })
                .collect(),
            fan_in: self.fan_in(),
        }
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn check_input(fan_in: usize, input: &Tensor) -> Result<()> {
    if input.rank() != 2 || input.shape()[1] != fan_in {
        return Err(Error::shape(
            "forward_mlp",
            format!(
                "input {:?} but first layer expects {fan_in} features",
                input.shape()
            ),
        ));
    }
    Ok(())
}

/// MLP parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
    fan_in: usize,
}

impl BoundMlp {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        check_input(self.fan_in, tape.value(input))?;
        let mut h = input;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = match act {
                Activation::Tanh => tape.tanh(z),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }
}

/// Forward pass; recorded on `tape` when one is supplied.
pub fn forward_mlp(params: &MlpParams, input: &Tensor, tape: Option<&mut Tape>) -> Result<Tensor> {
    match tape {
        None => params.forward(input),
        Some(tape) => {
            let bound = params.bind(tape);
            let x = tape.constant(input.clone());
            let out = bound.forward(tape, x)?;
            Ok(tape.value(out).clone())
        }
    }
}
