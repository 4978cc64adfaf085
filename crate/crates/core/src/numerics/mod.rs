//! Dense tensors, reverse-mode differentiation, a small MLP and Adam.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{forward_mlp, Activation, BoundMlp, DenseLayer, MlpParams, ParamGrads, ParamSet};
pub use tape::{BackwardFault, ComputationTape, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

/// Stop-gradient on a tape; alias of [`Tape::detach`].
pub fn detach(tape: &mut Tape, x: Var) -> Var {
    tape.detach(x)
}
