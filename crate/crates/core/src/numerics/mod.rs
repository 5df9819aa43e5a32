//! Tensors, reverse-mode differentiation and the optimizer stack.

mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use optim::{adam_step, lr_at_step, AdamConfig, OptimizerState};
pub use params::{ParamBinder, ParamStore};
pub use scalar::{lit, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Layer normalization of a plain tensor over its trailing dimension.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> crate::Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
pub(crate) mod gradcheck;
