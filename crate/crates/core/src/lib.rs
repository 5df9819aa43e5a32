//! Language-dependent adapter finetuning for a streaming multilingual
//! cascaded Conformer transducer.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix the
//! single-precision instantiation used for training and checkpoints.

pub mod error;
pub mod numerics;

pub use error::{Error, LoadError, Result};
pub use numerics::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub mod frontend;
pub(crate) mod rng;
pub mod backbone;
pub mod lda;
pub mod model_config;

pub use model_config::ModelConfig;
pub mod transducer;
pub mod model;
pub mod train;

pub use model::Model;
pub mod harness;
pub mod checkpoints;
pub mod nst;
