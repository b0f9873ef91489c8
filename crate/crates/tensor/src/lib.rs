//! Dense tensors, a reverse-mode gradient tape, AdamW and a binary
//! checkpoint format.

mod error;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use kernels::KeyIndex;
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{lit, DType, Scalar};
pub use tape::{AllocStats, CustomOp, Gradients, Tape, Var, INVERSE_SIGMOID_EPS, LAYER_NORM_EPS};
pub use tensor::{numel, Tensor};
