//! Dense tensors, a reverse-mode tape, and the Adam update rule.

mod adam;
mod conv;
pub mod gradcheck;
mod loss;
mod norm;
mod pointwise;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv_out_extent, deconv_out_extent};
pub use loss::LOG_CLAMP;
pub use norm::{BatchStats, BnMode};
pub use pointwise::Activation;
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
