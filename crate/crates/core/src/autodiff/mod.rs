//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_params, finite_difference_check};
pub use ops::conv1d_output_len;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{accumulate, Gradients, ParamGrads, Tape, Var};
pub use tensor::Tensor;
