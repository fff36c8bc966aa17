//! Dense `f32`/`f64` tensors with tape-based reverse-mode differentiation and
//! the primitive ops needed by convolutional and recurrent speech models.

mod error;
pub mod gradcheck;
pub mod ops;
pub mod par;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use ops::conv::{conv_out_len, ConvGeom};
pub use ops::elementwise::{sigmoid, Activation};
pub use ops::norm::{BatchStats, BnMode};
pub use ops::pool::adaptive_window;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};
