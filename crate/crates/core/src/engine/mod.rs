//! Minimal tensor engine: dense arrays, a define-by-run gradient tape, and the
//! kernels a small denoising UNet needs.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, ScalarFn};
pub use params::{fan_in_uniform, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{gemm, Element, Tensor};
