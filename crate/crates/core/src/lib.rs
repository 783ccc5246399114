pub mod engine;
mod error;

pub use engine::{Element, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod inpaint;
pub mod io;
pub mod jointnet;
pub mod optim;
pub mod tiling;
pub mod train;
pub mod unet;
