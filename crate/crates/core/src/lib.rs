//! Two-stage recurrent-residual multi-path segmentation network, built on a
//! small dense tensor type with reverse-mode differentiation.

pub mod bench;
pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod postprocess;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Activation, Mode, Tape, Var};
pub use tensor::{Dims, Real, Tensor};
