//! Boundary-guided U-Net segmentation on a small reverse-mode autograd core.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod pbe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Activation, BinaryOp, CustomOp, Tape, Var};
pub use error::{Error, Result};
pub use ops::conv::Conv2dParams;
pub use ops::norm::BnConfig;
pub use tensor::{Precision, Scalar, Tensor};
