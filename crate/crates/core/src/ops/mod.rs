//! Numeric kernels behind the tape operations.

pub mod conv;
pub mod norm;
pub mod resample;
