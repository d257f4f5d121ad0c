//! Cross-resolution face recognition with joint super-resolution and
//! identity learning.

pub mod checkpoint;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fr;
pub mod image;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod resample;
pub mod scalar;
pub mod sr;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;
