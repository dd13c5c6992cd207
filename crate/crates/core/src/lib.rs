//! Masked surfel prediction for self-supervised point-cloud learning.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod training;
pub mod masking;

pub use error::{Error, Result};
