//! Non-linear latent-space paths from learned RBF warpings.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod generator;
pub mod network;
pub mod parallel;
pub mod reconstructor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
