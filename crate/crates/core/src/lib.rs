//! Snapshot spectral imaging toolkit.
//!
//! Simulates coded-aperture snapshot spectral imaging (CASSI) measurements and
//! reconstructs hyperspectral cubes with an unfolded half-quadratic-splitting
//! recurrence. Each stage pairs a closed-form data step with a denoiser; the
//! learned path estimates a corrected sensing operator and the stage penalties
//! with a small convolutional network and denoises with a local/non-local
//! window transformer whose weights are shared across stages.

pub mod cassi;
pub mod den;
mod error;
pub mod hqs;
pub mod io;
pub mod lnlt;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod tv;

pub use error::{Error, ExitCode, Result};
pub use tensor::{Tensor, Var};
