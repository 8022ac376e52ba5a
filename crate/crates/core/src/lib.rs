//! Learning from label proportions with a covariate-shifted, fully labelled
//! source domain.
//!
//! The crate covers the whole experimental loop: synthetic and CSV data,
//! target-domain bagging regimes, differentiable bag and alignment losses
//! (BagCSI and its pseudo-label variant plus five baselines), seeded training
//! and sweeps, and Monte Carlo checks of the accompanying inequalities.

pub mod autodiff;
pub mod bagging;
pub mod bound_lab;
pub mod data;
pub mod error;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
