//! Differentiable core: tape, model family, optimizers and gradient checking.

pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use model::{init_model, ArchConfig, Forward, Model, ParamVars, Prediction};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{Gradients, Tape, Var};
