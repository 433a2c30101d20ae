//! CIFAR residual networks whose bridge connections are recalibrated by
//! squeeze-and-excitation blocks, together with the baselines and ablations
//! they are compared against, on a small CPU autodiff engine.

pub mod arch;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod train;

pub use arch::{ArchConfig, ArchVariant, Model};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
