//! Four-factor low-rank adapters (`ΔW = A_aux · A_train · B_train · B_aux`,
//! outer factors frozen) together with the machinery needed to check them at
//! desk scale: a taped reverse-mode autodiff engine, a toy transformer, a
//! training harness, a parameter accountant and a binary checkpoint format.

pub mod accountant;
pub mod adapters;
pub mod autodiff;
pub mod checks;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use numerics::{Matrix, RngState};
