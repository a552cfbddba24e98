//! Dense matrices, seeded random streams, initialization and rank utilities.

mod init;
mod linalg;
mod matrix;
mod rng;

pub use init::{kaiming_bound, kaiming_uniform_init};
pub use linalg::{
    column_space_residual, numerical_rank, numerical_rank_default, row_space_residual,
    singular_values, DEFAULT_RANK_TOL,
};
pub use matrix::Matrix;
pub use rng::RngState;
