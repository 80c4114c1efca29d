//! Dense linear algebra kernels and seeded randomness.

mod io;
mod matrix;
mod qr;
mod rng;
mod svd;

use thiserror::Error;

pub use io::{decode_fixture, encode_fixture, load_matrix, parse_csv, save_matrix};
pub use matrix::{Matrix, Precision};
pub use qr::{householder_qr, orthonormal_basis, QR_RANK_TOL};
pub use rng::{gaussian_matrix, sample_indices, sample_rows, SeededRng};
pub use svd::{frobenius_norm, pinv, singular_values, spectral_norm, svd, SvdResult, MAX_SWEEPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    DimensionMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("jacobi svd did not converge in {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("fixture format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;
