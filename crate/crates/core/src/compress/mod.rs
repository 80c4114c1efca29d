//! Activation storage policy: what gets kept for backward, and at what size.
//!
//! [`compress_activation`] turns a matrix into a [`StoredActivation`], either
//! the exact matrix or a rank-k factor, and [`retrieve_activation`] turns it
//! back into a matrix of the original shape. The [`MemoryLedger`] tallies the
//! bytes each stored activation costs against what exact storage would have
//! cost.

mod ledger;
mod spectrum;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{decompose, reconstruct, DecomposeMethod, LowRankFactor, MethodKind};
use crate::linalg::{LinalgError, Matrix, Precision, SeededRng};

pub use ledger::{LedgerEntry, LedgerRow, MemoryLedger};
pub use spectrum::{kept_ratio, kept_ratio_with, singular_spectrum, Energy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressError {
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("compressing activation {label:?}: {source}")]
    Decompose {
        label: String,
        #[source]
        source: LinalgError,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, CompressError>;

/// How activations are stored for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionPolicy {
    /// When false every activation is stored exactly.
    pub compress: bool,
    /// Retained-rank fraction `r = k/n`.
    pub ratio: f64,
    pub method: MethodKind,
    /// Extra sketch columns: the methods run with `l = k + oversample`.
    pub oversample: usize,
    pub power_iters: usize,
    /// Activations with `min(m, n)` below this stay exact.
    pub min_side: usize,
    pub precision: Precision,
    /// Keep the low-rank form even when it is not smaller than the matrix.
    /// Only useful for exercising the lossless `r = 1` path in tests.
    pub allow_non_saving: bool,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        CompressionPolicy {
            compress: true,
            ratio: 0.5,
            method: MethodKind::SampledOrtho,
            oversample: 0,
            power_iters: 1,
            min_side: 16,
            precision: Precision::F32,
            allow_non_saving: false,
        }
    }
}

impl CompressionPolicy {
    /// Exact storage at 64-bit precision.
    pub fn exact() -> Self {
        CompressionPolicy { compress: false, ratio: 1.0, precision: Precision::F64, ..Default::default() }
    }

    /// Compression at ratio `r` with the default method, 64-bit storage.
    pub fn lowrank(ratio: f64) -> Self {
        CompressionPolicy { ratio, precision: Precision::F64, ..Default::default() }
    }

    pub fn with_method(mut self, method: MethodKind) -> Self {
        self.method = method;
        self
    }

    pub fn with_power_iters(mut self, t: usize) -> Self {
        self.power_iters = t;
        self
    }

    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }

    pub fn with_min_side(mut self, min_side: usize) -> Self {
        self.min_side = min_side;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn allowing_non_saving(mut self) -> Self {
        self.allow_non_saving = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio.is_finite() && self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CompressError::Policy(format!("ratio must lie in (0, 1], got {}", self.ratio)));
        }
        Ok(())
    }

    /// `k = max(1, round(r·n))` clamped to `min(m, n)`, rounding half away
    /// from zero.
    pub fn rank_for(&self, rows: usize, cols: usize) -> usize {
        let k = ((self.ratio * cols as f64).round() as usize).max(1);
        k.min(rows.min(cols)).max(1)
    }

    /// The method used for an m×n activation at rank `k`, with the sketch
    /// width clamped to what the matrix admits.
    pub fn method_for(&self, rows: usize, cols: usize, k: usize) -> DecomposeMethod {
        let cap = match self.method {
            MethodKind::Rsvd => rows.min(cols),
            _ => rows,
        };
        let oversample = (k + self.oversample).min(cap).saturating_sub(k);
        DecomposeMethod::for_rank(self.method, k, oversample, self.power_iters)
    }

    /// Whether an m×n activation would be stored in low-rank form.
    pub fn would_compress(&self, rows: usize, cols: usize) -> bool {
        if !self.compress || rows.min(cols) < self.min_side {
            return false;
        }
        let k = self.rank_for(rows, cols);
        self.allow_non_saving || (rows + cols) * k < rows * cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Exact(Matrix),
    LowRank(LowRankFactor),
}

/// What a tape node keeps for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredActivation {
    pub label: String,
    pub storage: Storage,
    pub shape: (usize, usize),
    pub precision: Precision,
    pub exact_bytes: u64,
    pub stored_bytes: u64,
}

impl StoredActivation {
    /// Exact storage without consulting a policy.
    pub fn exact(label: impl Into<String>, a: Matrix, precision: Precision) -> Self {
        let shape = a.shape();
        let bytes = (a.len() * precision.bytes_per_element()) as u64;
        StoredActivation {
            label: label.into(),
            storage: Storage::Exact(a.quantize(precision)),
            shape,
            precision,
            exact_bytes: bytes,
            stored_bytes: bytes,
        }
    }

    /// The stored rank, `None` for exact storage.
    pub fn rank(&self) -> Option<usize> {
        match &self.storage {
            Storage::Exact(_) => None,
            Storage::LowRank(f) => Some(f.rank()),
        }
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self.storage, Storage::LowRank(_))
    }
}

/// Stores `a` under `policy`, falling back to exact storage when the matrix
/// is small or the factor would not save memory.
pub fn compress_activation(
    label: &str,
    a: &Matrix,
    policy: &CompressionPolicy,
    rng: &mut SeededRng,
) -> Result<StoredActivation> {
    policy.validate()?;
    if a.is_empty() {
        return Err(CompressError::Domain(format!("activation {label:?} is empty")));
    }
    let (m, n) = a.shape();
    if !policy.would_compress(m, n) {
        return Ok(StoredActivation::exact(label, a.clone(), policy.precision));
    }
    let k = policy.rank_for(m, n);
    let method = policy.method_for(m, n, k);
    let mut factor = decompose(a, k, method, rng)
        .map_err(|source| CompressError::Decompose { label: label.to_string(), source })?;
    factor.u = factor.u.quantize(policy.precision);
    factor.v = factor.v.quantize(policy.precision);
    let elem = policy.precision.bytes_per_element();
    Ok(StoredActivation {
        label: label.to_string(),
        shape: (m, n),
        precision: policy.precision,
        exact_bytes: (m * n * elem) as u64,
        stored_bytes: (factor.element_count() * elem) as u64,
        storage: Storage::LowRank(factor),
    })
}

/// The stored matrix, or the reconstruction `U·V` of a factor.
pub fn retrieve_activation(s: &StoredActivation) -> Matrix {
    match &s.storage {
        Storage::Exact(a) => a.clone(),
        Storage::LowRank(f) => reconstruct(f),
    }
}
