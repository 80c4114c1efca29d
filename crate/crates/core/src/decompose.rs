//! Rank-k factorizations `A ≈ U·V`.
//!
//! Four methods share one interface:
//!
//! - [`truncated_svd`]: the optimal rank-k approximation, used as the oracle.
//! - [`rsvd`]: Gaussian sketch, QR range finder, optional power iterations,
//!   then a small-SVD fold down to rank k.
//! - [`sampled_ortho`]: the same pipeline with the Gaussian sketch replaced by
//!   `Aᵀ` restricted to uniformly sampled rows, so `Y = A·A_lᵀ`. No Gaussian
//!   matrix is ever generated.
//! - [`random_projection`]: `A ≈ (1/l)·GᵀG·A`, kept as a baseline.
//!
//! For the orthogonal methods the returned `V` is literally `UᵀA`, so the
//! reconstruction is the projection `UUᵀA`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{gaussian_matrix, householder_qr, sample_rows, spectral_norm, svd, LinalgError, Matrix, SeededRng};

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Short method tag, serialized as `tsvd`, `rsvd`, `sampled`, `randproj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "tsvd")]
    TruncatedSvd,
    #[serde(rename = "rsvd")]
    Rsvd,
    #[serde(rename = "sampled")]
    SampledOrtho,
    #[serde(rename = "randproj")]
    RandomProjection,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] =
        [MethodKind::TruncatedSvd, MethodKind::Rsvd, MethodKind::SampledOrtho, MethodKind::RandomProjection];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::TruncatedSvd => "tsvd",
            MethodKind::Rsvd => "rsvd",
            MethodKind::SampledOrtho => "sampled",
            MethodKind::RandomProjection => "randproj",
        }
    }

    pub fn is_orthogonal(self) -> bool {
        !matches!(self, MethodKind::RandomProjection)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tsvd" => Ok(MethodKind::TruncatedSvd),
            "rsvd" => Ok(MethodKind::Rsvd),
            "sampled" => Ok(MethodKind::SampledOrtho),
            "randproj" => Ok(MethodKind::RandomProjection),
            other => Err(format!("unknown method {other:?} (expected tsvd, rsvd, sampled, randproj)")),
        }
    }
}

/// A fully parameterized factorization method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecomposeMethod {
    TruncatedSvd,
    /// Sketch width `l` and power iterations `t`.
    Rsvd { l: usize, t: usize },
    /// Sampled rows `l` and power iterations `t`.
    SampledOrtho { l: usize, t: usize },
    /// Projection dimension `l`; the resulting rank is `l`.
    RandomProjection { l: usize },
}

impl DecomposeMethod {
    pub fn kind(&self) -> MethodKind {
        match self {
            DecomposeMethod::TruncatedSvd => MethodKind::TruncatedSvd,
            DecomposeMethod::Rsvd { .. } => MethodKind::Rsvd,
            DecomposeMethod::SampledOrtho { .. } => MethodKind::SampledOrtho,
            DecomposeMethod::RandomProjection { .. } => MethodKind::RandomProjection,
        }
    }

    /// Builds the method for target rank `k`: sketch width `k + oversample`,
    /// `t` power iterations. Random projection uses `l = k`.
    pub fn for_rank(kind: MethodKind, k: usize, oversample: usize, t: usize) -> Self {
        match kind {
            MethodKind::TruncatedSvd => DecomposeMethod::TruncatedSvd,
            MethodKind::Rsvd => DecomposeMethod::Rsvd { l: k + oversample, t },
            MethodKind::SampledOrtho => DecomposeMethod::SampledOrtho { l: k + oversample, t },
            MethodKind::RandomProjection => DecomposeMethod::RandomProjection { l: k },
        }
    }
}

/// `A ≈ U·V` with `U` m×k and `V` k×n.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub u: Matrix,
    pub v: Matrix,
    pub method: MethodKind,
    /// Rows drawn by [`sampled_ortho`], in draw order.
    pub sample_indices: Option<Vec<usize>>,
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.cols())
    }

    /// `(m + n)·k`.
    pub fn element_count(&self) -> usize {
        self.u.len() + self.v.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Spectral,
    Frobenius,
}

/// Dispatches to the method; `rng` is untouched by the truncated SVD.
pub fn decompose(a: &Matrix, k: usize, method: DecomposeMethod, rng: &mut SeededRng) -> Result<LowRankFactor> {
    match method {
        DecomposeMethod::TruncatedSvd => truncated_svd(a, k),
        DecomposeMethod::Rsvd { l, t } => rsvd(a, k, l, t, rng),
        DecomposeMethod::SampledOrtho { l, t } => sampled_ortho(a, k, l, t, rng),
        DecomposeMethod::RandomProjection { l } => {
            if l != k {
                return Err(LinalgError::Contract(format!("random projection rank is l; got k={k}, l={l}")));
            }
            random_projection(a, l, rng)
        }
    }
}

fn check_rank(a: &Matrix, k: usize) -> Result<()> {
    let p = a.rows().min(a.cols());
    if k == 0 || k > p {
        return Err(LinalgError::Contract(format!("rank {k} outside 1..={p} for a {}x{} matrix", a.rows(), a.cols())));
    }
    Ok(())
}

pub fn truncated_svd(a: &Matrix, k: usize) -> Result<LowRankFactor> {
    check_rank(a, k)?;
    let s = svd(a)?;
    let u = s.u.columns(0, k);
    let v = Matrix::from_fn(k, a.cols(), |i, j| s.singular_values[i] * s.v.get(j, i));
    Ok(LowRankFactor { u, v, method: MethodKind::TruncatedSvd, sample_indices: None })
}

/// Randomized SVD with an n×l Gaussian sketch.
pub fn rsvd(a: &Matrix, k: usize, l: usize, t: usize, rng: &mut SeededRng) -> Result<LowRankFactor> {
    check_rank(a, k)?;
    if l < k || l > a.rows().min(a.cols()) {
        return Err(LinalgError::Contract(format!(
            "rsvd needs k <= l <= min(m, n); got k={k}, l={l}, shape {:?}",
            a.shape()
        )));
    }
    let omega = gaussian_matrix(rng, a.cols(), l);
    let y = a.matmul(&omega)?;
    let q = range_finder(a, y, t)?;
    let u = fold_to_rank(a, q, k)?;
    let v = u.t_matmul(a)?;
    Ok(LowRankFactor { u, v, method: MethodKind::Rsvd, sample_indices: None })
}

/// Sampling-based orthogonal decomposition.
///
/// 1. Sample `l` rows `A_l` uniformly without replacement.
/// 2. `Y = A·A_lᵀ`.
/// 3. `t` times: `Q = qr(Y).Q`, `Y = A(AᵀQ)`.
/// 4. `Q = qr(Y).Q`; `U = Q` and `V = QᵀA`.
///
/// With `l > k` the width-`l` basis is folded to rank `k` through the SVD of
/// the small matrix `QᵀA`; `l = k` is the plain algorithm.
pub fn sampled_ortho(a: &Matrix, k: usize, l: usize, t: usize, rng: &mut SeededRng) -> Result<LowRankFactor> {
    check_rank(a, k)?;
    if l < k || l > a.rows() {
        return Err(LinalgError::Contract(format!(
            "sampled_ortho needs k <= l <= m; got k={k}, l={l}, m={}",
            a.rows()
        )));
    }
    let (sampled, indices) = sample_rows(rng, a, l)?;
    let y = a.matmul_t(&sampled)?;
    let q = range_finder(a, y, t)?;
    let u = fold_to_rank(a, q, k)?;
    let v = u.t_matmul(a)?;
    Ok(LowRankFactor { u, v, method: MethodKind::SampledOrtho, sample_indices: Some(indices) })
}

/// `U = (1/l)·Gᵀ`, `V = G·A` with `G` an l×m Gaussian.
pub fn random_projection(a: &Matrix, l: usize, rng: &mut SeededRng) -> Result<LowRankFactor> {
    if l == 0 || l > a.rows() {
        return Err(LinalgError::Contract(format!("random_projection needs 1 <= l <= m; got l={l}, m={}", a.rows())));
    }
    let g = gaussian_matrix(rng, l, a.rows());
    let u = g.transpose().scale(1.0 / l as f64);
    let v = g.matmul(a)?;
    Ok(LowRankFactor { u, v, method: MethodKind::RandomProjection, sample_indices: None })
}

/// Orthonormal basis of `range(Y)` after `t` power iterations.
fn range_finder(a: &Matrix, mut y: Matrix, t: usize) -> Result<Matrix> {
    for _ in 0..t {
        let q = householder_qr(&y)?.0;
        y = a.matmul(&a.t_matmul(&q)?)?;
    }
    Ok(householder_qr(&y)?.0)
}

/// Keeps `Q` when it already has `k` columns; otherwise rotates it onto the
/// top-k left singular vectors of `QᵀA`.
fn fold_to_rank(a: &Matrix, q: Matrix, k: usize) -> Result<Matrix> {
    if q.cols() == k {
        return Ok(q);
    }
    let b = q.t_matmul(a)?;
    let small = svd(&b)?;
    q.matmul(&small.u.columns(0, k))
}

pub fn reconstruct(f: &LowRankFactor) -> Matrix {
    f.u.matmul(&f.v).expect("factor inner dimensions agree")
}

/// `‖A − U·V‖` in the requested norm.
pub fn approx_error(a: &Matrix, f: &LowRankFactor, norm: Norm) -> Result<f64> {
    if f.shape() != a.shape() {
        return Err(LinalgError::DimensionMismatch { op: "approx_error", left: a.shape(), right: f.shape() });
    }
    let residual = a.sub(&reconstruct(f))?;
    Ok(match norm {
        Norm::Spectral => spectral_norm(&residual)?,
        Norm::Frobenius => residual.frobenius_norm(),
    })
}
