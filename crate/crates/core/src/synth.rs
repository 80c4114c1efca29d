//! Synthetic test matrices with a known spectrum.

use crate::linalg::{gaussian_matrix, orthonormal_basis, LinalgError, Matrix, Result, SeededRng};

/// Random orthonormal `m×k` basis (QR of a Gaussian matrix).
pub fn random_orthonormal(rng: &mut SeededRng, m: usize, k: usize) -> Result<Matrix> {
    if k > m {
        return Err(LinalgError::Contract(format!("cannot fit {k} orthonormal columns in dimension {m}")));
    }
    orthonormal_basis(&gaussian_matrix(rng, m, k))
}

/// `U·diag(σ)·Vᵀ` with Haar-like random singular vectors.
pub fn with_spectrum(rng: &mut SeededRng, m: usize, n: usize, sigma: &[f64]) -> Result<Matrix> {
    let u = random_orthonormal(rng, m, sigma.len())?;
    let v = random_orthonormal(rng, n, sigma.len())?;
    scale_columns(&u, sigma).matmul_t(&v)
}

/// An exactly rank-`k` matrix with singular values spread over `[1, 10]`.
pub fn exact_rank(rng: &mut SeededRng, m: usize, n: usize, k: usize) -> Result<Matrix> {
    with_spectrum(rng, m, n, &linear_spectrum(k, 10.0, 1.0))
}

/// Rank-`k` signal (σ from 10 down to 1) plus i.i.d. Gaussian noise of
/// standard deviation `noise`.
pub fn low_rank_plus_noise(rng: &mut SeededRng, m: usize, n: usize, k: usize, noise: f64) -> Result<Matrix> {
    let signal = exact_rank(rng, m, n, k)?;
    signal.add(&gaussian_matrix(rng, m, n).scale(noise))
}

/// Like [`with_spectrum`] but the leading left singular vector is the first
/// standard basis vector, so all of its energy sits in row 0.
pub fn coherent_spike(rng: &mut SeededRng, m: usize, n: usize, sigma: &[f64]) -> Result<Matrix> {
    let k = sigma.len();
    if k == 0 || k > m {
        return Err(LinalgError::Contract(format!("spectrum of length {k} does not fit {m} rows")));
    }
    let rest = random_orthonormal(rng, m - 1, k - 1)?;
    let u = Matrix::from_fn(m, k, |i, j| match (i, j) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => rest.get(i - 1, j - 1),
    });
    let v = random_orthonormal(rng, n, k)?;
    scale_columns(&u, sigma).matmul_t(&v)
}

/// `k` values evenly spaced from `hi` down to `lo`.
pub fn linear_spectrum(k: usize, hi: f64, lo: f64) -> Vec<f64> {
    if k == 1 {
        return vec![hi];
    }
    (0..k).map(|i| hi - (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

fn scale_columns(a: &Matrix, s: &[f64]) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * s[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;

    #[test]
    fn spectrum_is_reproduced() {
        let mut rng = SeededRng::new(1);
        let sigma = [5.0, 3.0, 0.5];
        for a in [with_spectrum(&mut rng, 20, 12, &sigma).unwrap(), coherent_spike(&mut rng, 20, 12, &sigma).unwrap()] {
            let s = singular_values(&a).unwrap();
            for (got, want) in s.iter().zip(sigma) {
                assert!((got - want).abs() < 1e-10);
            }
            assert!(s[3] < 1e-10);
        }
    }

    #[test]
    fn spike_lives_in_first_row() {
        let mut rng = SeededRng::new(2);
        let a = coherent_spike(&mut rng, 16, 8, &[4.0, 1.0]).unwrap();
        let row0: f64 = a.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((row0 - 4.0).abs() < 1e-10);
    }

    #[test]
    fn linear_spectrum_endpoints() {
        assert_eq!(linear_spectrum(1, 10.0, 1.0), vec![10.0]);
        assert_eq!(linear_spectrum(4, 10.0, 1.0), vec![10.0, 7.0, 4.0, 1.0]);
    }
}
