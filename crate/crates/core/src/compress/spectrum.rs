//! Singular spectra and the kept-dimension ratio.

use serde::{Deserialize, Serialize};

use super::{CompressError, Result};
use crate::linalg::{singular_values, Matrix};

/// What "energy" a spectrum prefix is measured in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Energy {
    /// Plain sum of singular values.
    #[default]
    Sum,
    /// Sum of squared singular values.
    Squared,
}

/// Singular values of `a`, nonincreasing.
pub fn singular_spectrum(a: &Matrix) -> Result<Vec<f64>> {
    Ok(singular_values(a)?)
}

/// Smallest `j` whose prefix holds `energy_frac` of the plain singular-value
/// sum, returned as `j / len`.
pub fn kept_ratio(sigma: &[f64], energy_frac: f64) -> Result<f64> {
    kept_ratio_with(sigma, energy_frac, Energy::Sum)
}

pub fn kept_ratio_with(sigma: &[f64], energy_frac: f64, energy: Energy) -> Result<f64> {
    if !(energy_frac > 0.0 && energy_frac <= 1.0) {
        return Err(CompressError::Domain(format!("energy fraction must lie in (0, 1], got {energy_frac}")));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(CompressError::Domain("singular values must be finite and nonnegative".into()));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(CompressError::Domain("singular values must be nonincreasing".into()));
    }
    let weight = |s: f64| match energy {
        Energy::Sum => s,
        Energy::Squared => s * s,
    };
    let total: f64 = sigma.iter().map(|s| weight(*s)).sum();
    if total == 0.0 {
        return Err(CompressError::Domain("spectrum is all zero".into()));
    }
    let target = energy_frac * total;
    let mut acc = 0.0;
    for (j, s) in sigma.iter().enumerate() {
        acc += weight(*s);
        if acc >= target {
            return Ok((j + 1) as f64 / sigma.len() as f64);
        }
    }
    // The running sum equals `total` after the last term, so this is only
    // reachable through rounding in `energy_frac * total`.
    Ok(1.0)
}
