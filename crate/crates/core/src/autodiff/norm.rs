//! RMS normalization and its backward from the normalized output.
//!
//! Forward: `rms_i = sqrt(mean_j x_ij² + ε)`, `y = (x / rms) ⊙ γ`.
//!
//! Backward needs only `y`, `γ` and `rms`. With `x̄ = y ⊘ γ` and
//! `ḡ = g ⊙ γ`:
//!
//! ```text
//! s_i      = (1/n) Σ_j ḡ_ij · x̄_ij
//! (∂x)_ij  = (ḡ_ij − x̄_ij · s_i) / rms_i
//! (∂γ)_j   = Σ_i g_ij · x̄_ij
//! ```
//!
//! This is the exact Jacobian for any `ε ≥ 0`: `ε` enters only through
//! `rms`, and `x̄ = x / rms` absorbs it.

use super::{AutodiffError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub gx: Matrix,
    pub ggamma: Matrix,
}

pub fn rms_rows(x: &Matrix, eps: f64) -> Vec<f64> {
    let n = x.cols() as f64;
    (0..x.rows()).map(|i| (x.row(i).iter().map(|v| v * v).sum::<f64>() / n + eps).sqrt()).collect()
}

fn check_gamma(gamma: &Matrix, cols: usize) -> Result<()> {
    if gamma.shape() != (1, cols) {
        return Err(AutodiffError::Shape { op: "rmsnorm gamma", left: (1, cols), right: gamma.shape() });
    }
    if let Some(j) = gamma.as_slice().iter().position(|g| *g == 0.0 || !g.is_finite()) {
        return Err(AutodiffError::Domain(format!("gamma[{j}] must be finite and nonzero")));
    }
    Ok(())
}

/// Returns the normalized output and the per-row RMS.
pub fn rmsnorm_forward(x: &Matrix, gamma: &Matrix, eps: f64) -> Result<(Matrix, Vec<f64>)> {
    check_gamma(gamma, x.cols())?;
    if !(eps >= 0.0) {
        return Err(AutodiffError::Domain(format!("epsilon must be nonnegative, got {eps}")));
    }
    let rms = rms_rows(x, eps);
    if let Some(i) = rms.iter().position(|r| !(*r > 0.0)) {
        return Err(AutodiffError::Domain(format!("row {i} has zero RMS; use epsilon > 0")));
    }
    let y = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / rms[i] * gamma.get(0, j));
    Ok((y, rms))
}

/// Gradients of the normalization given the (possibly reconstructed)
/// output `y`. `flip_correction` negates the mean-correction term and exists
/// only so verification harnesses can prove they catch a wrong formula.
pub fn rmsnorm_backward(y: &Matrix, gamma: &Matrix, rms: &[f64], gy: &Matrix, flip_correction: bool) -> Result<NormGrads> {
    let (m, n) = y.shape();
    check_gamma(gamma, n)?;
    if gy.shape() != (m, n) {
        return Err(AutodiffError::Shape { op: "rmsnorm backward", left: (m, n), right: gy.shape() });
    }
    if rms.len() != m {
        return Err(AutodiffError::Shape { op: "rmsnorm rms", left: (m, 1), right: (rms.len(), 1) });
    }
    let sign = if flip_correction { -1.0 } else { 1.0 };
    let g = gamma.as_slice();
    let mut gx = Matrix::zeros(m, n);
    let mut ggamma = Matrix::zeros(1, n);
    let mut xbar = vec![0.0; n];
    let mut gbar = vec![0.0; n];
    for i in 0..m {
        let (yr, gr) = (y.row(i), gy.row(i));
        let mut s = 0.0;
        for j in 0..n {
            xbar[j] = yr[j] / g[j];
            gbar[j] = gr[j] * g[j];
            s += gbar[j] * xbar[j];
        }
        s /= n as f64;
        let inv = 1.0 / rms[i];
        let out = gx.row_mut(i);
        for j in 0..n {
            out[j] = inv * (gbar[j] - sign * xbar[j] * s);
        }
        let gg = ggamma.row_mut(0);
        for j in 0..n {
            gg[j] += gr[j] * xbar[j];
        }
    }
    Ok(NormGrads { gx, ggamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;

    #[test]
    fn single_row_hand_values() {
        let x = Matrix::from_rows(&[&[1.0, 1.0]]);
        let gamma = Matrix::from_rows(&[&[1.0, 1.0]]);
        let (y, rms) = rmsnorm_forward(&x, &gamma, 0.0).unwrap();
        assert_eq!(rms, vec![1.0]);
        assert_eq!(y, x);
        let g = rmsnorm_backward(&y, &gamma, &rms, &Matrix::from_rows(&[&[1.0, 0.0]]), false).unwrap();
        assert!((g.gx.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((g.gx.get(0, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_finite_differences_with_epsilon() {
        let x = Matrix::from_rows(&[&[0.3, -1.2, 2.0], &[0.01, 0.02, -0.03]]);
        let gamma = Matrix::from_rows(&[&[1.5, -0.7, 0.9]]);
        let up = Matrix::from_rows(&[&[0.2, -0.4, 1.0], &[1.0, 0.5, -2.0]]);
        let eps = 1e-3;
        let (y, rms) = rmsnorm_forward(&x, &gamma, eps).unwrap();
        let g = rmsnorm_backward(&y, &gamma, &rms, &up, false).unwrap();
        let fd = finite_diff_grad(
            |xp| rmsnorm_forward(xp, &gamma, eps).unwrap().0.hadamard(&up).unwrap().sum(),
            &x,
            1e-6,
        );
        assert!(g.gx.max_abs_diff(&fd).unwrap() <= 1e-7 * fd.max_abs());
        let fdg = finite_diff_grad(
            |gp| rmsnorm_forward(&x, gp, eps).unwrap().0.hadamard(&up).unwrap().sum(),
            &gamma,
            1e-6,
        );
        assert!(g.ggamma.max_abs_diff(&fdg).unwrap() <= 1e-7 * fdg.max_abs());
    }

    #[test]
    fn flipped_correction_differs() {
        let x = Matrix::from_rows(&[&[1.0, 2.0]]);
        let gamma = Matrix::from_rows(&[&[1.0, 1.0]]);
        let (y, rms) = rmsnorm_forward(&x, &gamma, 0.0).unwrap();
        let up = Matrix::from_rows(&[&[1.0, 0.0]]);
        let a = rmsnorm_backward(&y, &gamma, &rms, &up, false).unwrap();
        let b = rmsnorm_backward(&y, &gamma, &rms, &up, true).unwrap();
        assert!(a.gx.max_abs_diff(&b.gx).unwrap() > 0.1);
    }

    #[test]
    fn zero_gamma_and_zero_rows_rejected() {
        let x = Matrix::from_rows(&[&[1.0, 2.0]]);
        assert!(rmsnorm_forward(&x, &Matrix::from_rows(&[&[1.0, 0.0]]), 0.0).is_err());
        assert!(rmsnorm_forward(&Matrix::zeros(1, 2), &Matrix::from_rows(&[&[1.0, 1.0]]), 0.0).is_err());
        let (y, _) = rmsnorm_forward(&Matrix::zeros(1, 2), &Matrix::from_rows(&[&[1.0, 1.0]]), 1e-6).unwrap();
        assert!(y.is_zero());
    }
}
