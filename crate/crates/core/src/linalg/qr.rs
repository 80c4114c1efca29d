//! Thin Householder QR with seeded basis completion.

use super::{LinalgError, Matrix, Result, SeededRng};

/// Relative threshold on `|R_jj| / ‖A‖_F` below which a column counts as
/// numerically dependent.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Thin QR of an m×k matrix with m ≥ k: `Q` is m×k with orthonormal
/// columns, `R` is k×k upper triangular and `QR ≈ A`.
///
/// When a column's residual is numerically zero the Householder reflector
/// is built from a seeded random direction instead, so `Q` still has `k`
/// orthonormal columns. The new column is orthogonal to all earlier ones by
/// construction and the matching diagonal entry of `R` is set to zero.
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, k) = a.shape();
    if k == 0 || m < k {
        return Err(LinalgError::Contract(format!("householder_qr needs m >= k >= 1, got {m}x{k}")));
    }
    let tol = QR_RANK_TOL * a.frobenius_norm();
    let completion = SeededRng::new(0x5152_4f52_u64 ^ ((m as u64) << 32) ^ k as u64);

    // Column-major working copy.
    let mut work: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut diag = vec![0.0; k];

    for j in 0..k {
        let x = &work[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let deficient = norm <= tol;
        let mut v: Vec<f64> = if deficient {
            let mut rng = completion.child_indexed("complete", j as u64);
            let z: Vec<f64> = (0..m - j).map(|_| rng.normal()).collect();
            let zn = z.iter().map(|t| t * t).sum::<f64>().sqrt();
            z.into_iter().map(|t| t / zn).collect()
        } else {
            x.to_vec()
        };
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        let alpha = if v[0] >= 0.0 { -vnorm } else { vnorm };
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        if vv > 0.0 {
            for col in work.iter_mut().skip(j) {
                apply_reflector(&v, vv, &mut col[j..]);
            }
        }
        diag[j] = if deficient { 0.0 } else { alpha };
        reflectors.push(if vv > 0.0 { v } else { Vec::new() });
    }

    let mut r = Matrix::zeros(k, k);
    for (c, col) in work.iter().enumerate() {
        for i in 0..c {
            r.set(i, c, col[i]);
        }
        r.set(c, c, diag[c]);
    }

    let mut q_cols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for j in (0..k).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        let vv: f64 = v.iter().map(|t| t * t).sum();
        for col in q_cols.iter_mut() {
            apply_reflector(v, vv, &mut col[j..]);
        }
    }
    let q = Matrix::from_fn(m, k, |i, j| q_cols[j][i]);
    Ok((q, r))
}

#[inline]
fn apply_reflector(v: &[f64], vv: f64, x: &mut [f64]) {
    let s = 2.0 * v.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / vv;
    if s != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= s * vi;
        }
    }
}

/// Orthonormal basis for the range of `a` (the `Q` factor only).
pub fn orthonormal_basis(a: &Matrix) -> Result<Matrix> {
    Ok(householder_qr(a)?.0)
}
