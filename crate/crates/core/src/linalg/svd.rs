//! One-sided (Hestenes) Jacobi SVD with QR preconditioning.
//!
//! A tall matrix is first reduced by Householder QR with column pivoting,
//! `A·P = Q·R`, and Jacobi then runs on the columns of `Rᵀ`. The pivoting
//! makes the rows of `R` graded, so small singular directions show up as
//! columns that are small in every entry rather than as cancellation inside
//! large columns. Rotations then only disturb each column relative to its own
//! size, and the relative orthogonality test below stays reachable.

use super::matrix::dot;
use super::{LinalgError, Matrix, Result};

/// Sweep cap before giving up.
pub const MAX_SWEEPS: usize = 30;
/// Pairs whose cosine is below this are treated as orthogonal.
pub const JACOBI_TOL: f64 = 1e-12;

/// Thin SVD `A = U·diag(σ)·Vᵀ` with `p = min(m, n)` columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_at(&self, tol: f64) -> usize {
        self.singular_values.iter().filter(|s| **s > tol).count()
    }

    /// `U·diag(σ)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                let v = us.get(i, j) * s;
                us.set(i, j, v);
            }
        }
        us.matmul_t(&self.v).expect("svd factors agree")
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.is_empty() {
        return Err(LinalgError::Contract("svd of an empty matrix".into()));
    }
    if a.rows() < a.cols() {
        let t = tall_svd(&a.transpose(), true)?;
        return Ok(SvdResult { u: t.v, singular_values: t.singular_values, v: t.u });
    }
    tall_svd(a, true)
}

/// Singular values only, nonincreasing.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(LinalgError::Contract("svd of an empty matrix".into()));
    }
    if a.rows() < a.cols() {
        return Ok(tall_svd(&a.transpose(), false)?.singular_values);
    }
    Ok(tall_svd(a, false)?.singular_values)
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    if a.is_zero() {
        return Ok(0.0);
    }
    Ok(singular_values(a)?[0])
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

/// Moore–Penrose pseudoinverse; singular values at or below
/// `rcond · σ_max` are treated as zero.
pub fn pinv(a: &Matrix, rcond: f64) -> Result<Matrix> {
    let s = svd(a)?;
    let cutoff = rcond * s.singular_values.first().copied().unwrap_or(0.0);
    let mut vs = s.v.clone();
    for j in 0..vs.cols() {
        let sigma = s.singular_values[j];
        let inv = if sigma > cutoff && sigma > 0.0 { 1.0 / sigma } else { 0.0 };
        for i in 0..vs.rows() {
            let v = vs.get(i, j) * inv;
            vs.set(i, j, v);
        }
    }
    vs.matmul_t(&s.u)
}

/// Householder reflector `I − 2·v·vᵀ/(vᵀv)` acting on rows `k..`.
struct Reflector {
    k: usize,
    v: Vec<f64>,
    vtv: f64,
}

impl Reflector {
    fn apply(&self, col: &mut [f64]) {
        let tail = &mut col[self.k..];
        let scale = 2.0 * dot(&self.v, tail) / self.vtv;
        for (x, v) in tail.iter_mut().zip(&self.v) {
            *x -= scale * v;
        }
    }
}

/// `A·P = Q·R` for tall `A`. Returns the reflectors making up `Q`, the
/// columns of the `n×n` upper-triangular `R`, and `perm` with
/// `(A·P)[:, j] = A[:, perm[j]]`.
fn pivoted_qr(a: &Matrix) -> (Vec<Reflector>, Vec<Vec<f64>>, Vec<usize>) {
    let n = a.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n {
        // Fresh tail norms each step; downdating loses accuracy on graded input.
        let tail_norm = |c: &Vec<f64>| dot(&c[k..], &c[k..]);
        let pivot = (k..n).max_by(|&i, &j| tail_norm(&cols[i]).total_cmp(&tail_norm(&cols[j])).then(j.cmp(&i))).expect("k < n");
        cols.swap(k, pivot);
        perm.swap(k, pivot);
        let norm = tail_norm(&cols[k]).sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = cols[k][k];
        let alpha = if x0 > 0.0 { -norm } else { norm };
        let mut v = cols[k][k..].to_vec();
        v[0] -= alpha;
        let vtv = dot(&v, &v);
        let h = Reflector { k, v, vtv };
        for col in &mut cols[k + 1..] {
            h.apply(col);
        }
        cols[k][k] = alpha;
        cols[k][k + 1..].fill(0.0);
        reflectors.push(h);
    }
    let r = cols.into_iter().map(|mut c| {
        c.truncate(n);
        c
    });
    (reflectors, r.collect(), perm)
}

fn tall_svd(a: &Matrix, want_vectors: bool) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let (reflectors, r_cols, perm) = pivoted_qr(a);
    // Columns of Rᵀ are the rows of R.
    let x = Matrix::from_fn(n, n, |i, j| r_cols[i][j]);
    let inner = jacobi(&x, want_vectors)?;
    if !want_vectors {
        return Ok(inner);
    }
    // Rᵀ = Ux·Σ·Vxᵀ, so A·P = (Q·Vx)·Σ·Uxᵀ.
    let mut ucols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut c = vec![0.0; m];
            c[..n].copy_from_slice(&inner.v.column(j));
            c
        })
        .collect();
    for h in reflectors.iter().rev() {
        for c in &mut ucols {
            h.apply(c);
        }
    }
    let u = Matrix::from_fn(m, n, |i, j| ucols[j][i]);
    let mut v = Matrix::zeros(n, n);
    for (j, &orig) in perm.iter().enumerate() {
        for c in 0..n {
            v.set(orig, c, inner.u.get(j, c));
        }
    }
    Ok(SvdResult { u, singular_values: inner.singular_values, v })
}

/// Jacobi on the columns of a square or tall matrix.
fn jacobi(a: &Matrix, want_vectors: bool) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = if want_vectors {
        (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let mut converged = n < 2;
    let mut residual = 0.0_f64;
    for _sweep in 0..MAX_SWEEPS {
        residual = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                if want_vectors {
                    rotate(&mut vcols, p, q, c, s);
                }
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if residual <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS, residual });
    }

    let sigma: Vec<f64> = norms.iter().map(|s| s.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let singular_values: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();

    if !want_vectors {
        return Ok(SvdResult { u: Matrix::zeros(0, 0), singular_values, v: Matrix::zeros(0, 0) });
    }

    let smax = singular_values.first().copied().unwrap_or(0.0);
    let floor = smax * 1e-13;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        let mut u = vec![0.0; m];
        if sigma[i] > floor {
            u = cols[i].iter().map(|v| v / sigma[i]).collect();
            // Directions with small σ are the least accurate, so clean them
            // against the larger ones already accepted.
            for _pass in 0..2 {
                for prev in &ucols {
                    let proj = dot(&u, prev);
                    for (x, o) in u.iter_mut().zip(prev) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot(&u, &u).sqrt();
            if norm > 0.5 {
                u.iter_mut().for_each(|x| *x /= norm);
            } else {
                u.fill(0.0);
                pending.push(slot);
            }
        } else {
            pending.push(slot);
        }
        ucols.push(u);
    }
    complete_basis(&mut ucols, &pending, m);

    let u = Matrix::from_fn(m, n, |i, j| ucols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    Ok(SvdResult { u, singular_values, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other
/// column. Each slot takes the standard basis vector with the largest
/// component outside the current span, which is at least `1/√m`.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut row_mass = vec![0.0; m];
    for c in cols.iter() {
        for (r, x) in row_mass.iter_mut().zip(c) {
            *r += x * x;
        }
    }
    for &slot in pending {
        let candidate = (0..m).min_by(|&a, &b| row_mass[a].total_cmp(&row_mass[b])).expect("m > 0");
        let mut e = vec![0.0; m];
        e[candidate] = 1.0;
        for _pass in 0..2 {
            for (j, other) in cols.iter().enumerate() {
                if j == slot {
                    continue;
                }
                let proj = dot(&e, other);
                for (x, o) in e.iter_mut().zip(other) {
                    *x -= proj * o;
                }
            }
        }
        let norm = dot(&e, &e).sqrt();
        assert!(norm > 0.0, "basis completion found no direction outside the span");
        e.iter_mut().for_each(|x| *x /= norm);
        for (r, x) in row_mass.iter_mut().zip(&e) {
            *r += x * x;
        }
        cols[slot] = e;
    }
}
