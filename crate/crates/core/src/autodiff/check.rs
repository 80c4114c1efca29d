//! Gradient verification: central differences and gradient-map comparison.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, GradMap, NodeId, Result, Tape, Tensor};
use crate::linalg::{gaussian_matrix, Matrix, SeededRng};

/// Central differences `(f(x + h·e) − f(x − h·e)) / 2h`, one entry at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        out.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Relative error `max|a − b| / (max|b| + 1e-12)`.
fn relative_max(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.max_abs_diff(b)? / (b.max_abs() + 1e-12))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub per_node: Vec<(NodeId, f64)>,
    pub max: f64,
}

/// Per-node `max|g1 − g2| / (max|g2| + 1e-12)` and the largest of these.
/// `g2` is the reference.
pub fn grad_compare(g1: &GradMap, g2: &GradMap) -> Result<GradReport> {
    if g1.len() != g2.len() || g1.keys().zip(g2.keys()).any(|(a, b)| a != b) {
        return Err(AutodiffError::Contract("gradient maps cover different nodes".into()));
    }
    let mut per_node = Vec::with_capacity(g1.len());
    for ((id, a), (_, b)) in g1.iter().zip(g2.iter()) {
        per_node.push((*id, relative_max(a, b)?));
    }
    let max = per_node.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradReport { per_node, max })
}

/// `‖g1 − g2‖_F / ‖g2‖_F` over all entries of both maps together.
pub fn relative_frobenius(g1: &GradMap, g2: &GradMap) -> Result<f64> {
    if g1.len() != g2.len() || g1.keys().zip(g2.keys()).any(|(a, b)| a != b) {
        return Err(AutodiffError::Contract("gradient maps cover different nodes".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
        let d = a.sub(b)?.frobenius_norm();
        num += d * d;
        den += b.frobenius_norm().powi(2);
    }
    Ok(num.sqrt() / (den.sqrt() + 1e-300))
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub name: String,
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` receives one tensor per input and may return any shape; a
/// non-scalar output is reduced with fixed random weights so every output
/// entry contributes. The reference values come from re-running `build` on
/// an inference tape.
pub fn gradient_check(
    name: &str,
    build: impl Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[Matrix],
    h: f64,
) -> Result<OpCheck> {
    let weights = |shape: (usize, usize)| {
        let mut rng = SeededRng::new(0xfd).child_indexed("weights", (shape.0 * 1000 + shape.1) as u64);
        gaussian_matrix(&mut rng, shape.0, shape.1)
    };
    let reduce = |tape: &mut Tape, out: Tensor| -> Result<Tensor> {
        if out.shape() == (1, 1) {
            return Ok(out);
        }
        let w = Tensor::constant(weights(out.shape()));
        let weighted = tape.mul(&out, &w)?;
        tape.sum(&weighted)
    };

    let mut tape = Tape::exact();
    let leaves: Vec<Tensor> = inputs.iter().enumerate().map(|(i, x)| tape.leaf(x.clone(), &format!("in{i}"))).collect();
    let out = build(&mut tape, &leaves)?;
    let loss = reduce(&mut tape, out)?;
    let grads = tape.backward(&loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).ok_or_else(|| AutodiffError::Internal("missing leaf gradient".into()))?;
        let mut failure = None;
        let numeric = finite_diff_grad(
            |xi| {
                let mut t = Tape::inference();
                let consts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| Tensor::constant(if j == i { xi.clone() } else { x.clone() }))
                    .collect();
                match build(&mut t, &consts).and_then(|o| reduce(&mut t, o)) {
                    Ok(l) => l.scalar(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &inputs[i],
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        per_input.push(relative_max(analytic, &numeric)?);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(OpCheck { name: name.to_string(), per_input, max_rel_err })
}

/// Finite-difference tolerance used by [`op_suite`] callers.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Default central-difference step.
pub const OP_STEP: f64 = 1e-5;

/// Checks every tape operation once on fixed seeded inputs.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<OpCheck>> {
    let root = SeededRng::new(seed);
    let rand = |label: &str, m: usize, n: usize| gaussian_matrix(&mut root.child(label), m, n);
    let a = rand("a", 4, 3);
    let b = rand("b", 3, 5);
    let c = rand("c", 4, 3);
    let row = rand("row", 1, 3);
    let col = rand("col", 4, 1);
    let w = Arc::new(rand("w", 3, 5));
    let down = rand("down", 3, 2);
    let up = rand("up", 2, 5);
    let pos = rand("pos", 3, 3).map(|v| 0.5 + v.abs());
    let gamma = row.map(|v| v + 2.0);

    Ok(vec![
        gradient_check("matmul", |t, x| t.matmul(&x[0], &x[1]), &[a.clone(), b.clone()], h)?,
        gradient_check("matmul_nt", |t, x| t.matmul_nt(&x[0], &x[1]), &[a.clone(), c.clone()], h)?,
        gradient_check("add", |t, x| t.add(&x[0], &x[1]), &[a.clone(), c.clone()], h)?,
        gradient_check("scale", |t, x| t.scale(&x[0], -1.5), std::slice::from_ref(&a), h)?,
        gradient_check("add_scalar", |t, x| t.add_scalar(&x[0], 2.0), std::slice::from_ref(&a), h)?,
        gradient_check("mul", |t, x| t.mul(&x[0], &x[1]), &[a.clone(), c.clone()], h)?,
        gradient_check("mul_cols", |t, x| t.mul_cols(&x[0], &x[1]), &[a.clone(), row.clone()], h)?,
        gradient_check("mul_rows", |t, x| t.mul_rows(&x[0], &x[1]), &[a.clone(), col.clone()], h)?,
        gradient_check("row_mean", |t, x| t.row_mean(&x[0]), std::slice::from_ref(&a), h)?,
        gradient_check("sqrt", |t, x| t.sqrt(&x[0]), std::slice::from_ref(&pos), h)?,
        gradient_check("recip", |t, x| t.recip(&x[0]), std::slice::from_ref(&pos), h)?,
        gradient_check("transpose", |t, x| t.transpose(&x[0]), std::slice::from_ref(&a), h)?,
        gradient_check("slice_rows", |t, x| t.slice_rows(&x[0], 1, 3), std::slice::from_ref(&a), h)?,
        gradient_check("slice_cols", |t, x| t.slice_cols(&x[0], 0, 2), std::slice::from_ref(&a), h)?,
        gradient_check("concat_rows", |t, x| t.concat_rows(&[x[0].clone(), x[1].clone()]), &[a.clone(), c.clone()], h)?,
        gradient_check("concat_cols", |t, x| t.concat_cols(&[x[0].clone(), x[1].clone()]), &[a.clone(), c.clone()], h)?,
        gradient_check("linear_frozen", |t, x| t.linear_frozen(&x[0], &w), std::slice::from_ref(&a), h)?,
        gradient_check("lora_linear", |t, x| t.lora_linear(&x[0], &w, &x[1], &x[2], 0.7), &[a.clone(), down, up], h)?,
        gradient_check("rmsnorm", |t, x| t.rmsnorm(&x[0], &x[1], 1e-6), &[a.clone(), gamma.clone()], h)?,
        gradient_check("rmsnorm_unfused", |t, x| t.rmsnorm_unfused(&x[0], &x[1], 1e-6), &[a.clone(), gamma], h)?,
        gradient_check("softmax_rows", |t, x| t.softmax_rows(&x[0]), std::slice::from_ref(&a), h)?,
        gradient_check("silu", |t, x| t.silu(&x[0]), std::slice::from_ref(&a), h)?,
        gradient_check("gelu", |t, x| t.gelu(&x[0]), std::slice::from_ref(&a), h)?,
        gradient_check("cross_entropy", |t, x| t.cross_entropy(&x[0], &[0, 2, 1, 2]), std::slice::from_ref(&a), h)?,
        gradient_check("mse", |t, x| t.mse(&x[0], &c), std::slice::from_ref(&a), h)?,
        gradient_check("sum", |t, x| t.sum(&x[0]), &[a], h)?,
    ])
}
