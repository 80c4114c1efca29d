use std::sync::Arc;

use super::*;
use crate::decompose::MethodKind;
use crate::linalg::gaussian_matrix;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(seed: u64, m: usize, n: usize) -> Matrix {
    gaussian_matrix(&mut SeededRng::new(seed), m, n)
}

fn assert_check(c: OpCheck) {
    assert!(c.max_rel_err <= TOL, "{}: relative error {:e} ({:?})", c.name, c.max_rel_err, c.per_input);
}

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_suite(1, H).unwrap();
    assert_eq!(checks.len(), 26);
    for c in checks {
        assert_check(c);
    }
}

fn composed(t: &mut Tape, x: &[Tensor]) -> Result<Tensor> {
    let gamma = Tensor::constant(Matrix::from_fn(1, x[0].shape().1, |_, j| 1.0 + 0.1 * j as f64));
    let n = t.rmsnorm(&x[0], &gamma, 1e-6)?;
    let s = t.matmul_nt(&n, &x[1])?;
    let p = t.softmax_rows(&s)?;
    let v = t.matmul(&p, &x[1])?;
    let h = t.silu(&v)?;
    let r = t.add(&h, &x[0])?;
    t.cross_entropy(&r, &[0, 1, 2, 0, 1, 2])
}

#[test]
fn composed_graph_matches_finite_differences() {
    assert_check(gradient_check("composed", composed, &[rand(11, 6, 3), rand(12, 5, 3)], H).unwrap());
}

#[test]
fn fan_out_accumulates() {
    let check = gradient_check(
        "fan_out",
        |t, x| {
            let a = t.silu(&x[0])?;
            let b = t.scale(&x[0], 3.0)?;
            let c = t.mul(&x[0], &x[0])?;
            let s = t.add(&a, &b)?;
            t.add(&s, &c)
        },
        &[rand(13, 3, 4)],
        H,
    )
    .unwrap();
    assert_check(check);
}

#[test]
fn mse_hand_derivative() {
    let mut tape = Tape::exact();
    let xv = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 5.0]]);
    let target = Matrix::from_rows(&[&[0.0, 2.0], &[1.0, 1.0]]);
    let x = tape.leaf(xv.clone(), "x");
    let loss = tape.mse(&x, &target).unwrap();
    assert_eq!(loss.scalar(), (1.0 + 0.0 + 4.0 + 16.0) / 4.0);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap(), &xv.sub(&target).unwrap().scale(0.5));
}

#[test]
fn softmax_and_silu_hand_values() {
    let mut tape = Tape::exact();
    let z = tape.leaf(Matrix::zeros(1, 2), "z");
    assert_eq!(tape.softmax_rows(&z).unwrap().value(), &Matrix::from_rows(&[&[0.5, 0.5]]));
    let s = tape.silu(&z).unwrap();
    assert!(s.value().is_zero());
    let loss = tape.sum(&s).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&z).unwrap(), &Matrix::from_rows(&[&[0.5, 0.5]]));
}

#[test]
fn zero_adapter_equals_frozen_linear() {
    let mut tape = Tape::exact();
    let x = tape.leaf(rand(14, 5, 4), "x");
    let w = Arc::new(rand(15, 4, 3));
    let down = tape.leaf(rand(16, 4, 2), "down");
    let up = tape.leaf(Matrix::zeros(2, 3), "up");
    let a = tape.lora_linear(&x, &w, &down, &up, 2.0).unwrap();
    let b = tape.linear_frozen(&x, &w).unwrap();
    assert_eq!(a.value(), b.value());
}

#[test]
fn labels_checked() {
    let mut tape = Tape::exact();
    let z = tape.leaf(Matrix::zeros(2, 3), "z");
    assert!(tape.cross_entropy(&z, &[0, 3]).is_err());
    assert!(tape.cross_entropy(&z, &[0]).is_err());
}

#[test]
fn constants_have_no_nodes() {
    let mut tape = Tape::exact();
    let a = Tensor::constant(Matrix::identity(2));
    let b = tape.matmul(&a, &a).unwrap();
    assert!(!b.requires_grad());
    assert_eq!(tape.node_count(), 0);
    let mut inf = Tape::inference();
    let x = inf.leaf(Matrix::identity(2), "x");
    assert!(!x.requires_grad());
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut tape = Tape::exact();
    let x = tape.leaf(Matrix::identity(2), "x");
    let y = tape.leaf(Matrix::identity(3), "y");
    let loss = tape.sum(&x).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&y).unwrap().is_zero());
    assert!(tape.backward(&x).is_err());
}

#[test]
fn shared_activation_saved_once() {
    let policy = CompressionPolicy::lowrank(0.25).with_method(MethodKind::Rsvd);
    let mut tape = Tape::new(policy, SeededRng::new(3));
    let x = tape.leaf(rand(17, 64, 32), "x");
    let w1 = tape.leaf(rand(18, 32, 32), "w1");
    let w2 = tape.leaf(rand(19, 32, 32), "w2");
    tape.matmul(&x, &w1).unwrap();
    tape.matmul(&x, &w2).unwrap();
    let saved_x: Vec<_> = tape.stored().iter().filter(|s| s.shape == (64, 32)).collect();
    assert_eq!(saved_x.len(), 1);
    assert_eq!(saved_x[0].rank(), Some(8));
}

fn small_net(t: &mut Tape, x: &Tensor, params: &[Tensor]) -> Result<Tensor> {
    let gamma = Tensor::constant(Matrix::from_fn(1, 24, |_, j| 0.8 + 0.02 * j as f64));
    let w = Arc::new(rand(30, 24, 24));
    let n = t.rmsnorm(x, &gamma, 1e-6)?;
    let h = t.lora_linear(&n, &w, &params[0], &params[1], 1.0)?;
    let s = t.silu(&h)?;
    let r = t.add(&s, x)?;
    let z = t.matmul(&r, &params[2])?;
    t.cross_entropy(&z, &(0..96).map(|i| i % 3).collect::<Vec<_>>())
}

fn net_grads(policy: CompressionPolicy, seed: u64) -> GradMap {
    let mut tape = Tape::new(policy, SeededRng::new(seed));
    let x = tape.leaf(rand(31, 96, 24), "x");
    let params = vec![tape.leaf(rand(32, 24, 4), "down"), tape.leaf(rand(33, 4, 24), "up"), tape.leaf(rand(34, 24, 3), "head")];
    let loss = small_net(&mut tape, &x, &params).unwrap();
    tape.backward(&loss).unwrap()
}

#[test]
fn lossless_policy_matches_exact() {
    let exact = net_grads(CompressionPolicy::exact(), 1);
    for method in [MethodKind::TruncatedSvd, MethodKind::Rsvd, MethodKind::SampledOrtho] {
        let lossless = net_grads(CompressionPolicy::lowrank(1.0).with_method(method).allowing_non_saving(), 1);
        let err = grad_compare(&lossless, &exact).unwrap().max;
        assert!(err <= 1e-6, "{method}: {err:e}");
    }
}

#[test]
fn compressed_gradients_degrade_with_ratio() {
    let exact = net_grads(CompressionPolicy::exact(), 1);
    let mut errs = Vec::new();
    for r in [0.5, 0.125] {
        let mean: f64 = (0..10)
            .map(|s| relative_frobenius(&net_grads(CompressionPolicy::lowrank(r), s), &exact).unwrap())
            .sum::<f64>()
            / 10.0;
        errs.push(mean);
    }
    assert!(errs[0] > 0.0 && errs[0] <= errs[1], "{errs:?}");
}

#[test]
fn fused_norm_matches_unfused_on_tape() {
    let xv = rand(40, 7, 5);
    let gv = Matrix::from_rows(&[&[1.0, -0.5, 2.0, 0.3, 1.1]]);
    let up = rand(41, 7, 5);
    let grads = |fused: bool| {
        let mut t = Tape::exact();
        let x = t.leaf(xv.clone(), "x");
        let g = t.leaf(gv.clone(), "gamma");
        let y = if fused { t.rmsnorm(&x, &g, 0.0) } else { t.rmsnorm_unfused(&x, &g, 0.0) }.unwrap();
        let w = t.mul(&y, &Tensor::constant(up.clone())).unwrap();
        let l = t.sum(&w).unwrap();
        t.backward(&l).unwrap()
    };
    let err = grad_compare(&grads(true), &grads(false)).unwrap().max;
    assert!(err <= 1e-12, "{err:e}");
}

#[test]
fn norm_records_rms_vector_in_ledger() {
    let mut t = Tape::new(CompressionPolicy::lowrank(0.125), SeededRng::new(0));
    let x = t.leaf(rand(42, 128, 64), "x");
    let g = Tensor::constant(Matrix::from_fn(1, 64, |_, _| 1.0));
    t.rmsnorm(&x, &g, 1e-6).unwrap();
    let entries = t.ledger().entries();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].stored_bytes, ((128 + 64) * 8 * 8) as u64);
    assert_eq!(entries[1].stored_bytes, (128 * 8) as u64);
}
