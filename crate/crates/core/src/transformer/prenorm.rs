//! Gradient computation strategies.
//!
//! - Pre-norm: each unit stores its normalized input `A = Norm(X)`, compressed,
//!   plus the exact per-row RMS. Backward rebuilds `F(Ã)` on a short-lived
//!   tape for the sub-layer gradients and maps `∂A` back to `∂X` with the
//!   closed-form normalization backward.
//! - Layer-wise: each layer stores its input `X`, compressed, and backward
//!   recomputes the whole layer (norms, sub-layers, residuals) from `X̃`.
//! - Full tape: the whole model on one [`Tape`], every op saving its own
//!   operands under the policy. This is ordinary autodiff without
//!   recomputation.
//!
//! The forward pass is never altered: losses and logits always come from the
//! exact activations.

use serde::{Deserialize, Serialize};

use super::model::{head_forward, sublayer_forward, BoundUnit, Model, ParamGrads, PreNormUnit};
use super::{Result, TransformerError};
use crate::autodiff::{rmsnorm_backward, rmsnorm_forward, Tape, Tensor};
use crate::compress::{compress_activation, retrieve_activation, CompressionPolicy, MemoryLedger, StoredActivation};
use crate::linalg::{Matrix, SeededRng};

/// Token features (`batch·seq_len` rows) and one label per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let (m, n) = self.x.shape();
        if n != model.config.width {
            return Err(TransformerError::Config(format!("input width {n} != model width {}", model.config.width)));
        }
        if self.seq_len == 0 || m % self.seq_len != 0 || m / self.seq_len != self.labels.len() {
            return Err(TransformerError::Config(format!(
                "{m} rows, seq_len {}, {} labels are inconsistent",
                self.seq_len,
                self.labels.len()
            )));
        }
        if !self.x.is_finite() {
            return Err(TransformerError::Domain("input contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(rename = "prenorm")]
    PreNorm,
    #[serde(rename = "layerwise")]
    LayerWise,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PreNorm => "prenorm",
            Strategy::LayerWise => "layerwise",
        }
    }
}

/// Which normalization implementation the full-tape path uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormImpl {
    Fused,
    /// Composed from primitive ops, so autodiff derives the backward.
    Unfused,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Matrix,
    pub grads: ParamGrads,
    /// Gradient with respect to the model input.
    pub input_grad: Matrix,
    pub ledger: MemoryLedger,
}

/// What a pre-norm unit keeps between forward and backward.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPreNorm {
    pub a_stored: StoredActivation,
    pub rms: Vec<f64>,
}

impl StoredPreNorm {
    pub fn record(&self, label: &str, ledger: &mut MemoryLedger) {
        ledger.record(&format!("{label}.norm_out"), &self.a_stored);
        ledger.record_vector(&format!("{label}.rms"), self.rms.len(), self.a_stored.precision);
    }
}

fn store_norm(label: &str, x: &Matrix, gamma: &Matrix, eps: f64, policy: &CompressionPolicy, rng: &mut SeededRng) -> Result<(Matrix, StoredPreNorm)> {
    if !x.is_finite() {
        return Err(TransformerError::Domain(format!("{label}: input contains non-finite values")));
    }
    let (a, rms) = rmsnorm_forward(x, gamma, eps)?;
    let a_stored = compress_activation(&format!("{label}.norm_out"), &a, policy, rng)?;
    Ok((a, StoredPreNorm { a_stored, rms }))
}

/// `Z = F(Norm(X)) + X`, keeping only the compressed `Norm(X)` and the RMS.
pub fn prenorm_forward(
    x: &Matrix,
    unit: &PreNormUnit,
    seq_len: usize,
    policy: &CompressionPolicy,
    rng: &mut SeededRng,
) -> Result<(Matrix, StoredPreNorm)> {
    let (a, stored) = store_norm(&unit.name, x, &unit.gamma, unit.eps, policy, rng)?;
    let mut tape = Tape::inference();
    let bound = BoundUnit::bind(&mut tape, unit, false);
    let f = sublayer_forward(&mut tape, unit, &bound, &Tensor::constant(a), seq_len)?;
    let z = f.value().add(x)?;
    Ok((z, stored))
}

/// Gradients of a pre-norm unit from its stored state. The sub-layer is
/// re-run on `Ã`; the normalization backward uses `Ã`, `γ` and the exact RMS.
pub fn prenorm_backward(
    gz: &Matrix,
    stored: &StoredPreNorm,
    unit: &PreNormUnit,
    seq_len: usize,
    train_gamma: bool,
    flip_norm_correction: bool,
) -> Result<(Matrix, ParamGrads)> {
    if gz.shape() != stored.a_stored.shape {
        return Err(TransformerError::Config(format!("gradient shape {:?} != stored {:?}", gz.shape(), stored.a_stored.shape)));
    }
    let a = retrieve_activation(&stored.a_stored);
    let mut tape = Tape::exact();
    let bound = BoundUnit::bind(&mut tape, unit, false);
    let a_leaf = tape.leaf(a.clone(), "norm_out");
    let f = sublayer_forward(&mut tape, unit, &bound, &a_leaf, seq_len)?;
    let grads = tape.backward_with_seed(&f, gz)?;
    let mut params = ParamGrads::new();
    bound.collect(&grads, &mut params)?;
    let ga = grads.get(&a_leaf).ok_or_else(|| TransformerError::Internal("no gradient for norm output".into()))?;
    let norm = rmsnorm_backward(&a, &unit.gamma, &stored.rms, ga, flip_norm_correction)?;
    if train_gamma {
        params.insert(format!("{}.gamma", unit.name), norm.ggamma);
    }
    Ok((norm.gx.add(gz)?, params))
}

/// Exact forward of one layer's units on an inference tape.
fn layer_value(model: &Model, layer: usize, x: &Matrix, seq_len: usize) -> Result<Matrix> {
    let mut tape = Tape::inference();
    let out = layer_on_tape(&mut tape, model, layer, &Tensor::constant(x.clone()), seq_len, NormImpl::Fused, &mut Vec::new())?;
    Ok(out.value().clone())
}

fn layer_on_tape(
    tape: &mut Tape,
    model: &Model,
    layer: usize,
    x: &Tensor,
    seq_len: usize,
    norm: NormImpl,
    bound: &mut Vec<BoundUnit>,
) -> Result<Tensor> {
    let mut x = x.clone();
    for unit in model.layers[layer].units() {
        tape.set_scope(&unit.name);
        let b = BoundUnit::bind(tape, unit, model.config.train_gamma);
        let a = match norm {
            NormImpl::Fused => tape.rmsnorm(&x, &b.gamma, unit.eps)?,
            NormImpl::Unfused => tape.rmsnorm_unfused(&x, &b.gamma, unit.eps)?,
        };
        let f = sublayer_forward(tape, unit, &b, &a, seq_len)?;
        x = tape.add(&f, &x)?;
        bound.push(b);
    }
    Ok(x)
}

struct Head {
    loss: f64,
    logits: Matrix,
}

/// Exact loss and logits from normalized final features.
fn head_value(model: &Model, a: &Matrix, batch: &Batch) -> Result<Head> {
    let mut tape = Tape::inference();
    let (logits, loss) = head_forward(&mut tape, model, &Tensor::constant(a.clone()), &batch.labels, batch.seq_len)?;
    Ok(Head { loss: loss.scalar(), logits: logits.value().clone() })
}

/// Gradient of the loss with respect to the normalized final features.
fn head_grad(model: &Model, a: &Matrix, batch: &Batch) -> Result<Matrix> {
    let mut tape = Tape::exact();
    let leaf = tape.leaf(a.clone(), "final.norm_out");
    let (_, loss) = head_forward(&mut tape, model, &leaf, &batch.labels, batch.seq_len)?;
    let grads = tape.backward(&loss)?;
    grads.get(&leaf).cloned().ok_or_else(|| TransformerError::Internal("no head gradient".into()))
}

/// Loss, parameter gradients and ledger under `strategy`.
pub fn compute_gradients(
    model: &Model,
    batch: &Batch,
    policy: &CompressionPolicy,
    strategy: Strategy,
    rng: &SeededRng,
) -> Result<StepOutput> {
    batch.validate(model)?;
    policy.validate()?;
    match strategy {
        Strategy::PreNorm => prenorm_gradients(model, batch, policy, rng),
        Strategy::LayerWise => layerwise_gradients(model, batch, policy, rng),
    }
}

fn prenorm_gradients(model: &Model, batch: &Batch, policy: &CompressionPolicy, rng: &SeededRng) -> Result<StepOutput> {
    let mut ledger = MemoryLedger::new();
    let units: Vec<&PreNormUnit> = model.units().collect();
    let mut stored = Vec::with_capacity(units.len());
    let mut x = batch.x.clone();
    for (i, unit) in units.iter().enumerate() {
        let (z, st) = prenorm_forward(&x, unit, batch.seq_len, policy, &mut rng.child_indexed("unit", i as u64))?;
        st.record(&unit.name, &mut ledger);
        stored.push(st);
        x = z;
    }
    let (a_final, st_final) = store_norm("final", &x, &model.final_gamma, model.config.eps, policy, &mut rng.child("final"))?;
    st_final.record("final", &mut ledger);
    let head = head_value(model, &a_final, batch)?;
    drop(a_final);

    let mut grads = ParamGrads::new();
    let a_tilde = retrieve_activation(&st_final.a_stored);
    let ga = head_grad(model, &a_tilde, batch)?;
    let norm = rmsnorm_backward(&a_tilde, &model.final_gamma, &st_final.rms, &ga, model.flip_norm_correction)?;
    if model.config.train_gamma {
        grads.insert("final.gamma".into(), norm.ggamma);
    }
    let mut g = norm.gx;
    for (unit, st) in units.iter().zip(&stored).rev() {
        let (gx, pg) = prenorm_backward(&g, st, unit, batch.seq_len, model.config.train_gamma, model.flip_norm_correction)?;
        grads.extend(pg);
        g = gx;
    }
    Ok(StepOutput { loss: head.loss, logits: head.logits, grads, input_grad: g, ledger })
}

fn layerwise_gradients(model: &Model, batch: &Batch, policy: &CompressionPolicy, rng: &SeededRng) -> Result<StepOutput> {
    let mut ledger = MemoryLedger::new();
    let mut stored = Vec::with_capacity(model.layers.len());
    let mut x = batch.x.clone();
    for l in 0..model.layers.len() {
        let label = format!("layer{l}.input");
        let st = compress_activation(&label, &x, policy, &mut rng.child_indexed("layer", l as u64))?;
        ledger.record(&label, &st);
        stored.push(st);
        x = layer_value(model, l, &x, batch.seq_len)?;
    }
    let st_final = compress_activation("final.input", &x, policy, &mut rng.child("final"))?;
    ledger.record("final.input", &st_final);
    let (a_final, _) = rmsnorm_forward(&x, &model.final_gamma, model.config.eps)?;
    let head = head_value(model, &a_final, batch)?;

    let mut grads = ParamGrads::new();
    let mut tape = Tape::exact();
    let x_leaf = tape.leaf(retrieve_activation(&st_final), "final.input");
    let gamma = if model.config.train_gamma {
        tape.leaf(model.final_gamma.clone(), "final.gamma")
    } else {
        Tensor::constant(model.final_gamma.clone())
    };
    let a = tape.rmsnorm(&x_leaf, &gamma, model.config.eps)?;
    let (_, loss) = head_forward(&mut tape, model, &a, &batch.labels, batch.seq_len)?;
    let gm = tape.backward(&loss)?;
    if let Some(gg) = gm.get(&gamma) {
        grads.insert("final.gamma".into(), gg.clone());
    }
    let mut g = gm.get(&x_leaf).cloned().ok_or_else(|| TransformerError::Internal("no final input gradient".into()))?;

    for l in (0..model.layers.len()).rev() {
        let mut tape = Tape::exact();
        let x_leaf = tape.leaf(retrieve_activation(&stored[l]), "input");
        let mut bound = Vec::new();
        let out = layer_on_tape(&mut tape, model, l, &x_leaf, batch.seq_len, NormImpl::Fused, &mut bound)?;
        let gm = tape.backward_with_seed(&out, &g)?;
        for b in &bound {
            b.collect(&gm, &mut grads)?;
        }
        g = gm.get(&x_leaf).cloned().ok_or_else(|| TransformerError::Internal("no layer input gradient".into()))?;
    }
    Ok(StepOutput { loss: head.loss, logits: head.logits, grads, input_grad: g, ledger })
}

/// The whole model on one tape, each op saving its operands under `policy`.
pub fn full_tape_gradients(
    model: &Model,
    batch: &Batch,
    policy: &CompressionPolicy,
    norm: NormImpl,
    rng: &SeededRng,
) -> Result<StepOutput> {
    batch.validate(model)?;
    let mut tape = Tape::new(*policy, rng.child("tape"));
    let input = tape.leaf(batch.x.clone(), "input");
    let mut x = input.clone();
    let mut bound = Vec::new();
    for l in 0..model.layers.len() {
        x = layer_on_tape(&mut tape, model, l, &x, batch.seq_len, norm, &mut bound)?;
    }
    tape.set_scope("final");
    let gamma = if model.config.train_gamma {
        tape.leaf(model.final_gamma.clone(), "gamma")
    } else {
        Tensor::constant(model.final_gamma.clone())
    };
    let a = match norm {
        NormImpl::Fused => tape.rmsnorm(&x, &gamma, model.config.eps)?,
        NormImpl::Unfused => tape.rmsnorm_unfused(&x, &gamma, model.config.eps)?,
    };
    let (logits, loss) = head_forward(&mut tape, model, &a, &batch.labels, batch.seq_len)?;
    let gm = tape.backward(&loss)?;
    let mut grads = ParamGrads::new();
    for b in &bound {
        b.collect(&gm, &mut grads)?;
    }
    if let Some(gg) = gm.get(&gamma) {
        grads.insert("final.gamma".into(), gg.clone());
    }
    let input_grad = gm.get(&input).cloned().unwrap_or_else(|| Matrix::zeros(batch.x.rows(), batch.x.cols()));
    Ok(StepOutput { loss: loss.scalar(), logits: logits.value().clone(), grads, input_grad, ledger: tape.into_ledger() })
}

/// `‖g − reference‖_F / ‖reference‖_F` over all shared parameters.
pub fn grad_error(g: &ParamGrads, reference: &ParamGrads) -> Result<f64> {
    if g.len() != reference.len() || g.keys().zip(reference.keys()).any(|(a, b)| a != b) {
        return Err(TransformerError::Internal("gradient sets differ".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in g.values().zip(reference.values()) {
        num += a.sub(b)?.frobenius_norm().powi(2);
        den += b.frobenius_norm().powi(2);
    }
    Ok(num.sqrt() / (den.sqrt() + 1e-300))
}

/// Largest per-parameter `max|g − ref| / (max|ref| + 1e-12)`.
pub fn grad_max_rel(g: &ParamGrads, reference: &ParamGrads) -> Result<f64> {
    if g.len() != reference.len() || g.keys().zip(reference.keys()).any(|(a, b)| a != b) {
        return Err(TransformerError::Internal("gradient sets differ".into()));
    }
    let mut worst: f64 = 0.0;
    for (a, b) in g.values().zip(reference.values()) {
        worst = worst.max(a.max_abs_diff(b)? / (b.max_abs() + 1e-12));
    }
    Ok(worst)
}

/// Relative disagreement between [`prenorm_backward`] on one unit and
/// autodiff through the composed normalization, sub-layer and residual.
///
/// Returns the worst of the input-gradient error `max|Δ| / max|ref|` and the
/// per-parameter errors of [`grad_max_rel`], with `γ` included.
pub fn unit_backward_error(unit: &PreNormUnit, x: &Matrix, gz: &Matrix, seq_len: usize, flip_correction: bool) -> Result<f64> {
    let (_, stored) = store_norm(&unit.name, x, &unit.gamma, unit.eps, &CompressionPolicy::exact(), &mut SeededRng::new(0))?;
    let (gx, params) = prenorm_backward(gz, &stored, unit, seq_len, true, flip_correction)?;

    let mut tape = Tape::exact();
    let bound = BoundUnit::bind(&mut tape, unit, true);
    let xl = tape.leaf(x.clone(), "x");
    let a = tape.rmsnorm_unfused(&xl, &bound.gamma, unit.eps)?;
    let f = sublayer_forward(&mut tape, unit, &bound, &a, seq_len)?;
    let z = tape.add(&f, &xl)?;
    let g = tape.backward_with_seed(&z, gz)?;
    let mut reference = ParamGrads::new();
    bound.collect(&g, &mut reference)?;
    let gx_ref = g.get(&xl).ok_or_else(|| TransformerError::Internal("missing input gradient".into()))?;

    let input_err = gx.max_abs_diff(gx_ref)? / (gx_ref.max_abs() + 1e-12);
    Ok(input_err.max(grad_max_rel(&params, &reference)?))
}
