//! Synthetic teacher–student task, optimizers and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{build_model, pooling_matrix, sublayer_forward, BoundUnit, Model, ModelConfig, ParamGrads};
use super::prenorm::{compute_gradients, grad_error, Batch, Strategy};
use super::{Result, TransformerError};
use crate::autodiff::{rmsnorm_forward, Tape, Tensor};
use crate::compress::{CompressionPolicy, MemoryLedger};
use crate::linalg::{gaussian_matrix, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Sequences per batch.
    pub batch: usize,
    pub seq_len: usize,
    /// Rank of the clean part of each input.
    pub input_rank: usize,
    /// Standard deviation of the dense noise added to the inputs.
    pub noise: f64,
    /// Scale of the adapter deltas separating teacher from student.
    pub teacher_shift: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { batch: 16, seq_len: 16, input_rank: 4, noise: 0.1, teacher_shift: 1.0 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 || self.input_rank == 0 {
            return Err(TransformerError::Config("batch, seq_len and input_rank must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.teacher_shift >= 0.0) {
            return Err(TransformerError::Config("noise and teacher_shift must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Exact forward pass: logits, one row per sequence.
pub fn forward_logits(model: &Model, x: &Matrix, seq_len: usize) -> Result<Matrix> {
    let mut tape = Tape::inference();
    let mut h = x.clone();
    for unit in model.units() {
        let (a, _) = rmsnorm_forward(&h, &unit.gamma, unit.eps)?;
        let bound = BoundUnit::bind(&mut tape, unit, false);
        let f = sublayer_forward(&mut tape, unit, &bound, &Tensor::constant(a), seq_len)?;
        h = f.value().add(&h)?;
    }
    let (a, _) = rmsnorm_forward(&h, &model.final_gamma, model.config.eps)?;
    let pooled = pooling_matrix(a.rows(), seq_len).matmul(&a)?;
    Ok(pooled.matmul(&model.head)?)
}

/// Exact loss of `model` on `batch`.
pub fn evaluate_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let logits = forward_logits(model, &batch.x, batch.seq_len)?;
    let loss = Tape::inference().cross_entropy(&Tensor::constant(logits), &batch.labels)?;
    Ok(loss.scalar())
}

/// The student's adapters with random `up` factors of scale `shift`.
pub fn teacher_from(student: &Model, shift: f64, rng: &mut SeededRng) -> Model {
    let mut teacher = student.clone();
    let rank = teacher.config.lora_rank as f64;
    for (name, p) in teacher.params_mut() {
        if name.ends_with(".up") {
            *p = gaussian_matrix(rng, p.rows(), p.cols()).scale(shift / rank.sqrt());
        }
    }
    teacher
}

/// Low-rank-plus-noise inputs labelled by a teacher model.
pub fn build_task(student: &Model, cfg: &TaskConfig, rng: &mut SeededRng) -> Result<(Batch, Model)> {
    cfg.validate()?;
    let d = student.config.width;
    let m = cfg.rows();
    let mut r = rng.child("inputs");
    let clean = gaussian_matrix(&mut r, m, cfg.input_rank)
        .matmul(&gaussian_matrix(&mut r, cfg.input_rank, d))?
        .scale(1.0 / (cfg.input_rank as f64).sqrt());
    let x = clean.add(&gaussian_matrix(&mut r, m, d).scale(cfg.noise))?;
    let teacher = teacher_from(student, cfg.teacher_shift, &mut rng.child("teacher"));
    // Centering each class column keeps the labels from collapsing onto one class.
    let logits = forward_logits(&teacher, &x, cfg.seq_len)?;
    let means: Vec<f64> = (0..logits.cols()).map(|j| logits.column(j).iter().sum::<f64>() / logits.rows() as f64).collect();
    let logits = Matrix::from_fn(logits.rows(), logits.cols(), |i, j| logits.get(i, j) - means[j]);
    let labels = (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    Ok((Batch { x, labels, seq_len: cfg.seq_len }, teacher))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Optimizer {
    config: OptimizerConfig,
    t: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, t: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Applies one update to every trainable parameter with a gradient.
    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads) -> Result<()> {
        self.t += 1;
        let c = self.config;
        for (name, p) in model.params_mut() {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(TransformerError::Internal(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *w -= c.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let v = self.second.entry(name).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    for (((w, gi), mi), vi) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        *w -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One optimization step. Returns the pre-update loss and the step's ledger.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    policy: &CompressionPolicy,
    strategy: Strategy,
    optimizer: &mut Optimizer,
    rng: &SeededRng,
) -> Result<(f64, MemoryLedger)> {
    let out = compute_gradients(model, batch, policy, strategy, rng)?;
    optimizer.step(model, &out.grads)?;
    Ok((out.loss, out.ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub policy: CompressionPolicy,
    pub strategy: Strategy,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    /// Also compute exact gradients each step and report the relative error.
    pub track_grad_error: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            policy: CompressionPolicy::default(),
            strategy: Strategy::PreNorm,
            optimizer: OptimizerConfig::default(),
            steps: 300,
            seed: 0,
            track_grad_error: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Relative gradient error against exact storage, when tracked.
    pub grad_errors: Vec<f64>,
    pub final_loss: f64,
    pub ledger: MemoryLedger,
    pub model: Model,
    pub initial_model: Model,
}

pub fn train_loop(cfg: &TrainConfig) -> Result<TrainReport> {
    let root = SeededRng::new(cfg.seed);
    let mut model = build_model(&cfg.model, &mut root.child("model"))?;
    let (batch, _) = build_task(&model, &cfg.task, &mut root.child("task"))?;
    let initial_model = model.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let exact = CompressionPolicy::exact();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_errors = Vec::new();
    let mut ledger = MemoryLedger::new();
    for step in 0..cfg.steps {
        let rng = root.child_indexed("step", step as u64);
        // The batch was validated at step 0, so a later domain error means the
        // updated parameters blew up the hidden states.
        let out = match compute_gradients(&model, &batch, &cfg.policy, cfg.strategy, &rng) {
            Err(TransformerError::Domain(_)) if step > 0 => {
                return Err(TransformerError::Diverged { step, loss: f64::NAN });
            }
            other => other?,
        };
        if !out.loss.is_finite() || out.grads.values().any(|g| !g.is_finite()) {
            return Err(TransformerError::Diverged { step, loss: out.loss });
        }
        if cfg.track_grad_error {
            let reference = compute_gradients(&model, &batch, &exact, cfg.strategy, &rng)?;
            grad_errors.push(grad_error(&out.grads, &reference.grads)?);
        }
        optimizer.step(&mut model, &out.grads)?;
        losses.push(out.loss);
        if model.params().iter().any(|(_, p)| !p.is_finite()) {
            return Err(TransformerError::Diverged { step, loss: out.loss });
        }
        ledger = out.ledger;
    }
    let final_loss = evaluate_loss(&model, &batch)?;
    if !final_loss.is_finite() {
        return Err(TransformerError::Diverged { step: cfg.steps, loss: final_loss });
    }
    Ok(TrainReport { losses, grad_errors, final_loss, ledger, model, initial_model })
}

/// Means of consecutive windows of `width` losses; a trailing partial window
/// is dropped.
pub fn window_means(losses: &[f64], width: usize) -> Vec<f64> {
    losses.chunks_exact(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
}

