//! Model structure, initialization and the sub-layer computations.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Result, TransformerError};
use crate::autodiff::{GradMap, Tape, Tensor};
use crate::linalg::{gaussian_matrix, Matrix, SeededRng};

/// Feed-forward nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

/// Which projections carry LoRA adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterPlacement {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
    pub ffn_in: bool,
    pub ffn_out: bool,
}

impl Default for AdapterPlacement {
    fn default() -> Self {
        AdapterPlacement { q: true, k: false, v: true, o: false, ffn_in: true, ffn_out: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of layers; each layer is an attention unit then an FFN unit.
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub classes: usize,
    /// RMS stabilizer added to the mean square.
    pub eps: f64,
    pub activation: Activation,
    pub placement: AdapterPlacement,
    /// Standard deviation of the initial `up` factors. Zero makes every
    /// adapter start as a zero delta.
    pub up_init: f64,
    /// Multiplier on the `1/sqrt(width)` scale of the frozen classifier.
    pub head_scale: f64,
    /// Whether the normalization scales `γ` are trained.
    pub train_gamma: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 2,
            width: 64,
            heads: 4,
            ffn_hidden: 128,
            lora_rank: 8,
            lora_alpha: 1.0,
            classes: 4,
            eps: 1e-6,
            activation: Activation::Silu,
            placement: AdapterPlacement::default(),
            up_init: 0.0,
            head_scale: 4.0,
            train_gamma: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TransformerError::Config(msg));
        if self.depth == 0 || self.width == 0 || self.ffn_hidden == 0 || self.classes < 2 {
            return bad(format!(
                "depth, width and ffn_hidden must be positive and classes >= 2 (got {}, {}, {}, {})",
                self.depth, self.width, self.ffn_hidden, self.classes
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.lora_rank == 0 || self.lora_rank > self.width.min(self.ffn_hidden) {
            return bad(format!("lora_rank {} must lie in 1..={}", self.lora_rank, self.width.min(self.ffn_hidden)));
        }
        if !(self.eps >= 0.0) || !self.lora_alpha.is_finite() || !(self.up_init >= 0.0) || !(self.head_scale > 0.0) {
            return bad("eps, up_init must be >= 0, lora_alpha finite and head_scale > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// in × ρ
    pub down: Matrix,
    /// ρ × out
    pub up: Matrix,
    pub alpha: f64,
}

/// A frozen weight with an optional trainable adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Arc<Matrix>,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w_in: Projection,
    pub w_out: Projection,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sublayer {
    Attention(Attention),
    FeedForward(FeedForward),
}

/// `Z = F(Norm(X)) + X`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreNormUnit {
    pub name: String,
    /// 1 × n scale.
    pub gamma: Matrix,
    pub eps: f64,
    pub sublayer: Sublayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn: PreNormUnit,
    pub ffn: PreNormUnit,
}

impl Layer {
    pub fn units(&self) -> [&PreNormUnit; 2] {
        [&self.attn, &self.ffn]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub final_gamma: Matrix,
    /// Frozen classifier, width × classes.
    pub head: Arc<Matrix>,
    /// Negates the mean-correction term of the normalization backward.
    /// A deliberately wrong model for harness self-tests.
    #[doc(hidden)]
    pub flip_norm_correction: bool,
}

/// Parameter gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Matrix>;

fn frozen(rng: &mut SeededRng, rows: usize, cols: usize) -> Arc<Matrix> {
    Arc::new(gaussian_matrix(rng, rows, cols).scale(1.0 / (rows as f64).sqrt()))
}

fn projection(rng: &mut SeededRng, cfg: &ModelConfig, rows: usize, cols: usize, adapted: bool) -> Projection {
    let weight = frozen(rng, rows, cols);
    let adapter = adapted.then(|| LoraAdapter {
        down: gaussian_matrix(rng, rows, cfg.lora_rank).scale(1.0 / (rows as f64).sqrt()),
        up: gaussian_matrix(rng, cfg.lora_rank, cols).scale(cfg.up_init),
        alpha: cfg.lora_alpha,
    });
    Projection { weight, adapter }
}

fn unit(name: String, width: usize, eps: f64, sublayer: Sublayer) -> PreNormUnit {
    PreNormUnit { name, gamma: Matrix::from_fn(1, width, |_, _| 1.0), eps, sublayer }
}

/// Builds a model with frozen weights drawn from `rng`.
pub fn build_model(config: &ModelConfig, rng: &mut SeededRng) -> Result<Model> {
    config.validate()?;
    let (d, h, p) = (config.width, config.ffn_hidden, &config.placement);
    let mut layers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let mut r = rng.child_indexed("layer", l as u64);
        let attn = Attention {
            q: projection(&mut r, config, d, d, p.q),
            k: projection(&mut r, config, d, d, p.k),
            v: projection(&mut r, config, d, d, p.v),
            o: projection(&mut r, config, d, d, p.o),
            heads: config.heads,
        };
        let ffn = FeedForward {
            w_in: projection(&mut r, config, d, h, p.ffn_in),
            w_out: projection(&mut r, config, h, d, p.ffn_out),
            activation: config.activation,
        };
        layers.push(Layer {
            attn: unit(format!("layer{l}.attn"), d, config.eps, Sublayer::Attention(attn)),
            ffn: unit(format!("layer{l}.ffn"), d, config.eps, Sublayer::FeedForward(ffn)),
        });
    }
    let mut r = rng.child("head");
    let head = Arc::new(gaussian_matrix(&mut r, d, config.classes).scale(config.head_scale / (d as f64).sqrt()));
    Ok(Model {
        config: config.clone(),
        layers,
        final_gamma: Matrix::from_fn(1, d, |_, _| 1.0),
        head,
        flip_norm_correction: false,
    })
}

impl Sublayer {
    fn projections(&self) -> Vec<(&'static str, &Projection)> {
        match self {
            Sublayer::Attention(a) => vec![("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)],
            Sublayer::FeedForward(f) => vec![("ffn_in", &f.w_in), ("ffn_out", &f.w_out)],
        }
    }

    fn projections_mut(&mut self) -> Vec<(&'static str, &mut Projection)> {
        match self {
            Sublayer::Attention(a) => vec![("q", &mut a.q), ("k", &mut a.k), ("v", &mut a.v), ("o", &mut a.o)],
            Sublayer::FeedForward(f) => vec![("ffn_in", &mut f.w_in), ("ffn_out", &mut f.w_out)],
        }
    }
}

impl PreNormUnit {
    /// Trainable matrices of this unit with their full names.
    pub fn params(&self, train_gamma: bool) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (slot, p) in self.sublayer.projections() {
            if let Some(a) = &p.adapter {
                out.push((format!("{}.{slot}.down", self.name), &a.down));
                out.push((format!("{}.{slot}.up", self.name), &a.up));
            }
        }
        if train_gamma {
            out.push((format!("{}.gamma", self.name), &self.gamma));
        }
        out
    }

    pub fn params_mut(&mut self, train_gamma: bool) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        let name = self.name.clone();
        for (slot, p) in self.sublayer.projections_mut() {
            if let Some(a) = &mut p.adapter {
                out.push((format!("{name}.{slot}.down"), &mut a.down));
                out.push((format!("{name}.{slot}.up"), &mut a.up));
            }
        }
        if train_gamma {
            out.push((format!("{name}.gamma"), &mut self.gamma));
        }
        out
    }

    /// Frozen weights, for invariance checks.
    pub fn frozen_weights(&self) -> Vec<&Arc<Matrix>> {
        self.sublayer.projections().into_iter().map(|(_, p)| &p.weight).collect()
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

impl Model {
    pub fn units(&self) -> impl Iterator<Item = &PreNormUnit> {
        self.layers.iter().flat_map(|l| l.units())
    }

    /// Every trainable matrix, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let tg = self.config.train_gamma;
        let mut out: Vec<(String, &Matrix)> = self.units().flat_map(|u| u.params(tg)).collect();
        if tg {
            out.push(("final.gamma".into(), &self.final_gamma));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let tg = self.config.train_gamma;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.attn.params_mut(tg));
            out.extend(layer.ffn.params_mut(tg));
        }
        if tg {
            out.push(("final.gamma".into(), &mut self.final_gamma));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }
}

/// The trainable tensors of one unit bound to a tape.
pub(crate) struct BoundUnit {
    adapters: BTreeMap<&'static str, (Tensor, Tensor)>,
    pub(crate) gamma: Tensor,
    names: Vec<(String, Tensor)>,
}

impl BoundUnit {
    /// Creates leaves for the unit's adapters (and `γ` when trained). On an
    /// inference tape they are constants.
    pub(crate) fn bind(tape: &mut Tape, unit: &PreNormUnit, train_gamma: bool) -> BoundUnit {
        let mut adapters = BTreeMap::new();
        let mut names = Vec::new();
        for (slot, p) in unit.sublayer.projections() {
            if let Some(a) = &p.adapter {
                let dn = format!("{}.{slot}.down", unit.name);
                let un = format!("{}.{slot}.up", unit.name);
                let down = tape.leaf(a.down.clone(), &dn);
                let up = tape.leaf(a.up.clone(), &un);
                names.push((dn, down.clone()));
                names.push((un, up.clone()));
                adapters.insert(slot, (down, up));
            }
        }
        let gamma = if train_gamma {
            let gn = format!("{}.gamma", unit.name);
            let g = tape.leaf(unit.gamma.clone(), &gn);
            names.push((gn, g.clone()));
            g
        } else {
            Tensor::constant(unit.gamma.clone())
        };
        BoundUnit { adapters, gamma, names }
    }

    /// Copies this unit's parameter gradients out of `grads`.
    pub(crate) fn collect(&self, grads: &GradMap, into: &mut ParamGrads) -> Result<()> {
        for (name, t) in &self.names {
            let g = grads
                .get(t)
                .ok_or_else(|| TransformerError::Internal(format!("no gradient for {name}")))?;
            into.insert(name.clone(), g.clone());
        }
        Ok(())
    }
}

fn project(tape: &mut Tape, x: &Tensor, p: &Projection, bound: Option<&(Tensor, Tensor)>) -> Result<Tensor> {
    Ok(match (&p.adapter, bound) {
        (Some(a), Some((down, up))) => tape.lora_linear(x, &p.weight, down, up, a.alpha)?,
        _ => tape.linear_frozen(x, &p.weight)?,
    })
}

/// `F(a)` for the unit's sub-layer. Rows are grouped into sequences of
/// `seq_len` consecutive tokens; attention never crosses a sequence.
pub(crate) fn sublayer_forward(
    tape: &mut Tape,
    unit: &PreNormUnit,
    bound: &BoundUnit,
    a: &Tensor,
    seq_len: usize,
) -> Result<Tensor> {
    let m = a.shape().0;
    if seq_len == 0 || !m.is_multiple_of(seq_len) {
        return Err(TransformerError::Config(format!("{m} rows do not split into sequences of {seq_len}")));
    }
    match &unit.sublayer {
        Sublayer::FeedForward(f) => {
            let h = project(tape, a, &f.w_in, bound.adapters.get("ffn_in"))?;
            let h = match f.activation {
                Activation::Silu => tape.silu(&h)?,
                Activation::Gelu => tape.gelu(&h)?,
            };
            project(tape, &h, &f.w_out, bound.adapters.get("ffn_out"))
        }
        Sublayer::Attention(att) => {
            let q = project(tape, a, &att.q, bound.adapters.get("q"))?;
            let k = project(tape, a, &att.k, bound.adapters.get("k"))?;
            let v = project(tape, a, &att.v, bound.adapters.get("v"))?;
            let d = q.shape().1;
            let dh = d / att.heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut sequences = Vec::with_capacity(m / seq_len);
            for s in 0..m / seq_len {
                let (r0, r1) = (s * seq_len, (s + 1) * seq_len);
                let (qs, ks, vs) = (tape.slice_rows(&q, r0, r1)?, tape.slice_rows(&k, r0, r1)?, tape.slice_rows(&v, r0, r1)?);
                let mut heads = Vec::with_capacity(att.heads);
                for h in 0..att.heads {
                    let (c0, c1) = (h * dh, (h + 1) * dh);
                    let qh = tape.slice_cols(&qs, c0, c1)?;
                    let kh = tape.slice_cols(&ks, c0, c1)?;
                    let vh = tape.slice_cols(&vs, c0, c1)?;
                    let scores = tape.matmul_nt(&qh, &kh)?;
                    let scores = tape.scale(&scores, scale)?;
                    let p = tape.softmax_rows(&scores)?;
                    heads.push(tape.matmul(&p, &vh)?);
                }
                sequences.push(tape.concat_cols(&heads)?);
            }
            let o = tape.concat_rows(&sequences)?;
            project(tape, &o, &att.o, bound.adapters.get("o"))
        }
    }
}

/// Mean over the tokens of each sequence: batch × m.
pub fn pooling_matrix(rows: usize, seq_len: usize) -> Matrix {
    let inv = 1.0 / seq_len as f64;
    Matrix::from_fn(rows / seq_len, rows, |b, i| if i / seq_len == b { inv } else { 0.0 })
}

/// Logits and loss of the classifier applied to normalized features.
pub(crate) fn head_forward(tape: &mut Tape, model: &Model, a: &Tensor, labels: &[usize], seq_len: usize) -> Result<(Tensor, Tensor)> {
    let pool = Tensor::constant(pooling_matrix(a.shape().0, seq_len));
    let pooled = tape.matmul(&pool, a)?;
    let logits = tape.linear_frozen(&pooled, &model.head)?;
    let loss = tape.cross_entropy(&logits, labels)?;
    Ok((logits, loss))
}
