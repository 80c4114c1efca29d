//! A small reverse-mode tape whose saved activations go through a
//! [`CompressionPolicy`].
//!
//! Forward values live in [`Tensor`]s owned by the caller. The tape keeps
//! only what each op's vector–Jacobian product needs, and every saved
//! activation is stored once per producing node through
//! [`compress_activation`]. Backward evaluates each VJP at the retrieved
//! (possibly reconstructed) activation, reconstructing each stored matrix at
//! most once per pass.
//!
//! Tensors without a node are constants: frozen weights, targets, pooling
//! matrices. They are referenced by the ops that need them and never enter
//! the memory ledger.

mod check;
mod norm;
mod ops;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::{compress_activation, retrieve_activation, CompressError, CompressionPolicy, MemoryLedger, StoredActivation};
use crate::linalg::{LinalgError, Matrix, SeededRng};

pub use check::{
    finite_diff_grad, grad_compare, gradient_check, op_suite, relative_frobenius, GradReport, OpCheck, OP_STEP, OP_TOLERANCE,
};
pub use norm::{rms_rows, rmsnorm_backward, rmsnorm_forward, NormGrads};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// A forward value, tracked by the tape when it has a node.
#[derive(Debug, Clone)]
pub struct Tensor {
    value: Arc<Matrix>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn constant(value: Matrix) -> Self {
        Tensor { value: Arc::new(value), node: None }
    }

    pub fn shared(value: Arc<Matrix>) -> Self {
        Tensor { value, node: None }
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn value_arc(&self) -> &Arc<Matrix> {
        &self.value
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// The single entry of a 1×1 tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.value.get(0, 0)
    }
}

/// A reference to something an op keeps for backward.
#[derive(Debug, Clone)]
enum Saved {
    /// Index into the tape's activation store.
    Activation(usize),
    /// Kept exactly and outside the ledger: constants and adapter factors.
    Param(Arc<Matrix>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Option<NodeId>, b: Option<NodeId>, saved_a: Option<Saved>, saved_b: Option<Saved> },
    MatmulNt { a: Option<NodeId>, b: Option<NodeId>, saved_a: Option<Saved>, saved_b: Option<Saved> },
    Add { a: Option<NodeId>, b: Option<NodeId> },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Mul { a: Option<NodeId>, b: Option<NodeId>, saved_a: Option<Saved>, saved_b: Option<Saved> },
    MulCols { a: Option<NodeId>, v: Option<NodeId>, saved_a: Option<Saved>, saved_v: Option<Saved> },
    MulRows { a: Option<NodeId>, v: Option<NodeId>, saved_a: Option<Saved>, saved_v: Option<Saved> },
    RowMean { a: NodeId, cols: usize },
    Sqrt { a: NodeId, out: Saved },
    Recip { a: NodeId, out: Saved },
    Transpose { a: NodeId },
    SliceRows { a: NodeId, start: usize, total: usize },
    SliceCols { a: NodeId, start: usize, total: usize },
    ConcatRows { parts: Vec<(Option<NodeId>, usize)> },
    ConcatCols { parts: Vec<(Option<NodeId>, usize)> },
    LinearFrozen { x: NodeId, w: Arc<Matrix> },
    LoraLinear {
        x: Option<NodeId>,
        w: Arc<Matrix>,
        down: Option<NodeId>,
        up: Option<NodeId>,
        down_val: Arc<Matrix>,
        up_val: Arc<Matrix>,
        alpha: f64,
        saved_x: Option<Saved>,
    },
    RmsNorm { x: Option<NodeId>, gamma: Option<NodeId>, gamma_val: Arc<Matrix>, out: Saved, rms: Vec<f64> },
    SoftmaxRows { a: NodeId, out: Saved },
    Silu { a: NodeId, input: Saved },
    Gelu { a: NodeId, input: Saved },
    CrossEntropy { logits: NodeId, saved: Saved, labels: Vec<usize> },
    Mse { a: NodeId, diff: Saved },
    Sum { a: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: (usize, usize),
    label: String,
}

/// Leaf gradients keyed by node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap(BTreeMap<NodeId, Matrix>);

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NodeId, g: Matrix) {
        self.0.insert(id, g);
    }

    pub fn get(&self, t: &Tensor) -> Option<&Matrix> {
        t.node.and_then(|id| self.0.get(&id))
    }

    pub fn get_node(&self, id: NodeId) -> Option<&Matrix> {
        self.0.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Matrix)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &NodeId> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `other` entrywise, inserting keys not yet present.
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        for (id, g) in &other.0 {
            match self.0.get_mut(id) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.0.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    store: Vec<StoredActivation>,
    store_index: HashMap<NodeId, usize>,
    policy: CompressionPolicy,
    rng: SeededRng,
    ledger: MemoryLedger,
    recording: bool,
    scope: String,
}

impl Tape {
    pub fn new(policy: CompressionPolicy, rng: SeededRng) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Vec::new(),
            store_index: HashMap::new(),
            policy,
            rng,
            ledger: MemoryLedger::new(),
            recording: true,
            scope: String::new(),
        }
    }

    /// A tape with exact storage.
    pub fn exact() -> Self {
        Tape::new(CompressionPolicy::exact(), SeededRng::new(0))
    }

    /// A tape that records nothing: every op returns a constant.
    pub fn inference() -> Self {
        let mut t = Tape::exact();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn policy(&self) -> &CompressionPolicy {
        &self.policy
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> MemoryLedger {
        self.ledger
    }

    /// Prefix for the labels of nodes created from now on.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    fn label(&self, op: &str) -> String {
        if self.scope.is_empty() {
            op.to_string()
        } else {
            format!("{}/{op}", self.scope)
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn stored(&self) -> &[StoredActivation] {
        &self.store
    }

    /// A trainable input. On an inference tape this is a constant.
    pub fn leaf(&mut self, value: Matrix, label: &str) -> Tensor {
        self.leaf_shared(Arc::new(value), label)
    }

    pub fn leaf_shared(&mut self, value: Arc<Matrix>, label: &str) -> Tensor {
        if !self.recording {
            return Tensor::shared(value);
        }
        let shape = value.shape();
        let label = self.label(label);
        let id = self.push(Op::Leaf, shape, &label);
        Tensor { value, node: Some(id) }
    }

    fn push(&mut self, op: Op, shape: (usize, usize), label: &str) -> NodeId {
        debug_assert!(self.recording);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, label: label.to_string() });
        id
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len())
    }

    fn output(&mut self, value: Matrix, op: Op, op_name: &str) -> Tensor {
        let shape = value.shape();
        let label = self.label(op_name);
        let id = self.push(op, shape, &label);
        Tensor { value: Arc::new(value), node: Some(id) }
    }

    /// Keeps `t` for backward: constants by reference, tracked values in the
    /// activation store, once per node.
    fn save(&mut self, t: &Tensor) -> Result<Saved> {
        match t.node {
            None => Ok(Saved::Param(t.value.clone())),
            Some(id) => {
                let label = self.nodes[id.0].label.clone();
                self.save_value(id, &t.value, &label)
            }
        }
    }

    /// Stores `value` as the activation of node `id`, which may be the node
    /// about to be pushed.
    fn save_value(&mut self, id: NodeId, value: &Matrix, label: &str) -> Result<Saved> {
        if let Some(&idx) = self.store_index.get(&id) {
            return Ok(Saved::Activation(idx));
        }
        let idx = self.store.len();
        let label = format!("{label}#{}", id.0);
        let mut rng = self.rng.child_indexed("save", idx as u64);
        let stored = compress_activation(&label, value, &self.policy, &mut rng)?;
        self.ledger.record(&label, &stored);
        self.store.push(stored);
        self.store_index.insert(id, idx);
        Ok(Saved::Activation(idx))
    }

    /// Reverse sweep from a scalar output with seed 1.
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap> {
        if loss.shape() != (1, 1) {
            return Err(AutodiffError::Contract(format!("backward needs a 1x1 loss, got {:?}", loss.shape())));
        }
        self.backward_with_seed(loss, &Matrix::from_rows(&[&[1.0]]))
    }

    /// Reverse sweep from `output` with upstream gradient `seed`. Returns a
    /// gradient for every leaf, zero where no path reaches it.
    pub fn backward_with_seed(&self, output: &Tensor, seed: &Matrix) -> Result<GradMap> {
        if seed.shape() != output.shape() {
            return Err(AutodiffError::Shape { op: "backward", left: output.shape(), right: seed.shape() });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if let Some(id) = output.node {
            grads[id.0] = Some(seed.clone());
        }
        let mut cache: Vec<Option<Arc<Matrix>>> = vec![None; self.store.len()];
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if g.shape() != node.shape {
                return Err(AutodiffError::Internal(format!("gradient shape {:?} for node {idx} of shape {:?}", g.shape(), node.shape)));
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contribution) in self.vjp(&node.op, &g, &mut cache)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
        }
        let mut out = GradMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf = node.op {
                let g = grads[idx].take().unwrap_or_else(|| Matrix::zeros(node.shape.0, node.shape.1));
                out.insert(NodeId(idx), g);
            }
        }
        Ok(out)
    }

    fn fetch(&self, s: &Saved, cache: &mut [Option<Arc<Matrix>>]) -> Result<Arc<Matrix>> {
        match s {
            Saved::Param(m) => Ok(m.clone()),
            Saved::Activation(idx) => {
                let slot = cache
                    .get_mut(*idx)
                    .ok_or_else(|| AutodiffError::Internal(format!("missing saved activation {idx}")))?;
                Ok(slot.get_or_insert_with(|| Arc::new(retrieve_activation(&self.store[*idx]))).clone())
            }
        }
    }

    fn need(&self, s: &Option<Saved>, cache: &mut [Option<Arc<Matrix>>]) -> Result<Arc<Matrix>> {
        match s {
            Some(s) => self.fetch(s, cache),
            None => Err(AutodiffError::Internal("operand needed for backward was not saved".into())),
        }
    }

    fn vjp(&self, op: &Op, g: &Matrix, cache: &mut [Option<Arc<Matrix>>]) -> Result<Vec<(NodeId, Matrix)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, saved_a, saved_b } => {
                if let Some(a) = a {
                    out.push((*a, g.matmul_t(&*self.need(saved_b, cache)?)?));
                }
                if let Some(b) = b {
                    out.push((*b, self.need(saved_a, cache)?.t_matmul(g)?));
                }
            }
            Op::MatmulNt { a, b, saved_a, saved_b } => {
                if let Some(a) = a {
                    out.push((*a, g.matmul(&*self.need(saved_b, cache)?)?));
                }
                if let Some(b) = b {
                    out.push((*b, g.t_matmul(&*self.need(saved_a, cache)?)?));
                }
            }
            Op::Add { a, b } => {
                for id in [a, b].into_iter().flatten() {
                    out.push((*id, g.clone()));
                }
            }
            Op::Scale { a, c } => out.push((*a, g.scale(*c))),
            Op::AddScalar { a } => out.push((*a, g.clone())),
            Op::Mul { a, b, saved_a, saved_b } => {
                if let Some(a) = a {
                    out.push((*a, g.hadamard(&*self.need(saved_b, cache)?)?));
                }
                if let Some(b) = b {
                    out.push((*b, g.hadamard(&*self.need(saved_a, cache)?)?));
                }
            }
            Op::MulCols { a, v, saved_a, saved_v } => {
                if let Some(a) = a {
                    out.push((*a, ops::mul_cols(g, &*self.need(saved_v, cache)?)));
                }
                if let Some(v) = v {
                    out.push((*v, ops::col_sums(&g.hadamard(&*self.need(saved_a, cache)?)?)));
                }
            }
            Op::MulRows { a, v, saved_a, saved_v } => {
                if let Some(a) = a {
                    out.push((*a, ops::mul_rows(g, &*self.need(saved_v, cache)?)));
                }
                if let Some(v) = v {
                    out.push((*v, ops::row_sums(&g.hadamard(&*self.need(saved_a, cache)?)?)));
                }
            }
            Op::RowMean { a, cols } => {
                let inv = 1.0 / *cols as f64;
                out.push((*a, Matrix::from_fn(g.rows(), *cols, |i, _| g.get(i, 0) * inv)));
            }
            Op::Sqrt { a, out: y } => {
                let y = self.fetch(y, cache)?;
                out.push((*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / (2.0 * y.get(i, j)))));
            }
            Op::Recip { a, out: y } => {
                let y = self.fetch(y, cache)?;
                out.push((*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| -g.get(i, j) * y.get(i, j) * y.get(i, j))));
            }
            Op::Transpose { a } => out.push((*a, g.transpose())),
            Op::SliceRows { a, start, total } => {
                let mut full = Matrix::zeros(*total, g.cols());
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                out.push((*a, full));
            }
            Op::SliceCols { a, start, total } => {
                let mut full = Matrix::zeros(g.rows(), *total);
                for i in 0..g.rows() {
                    full.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                out.push((*a, full));
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for (id, rows) in parts {
                    if let Some(id) = id {
                        out.push((*id, g.row_range(offset, offset + rows)));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for (id, cols) in parts {
                    if let Some(id) = id {
                        out.push((*id, g.columns(offset, offset + cols)));
                    }
                    offset += cols;
                }
            }
            Op::LinearFrozen { x, w } => out.push((*x, g.matmul_t(w)?)),
            Op::LoraLinear { x, w, down, up, down_val, up_val, alpha, saved_x } => {
                let g_up_t = g.matmul_t(up_val)?; // g·Bᵀ, m×ρ
                if let Some(x) = x {
                    let mut gx = g.matmul_t(w)?;
                    gx.add_assign(&g_up_t.matmul_t(down_val)?.scale(*alpha))?;
                    out.push((*x, gx));
                }
                if down.is_some() || up.is_some() {
                    let xv = self.need(saved_x, cache)?;
                    if let Some(down) = down {
                        out.push((*down, xv.t_matmul(&g_up_t)?.scale(*alpha)));
                    }
                    if let Some(up) = up {
                        let h = xv.matmul(down_val)?;
                        out.push((*up, h.t_matmul(g)?.scale(*alpha)));
                    }
                }
            }
            Op::RmsNorm { x, gamma, gamma_val, out: y, rms } => {
                let y = self.fetch(y, cache)?;
                let grads = rmsnorm_backward(&y, gamma_val, rms, g, false)?;
                if let Some(x) = x {
                    out.push((*x, grads.gx));
                }
                if let Some(gamma) = gamma {
                    out.push((*gamma, grads.ggamma));
                }
            }
            Op::SoftmaxRows { a, out: y } => {
                let y = self.fetch(y, cache)?;
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let s: f64 = g.row(i).iter().zip(y.row(i)).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..g.cols() {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - s));
                    }
                }
                out.push((*a, gx));
            }
            Op::Silu { a, input } => {
                let x = self.fetch(input, cache)?;
                out.push((*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * ops::silu_grad(x.get(i, j)))));
            }
            Op::Gelu { a, input } => {
                let x = self.fetch(input, cache)?;
                out.push((*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * ops::gelu_grad(x.get(i, j)))));
            }
            Op::CrossEntropy { logits, saved, labels } => {
                let z = self.fetch(saved, cache)?;
                let mut p = ops::softmax_rows_value(&z);
                let scale = g.get(0, 0) / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    let v = p.get(i, y) - 1.0;
                    p.set(i, y, v);
                }
                out.push((*logits, p.scale(scale)));
            }
            Op::Mse { a, diff } => {
                let d = self.fetch(diff, cache)?;
                out.push((*a, d.scale(2.0 * g.get(0, 0) / d.len() as f64)));
            }
            Op::Sum { a } => {
                let (m, n) = self.nodes[a.0].shape;
                out.push((*a, Matrix::from_fn(m, n, |_, _| g.get(0, 0))));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
