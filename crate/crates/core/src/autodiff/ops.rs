//! Forward ops. Each computes its value, and when any input is tracked,
//! saves what its backward needs and records a node.

use std::sync::Arc;

use super::{rmsnorm_forward, AutodiffError, Op, Result, Saved, Tape, Tensor};
use crate::linalg::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(super) fn mul_cols(a: &Matrix, v: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * v.get(0, j))
}

pub(super) fn mul_rows(a: &Matrix, v: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * v.get(i, 0))
}

pub(super) fn col_sums(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, a.cols());
    for i in 0..a.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    out
}

pub(super) fn row_sums(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum())
}

pub(super) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(super) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(super) fn softmax_rows_value(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

impl Tape {
    fn tracks(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    fn save_if(&mut self, cond: bool, t: &Tensor) -> Result<Option<Saved>> {
        if cond {
            self.save(t).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Saves the output of the node about to be pushed.
    fn save_own(&mut self, value: &Matrix, op_name: &str) -> Result<Saved> {
        let id = self.next_id();
        let label = self.label(op_name);
        self.save_value(id, value, &label)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let value = a.value().matmul(b.value())?;
        if !self.tracks(&[a, b]) {
            return Ok(Tensor::constant(value));
        }
        let saved_b = self.save_if(a.requires_grad(), b)?;
        let saved_a = self.save_if(b.requires_grad(), a)?;
        Ok(self.output(value, Op::Matmul { a: a.node, b: b.node, saved_a, saved_b }, "matmul"))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let value = a.value().matmul_t(b.value())?;
        if !self.tracks(&[a, b]) {
            return Ok(Tensor::constant(value));
        }
        let saved_b = self.save_if(a.requires_grad(), b)?;
        let saved_a = self.save_if(b.requires_grad(), a)?;
        Ok(self.output(value, Op::MatmulNt { a: a.node, b: b.node, saved_a, saved_b }, "matmul_nt"))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let value = a.value().add(b.value())?;
        if !self.tracks(&[a, b]) {
            return Ok(Tensor::constant(value));
        }
        Ok(self.output(value, Op::Add { a: a.node, b: b.node }, "add"))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let value = a.value().scale(c);
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::Scale { a: id, c }, "scale")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let value = a.value().map(|v| v + c);
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::AddScalar { a: id }, "add_scalar")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let value = a.value().hadamard(b.value())?;
        if !self.tracks(&[a, b]) {
            return Ok(Tensor::constant(value));
        }
        let saved_b = self.save_if(a.requires_grad(), b)?;
        let saved_a = self.save_if(b.requires_grad(), a)?;
        Ok(self.output(value, Op::Mul { a: a.node, b: b.node, saved_a, saved_b }, "mul"))
    }

    /// Scales column `j` of `a` by `v[j]`, with `v` a 1×n row.
    pub fn mul_cols(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if v.shape() != (1, a.shape().1) {
            return Err(AutodiffError::Shape { op: "mul_cols", left: a.shape(), right: v.shape() });
        }
        let value = mul_cols(a.value(), v.value());
        if !self.tracks(&[a, v]) {
            return Ok(Tensor::constant(value));
        }
        let saved_v = self.save_if(a.requires_grad(), v)?;
        let saved_a = self.save_if(v.requires_grad(), a)?;
        Ok(self.output(value, Op::MulCols { a: a.node, v: v.node, saved_a, saved_v }, "mul_cols"))
    }

    /// Scales row `i` of `a` by `v[i]`, with `v` an m×1 column.
    pub fn mul_rows(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if v.shape() != (a.shape().0, 1) {
            return Err(AutodiffError::Shape { op: "mul_rows", left: a.shape(), right: v.shape() });
        }
        let value = mul_rows(a.value(), v.value());
        if !self.tracks(&[a, v]) {
            return Ok(Tensor::constant(value));
        }
        let saved_v = self.save_if(a.requires_grad(), v)?;
        let saved_a = self.save_if(v.requires_grad(), a)?;
        Ok(self.output(value, Op::MulRows { a: a.node, v: v.node, saved_a, saved_v }, "mul_rows"))
    }

    /// Mean of each row, as an m×1 column.
    pub fn row_mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let cols = a.shape().1;
        let value = row_sums(a.value()).scale(1.0 / cols as f64);
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::RowMean { a: id, cols }, "row_mean")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.value().as_slice().iter().any(|v| *v <= 0.0) {
            return Err(AutodiffError::Domain("sqrt needs strictly positive input".into()));
        }
        let value = a.value().map(f64::sqrt);
        match a.node {
            Some(id) if self.recording => {
                let out = self.save_own(&value, "sqrt")?;
                Ok(self.output(value, Op::Sqrt { a: id, out }, "sqrt"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    pub fn recip(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.value().as_slice().contains(&0.0) {
            return Err(AutodiffError::Domain("recip of zero".into()));
        }
        let value = a.value().map(|v| 1.0 / v);
        match a.node {
            Some(id) if self.recording => {
                let out = self.save_own(&value, "recip")?;
                Ok(self.output(value, Op::Recip { a: id, out }, "recip"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = a.value().transpose();
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::Transpose { a: id }, "transpose")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let total = a.shape().0;
        if start >= end || end > total {
            return Err(AutodiffError::Contract(format!("slice_rows {start}..{end} of {total} rows")));
        }
        let value = a.value().row_range(start, end);
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::SliceRows { a: id, start, total }, "slice_rows")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let total = a.shape().1;
        if start >= end || end > total {
            return Err(AutodiffError::Contract(format!("slice_cols {start}..{end} of {total} columns")));
        }
        let value = a.value().columns(start, end);
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::SliceCols { a: id, start, total }, "slice_cols")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Matrix> = parts.iter().map(|t| t.value()).collect();
        let value = Matrix::vstack(&refs)?;
        let inputs: Vec<&Tensor> = parts.iter().collect();
        if !self.tracks(&inputs) {
            return Ok(Tensor::constant(value));
        }
        let parts = parts.iter().map(|t| (t.node, t.shape().0)).collect();
        Ok(self.output(value, Op::ConcatRows { parts }, "concat_rows"))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Matrix> = parts.iter().map(|t| t.value()).collect();
        let value = Matrix::hstack(&refs)?;
        let inputs: Vec<&Tensor> = parts.iter().collect();
        if !self.tracks(&inputs) {
            return Ok(Tensor::constant(value));
        }
        let parts = parts.iter().map(|t| (t.node, t.shape().1)).collect();
        Ok(self.output(value, Op::ConcatCols { parts }, "concat_cols"))
    }

    /// `x · W` with `W` frozen. Nothing is saved: the input gradient needs
    /// only `W`, and `W` gets no gradient.
    pub fn linear_frozen(&mut self, x: &Tensor, w: &Arc<Matrix>) -> Result<Tensor> {
        let value = x.value().matmul(w)?;
        match x.node {
            Some(id) if self.recording => Ok(self.output(value, Op::LinearFrozen { x: id, w: w.clone() }, "linear_frozen")),
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// `x·W + α·(x·down)·up` with `W` frozen. The input is saved under the
    /// policy; the adapter factors are kept exactly.
    pub fn lora_linear(&mut self, x: &Tensor, w: &Arc<Matrix>, down: &Tensor, up: &Tensor, alpha: f64) -> Result<Tensor> {
        let mut value = x.value().matmul(w)?;
        let h = x.value().matmul(down.value())?;
        value.add_assign(&h.matmul(up.value())?.scale(alpha))?;
        if !self.tracks(&[x, down, up]) {
            return Ok(Tensor::constant(value));
        }
        let saved_x = self.save_if(down.requires_grad() || up.requires_grad(), x)?;
        let op = Op::LoraLinear {
            x: x.node,
            w: w.clone(),
            down: down.node,
            up: up.node,
            down_val: down.value_arc().clone(),
            up_val: up.value_arc().clone(),
            alpha,
            saved_x,
        };
        Ok(self.output(value, op, "lora_linear"))
    }

    /// Fused RMS normalization. Saves its output under the policy and the
    /// per-row RMS exactly; backward works from those alone.
    pub fn rmsnorm(&mut self, x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
        let (value, rms) = rmsnorm_forward(x.value(), gamma.value(), eps)?;
        if !self.tracks(&[x, gamma]) {
            return Ok(Tensor::constant(value));
        }
        let out = self.save_own(&value, "rmsnorm")?;
        let label = format!("{}#{}.rms", self.label("rmsnorm"), self.next_id().0);
        self.ledger.record_vector(&label, rms.len(), self.policy.precision);
        let op = Op::RmsNorm { x: x.node, gamma: gamma.node, gamma_val: gamma.value_arc().clone(), out, rms };
        Ok(self.output(value, op, "rmsnorm"))
    }

    /// RMS normalization composed from primitive ops, so autodiff derives
    /// its backward. Used as the reference for the fused op.
    pub fn rmsnorm_unfused(&mut self, x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
        let sq = self.mul(x, x)?;
        let ms = self.row_mean(&sq)?;
        let ms = self.add_scalar(&ms, eps)?;
        let rms = self.sqrt(&ms)?;
        let inv = self.recip(&rms)?;
        let xn = self.mul_rows(x, &inv)?;
        self.mul_cols(&xn, gamma)
    }

    /// Row-wise softmax; saves its output.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = softmax_rows_value(a.value());
        match a.node {
            Some(id) if self.recording => {
                let out = self.save_own(&value, "softmax")?;
                Ok(self.output(value, Op::SoftmaxRows { a: id, out }, "softmax"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// `x·sigmoid(x)`; saves its input.
    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = a.value().map(|x| x * sigmoid(x));
        match a.node {
            Some(id) if self.recording => {
                let input = self.save(a)?;
                Ok(self.output(value, Op::Silu { a: id, input }, "silu"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Tanh-approximated GELU; saves its input.
    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = a.value().map(gelu);
        match a.node {
            Some(id) if self.recording => {
                let input = self.save(a)?;
                Ok(self.output(value, Op::Gelu { a: id, input }, "gelu"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (m, c) = logits.shape();
        if labels.len() != m {
            return Err(AutodiffError::Contract(format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= c) {
            return Err(AutodiffError::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let z = logits.value();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Matrix::from_rows(&[&[total / m as f64]]);
        match logits.node {
            Some(id) if self.recording => {
                let saved = self.save(logits)?;
                Ok(self.output(value, Op::CrossEntropy { logits: id, saved, labels: labels.to_vec() }, "cross_entropy"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Mean squared difference to a constant target; saves the difference.
    pub fn mse(&mut self, a: &Tensor, target: &Matrix) -> Result<Tensor> {
        let diff = a.value().sub(target)?;
        let value = Matrix::from_rows(&[&[diff.as_slice().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64]]);
        match a.node {
            Some(id) if self.recording => {
                let saved = self.save_own(&diff, "mse")?;
                Ok(self.output(value, Op::Mse { a: id, diff: saved }, "mse"))
            }
            _ => Ok(Tensor::constant(value)),
        }
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = Matrix::from_rows(&[&[a.value().sum()]]);
        match a.node {
            Some(id) if self.recording => Ok(self.output(value, Op::Sum { a: id }, "sum")),
            _ => Ok(Tensor::constant(value)),
        }
    }
}
