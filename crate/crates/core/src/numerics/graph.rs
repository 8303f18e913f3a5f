//! Tape-based reverse-mode differentiation.
//!
//! Operations are appended to a [`GradientContext`] in execution order, so the
//! tape is already topologically sorted and backward simply walks it in
//! reverse. Gradients are only propagated into nodes that (transitively)
//! depend on a leaf registered with `requires_grad`.

use super::activation::Nonlinearity;
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`GradientContext`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Activation(Var, Nonlinearity),
    RmsNorm { input: Var, gain: Var, eps: f64 },
    CausalSoftmax { input: Var, scale: f64 },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    PermuteCols { input: Var, index: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { input: Var, start: usize },
    Sum(Var),
    Element { input: Var, flat: usize },
    CrossEntropy { logits: Var, row: usize, target: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
///
/// A context is single-threaded; build one per worker.
#[derive(Debug, Default)]
pub struct GradientContext {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
}

/// Gradients produced by [`GradientContext::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.get(var)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for node {}", var.0)))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

fn dims_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl GradientContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`, so bound parameters
    /// can be reused for the next example.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaves.retain(|v| v.0 < len);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Register a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let var = self.push(value, Op::Leaf, true);
        self.leaves.push(var);
        var
    }

    /// Record a value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let rg = self.grad_flag(inputs);
        Ok(self.push(value, op, rg))
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(var);
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` where `b` is stored `(out × in)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        self.record(value, Op::MatMulT(a, b), &[a, b], "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dims_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dims_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(value, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Element-wise product with a constant mask of the same shape.
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != mask.shape() {
            return Err(dims_err("mul_const", ta, &mask));
        }
        let data = ta.data().iter().zip(mask.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(value, Op::MulConst(a, mask), &[a], "mul_const")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.record(value, Op::Scale(a, factor), &[a], "scale")
    }

    /// Adds a length-`cols` bias to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "add_row_bias")?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != cols {
            return Err(dims_err("add_row_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for (o, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.record(value, Op::AddRowBias(x, bias), &[x, bias], "add_row_bias")
    }

    pub fn activation(&mut self, x: Var, kind: Nonlinearity) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        self.record(value, Op::Activation(x, kind), &[x], "activation")
    }

    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "rms_norm")?;
        let (tx, tg) = (self.value(x), self.value(gain));
        if tg.len() != cols {
            return Err(dims_err("rms_norm", tx, tg));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let inv = 1.0 / rms(row, eps);
            for c in 0..cols {
                data[r * cols + c] = row[c] * inv * tg.data()[c];
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.record(
            value,
            Op::RmsNorm {
                input: x,
                gain,
                eps,
            },
            &[x, gain],
            "rms_norm",
        )
    }

    /// Softmax over `scale · x[i][..=i]` for every row `i`; entries above the
    /// diagonal are zero.
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "causal_softmax")?;
        if rows != cols {
            return Err(Error::Dimension {
                op: "causal_softmax",
                lhs: vec![rows, cols],
                rhs: vec![rows, rows],
            });
        }
        let tx = self.value(x);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &tx.row(i)[..=i];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(scale * v));
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (scale * v - max).exp();
                data[i * cols + j] = e;
                total += e;
            }
            for v in &mut data[i * cols..i * cols + i + 1] {
                *v /= total;
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.record(value, Op::CausalSoftmax { input: x, scale }, &[x], "causal_softmax")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start + width > cols {
            return Err(Error::Index(format!(
                "column slice {start}..{} exceeds width {cols}",
                start + width
            )));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + width]);
        }
        let value = Tensor::matrix(rows, width, data)?;
        self.record(value, Op::SliceCols { input: x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(dims_err("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.record(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Gather columns: `out[:, p] = x[:, index[p]]`.
    pub fn permute_cols(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "permute_cols")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::Index(format!("column {bad} not in 0..{cols}")));
        }
        let tx = self.value(x);
        let width = index.len();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let row = tx.row(r);
            data.extend(index.iter().map(|&i| row[i]));
        }
        let value = Tensor::matrix(rows, width, data)?;
        self.record(value, Op::PermuteCols { input: x, index }, &[x], "permute_cols")
    }

    /// Embedding lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} not in 0..{rows}")));
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        self.record(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_rows")?;
        if start + count > rows {
            return Err(Error::Index(format!(
                "row slice {start}..{} exceeds height {rows}",
                start + count
            )));
        }
        let data = self.value(x).data()[start * cols..(start + count) * cols].to_vec();
        let value = Tensor::matrix(count, cols, data)?;
        self.record(value, Op::SliceRows { input: x, start }, &[x], "slice_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(0.0, |acc, v| acc + v);
        self.record(Tensor::scalar(total), Op::Sum(x), &[x], "sum")
    }

    pub fn element(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "element")?;
        if row >= rows || col >= cols {
            return Err(Error::Index(format!(
                "element ({row}, {col}) outside {rows}x{cols}"
            )));
        }
        let flat = row * cols + col;
        let value = Tensor::scalar(self.value(x).data()[flat]);
        self.record(value, Op::Element { input: x, flat }, &[x], "element")
    }

    /// `-log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, row: usize, target: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(logits, "cross_entropy")?;
        if row >= rows || target >= cols {
            return Err(Error::Index(format!(
                "cross-entropy target ({row}, {target}) outside {rows}x{cols}"
            )));
        }
        let r = self.value(logits).row(row);
        let loss = log_sum_exp(r) - r[target];
        self.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                row,
                target,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse pass from a single-element node.
    ///
    /// Every registered leaf receives a gradient of its own shape (zeros
    /// when it does not influence `output`).
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_len = self.value(output).len();
        if out_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element output, got {out_len} elements"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }

        grads.resize(self.nodes.len(), None);
        for &leaf in &self.leaves {
            if grads[leaf.0].is_none() {
                grads[leaf.0] = Some(Tensor::zeros(self.value(leaf).shape()));
            }
        }
        Ok(Gradients {
            grads,
            leaves: self.leaves.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul_t(grad.data(), tb.data(), &mut d, m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, d)?);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn(ta.data(), grad.data(), &mut d, m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, d)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul(grad.data(), tb.data(), &mut d, m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, d)?);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n * k];
                    kernels::matmul_tn(grad.data(), ta.data(), &mut d, m, n, k);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, d)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = grad.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = grad.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::MulConst(a, mask) => {
                let d = grad.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, Tensor::new(mask.shape().to_vec(), d)?);
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, grad.map(|g| g * factor));
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, grad.clone());
                if self.wants(*bias) {
                    let cols = grad.cols();
                    let mut d = vec![0.0; cols];
                    for r in 0..grad.rows() {
                        for (acc, g) in d.iter_mut().zip(grad.row(r)) {
                            *acc += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, d)?);
                }
            }
            Op::Activation(x, kind) => {
                let tx = self.value(*x);
                let d = grad
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| g * kind.derivative(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::RmsNorm { input, gain, eps } => {
                let (tx, tg) = (self.value(*input), self.value(*gain));
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    let row = tx.row(r);
                    let g_row = grad.row(r);
                    let inv = 1.0 / rms(row, *eps);
                    let mut dot = 0.0;
                    for c in 0..cols {
                        let xhat = row[c] * inv;
                        dg[c] += g_row[c] * xhat;
                        dot += g_row[c] * tg.data()[c] * xhat;
                    }
                    let mean_dot = dot / cols as f64;
                    for c in 0..cols {
                        let xhat = row[c] * inv;
                        dx[r * cols + c] = (g_row[c] * tg.data()[c] - xhat * mean_dot) * inv;
                    }
                }
                if self.wants(*input) {
                    self.accumulate(grads, *input, Tensor::matrix(rows, cols, dx)?);
                }
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, Tensor::new(tg.shape().to_vec(), dg)?);
                }
            }
            Op::CausalSoftmax { input, scale } => {
                let n = out.rows();
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    let p = &out.row(i)[..=i];
                    let g = &grad.row(i)[..=i];
                    let dot = p.iter().zip(g).fold(0.0, |acc, (a, b)| acc + a * b);
                    for j in 0..=i {
                        d[i * n + j] = scale * p[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *input, Tensor::matrix(n, n, d)?);
            }
            Op::SliceCols { input, start } => {
                let tx = self.value(*input);
                let (rows, cols) = (tx.rows(), tx.cols());
                let width = out.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(grad.row(r));
                }
                self.accumulate(grads, *input, Tensor::matrix(rows, cols, d)?);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            d.extend_from_slice(&grad.row(r)[offset..offset + width]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, width, d)?);
                    }
                    offset += width;
                }
            }
            Op::PermuteCols { input, index } => {
                let tx = self.value(*input);
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let g_row = grad.row(r);
                    for (p, &src) in index.iter().enumerate() {
                        d[r * cols + src] += g_row[p];
                    }
                }
                self.accumulate(grads, *input, Tensor::matrix(rows, cols, d)?);
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.cols();
                let mut d = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, g) in d.row_mut(id).iter_mut().zip(grad.row(r)) {
                        *acc += g;
                    }
                }
                debug_assert_eq!(cols, grad.cols());
                self.accumulate(grads, *table, d);
            }
            Op::SliceRows { input, start } => {
                let tx = self.value(*input);
                let cols = tx.cols();
                let mut d = Tensor::zeros(tx.shape());
                let count = out.rows();
                d.data_mut()[start * cols..(start + count) * cols].copy_from_slice(grad.data());
                self.accumulate(grads, *input, d);
            }
            Op::Sum(x) => {
                let g = grad.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Element { input, flat } => {
                let mut d = Tensor::zeros(self.value(*input).shape());
                d.data_mut()[*flat] = grad.data()[0];
                self.accumulate(grads, *input, d);
            }
            Op::CrossEntropy {
                logits,
                row,
                target,
            } => {
                let tl = self.value(*logits);
                let g = grad.data()[0];
                let mut d = Tensor::zeros(tl.shape());
                let r = tl.row(*row);
                let lse = log_sum_exp(r);
                for (c, slot) in d.row_mut(*row).iter_mut().enumerate() {
                    let p = (r[c] - lse).exp();
                    *slot = g * (p - if c == *target { 1.0 } else { 0.0 });
                }
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }
}

fn rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().fold(0.0, |acc, v| acc + v * v) / row.len() as f64;
    (ms + eps).sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = row.iter().fold(0.0, |acc, v| acc + (v - max).exp());
    max + total.ln()
}
