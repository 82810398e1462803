//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Values are recorded in creation order, which is already a topological
//! order, so `backward` is a single reverse sweep. Every node is visited at
//! most once and gradients accumulate in a fixed order, so identical inputs
//! give bit-identical gradients.
//!
//! ```
//! use ambiseg::autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![3.0]));
//! let y = tape.mul(x, x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[6.0]);
//! ```

mod gradcheck;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error};
pub use tensor::Tensor;

use crate::error::{invalid, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Four independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results are reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let split = a.len() - a.len() % 4;
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for l in 0..4 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-column batch statistics (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            var: vec![1.0; cols],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    /// Train-mode normalization; `xhat` is the normalized output.
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    /// Normalization with fixed statistics.
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    ScaleShift {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        offsets: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    RowCosine {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanAbsError {
        pred: Var,
        target: Vec<f64>,
    },
    Refine {
        x: Var,
        sources: Vec<Vec<usize>>,
        gamma: f64,
    },
    External {
        x: Var,
        grad: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Row-wise `W x + b`: `x` is `[n, in]` (or `[in]`), `W` is `[out, in]`,
    /// `b` is `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 {
            return Err(invalid(format!(
                "weight must be a matrix, got shape {:?}",
                wv.shape()
            )));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        if xv.rank() > 2 || xv.cols() != inp {
            return Err(invalid(format!(
                "affine input shape {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if bv.numel() != out {
            return Err(invalid(format!(
                "bias has {} entries, expected {}",
                bv.numel(),
                out
            )));
        }
        let n = xv.rows();
        let mut y = vec![0.0; n * out];
        for (xr, yr) in xv.data().chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
            for ((yo, wr), &bo) in yr.iter_mut().zip(wv.data().chunks_exact(inp)).zip(bv.data()) {
                *yo = bo + dot(wr, xr);
            }
        }
        let shape = if xv.rank() == 1 { vec![out] } else { vec![n, out] };
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Affine { x, w, b }, &[x, w, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x), &[x])
    }

    fn check_same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::with_shape_of(self.value(a), data);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product. Panics on shape mismatch; use with care.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.try_mul(a, b).expect("mul operands must share a shape")
    }

    pub fn try_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::with_shape_of(self.value(a), data);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `[n, da]` and `[n, db]` to `[n, da + db]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows() {
            return Err(invalid(format!(
                "cannot concatenate {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, da, db) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Tensor::matrix(n, da + db, data)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Normalizes each column of `[n, d]` by its batch mean and biased
    /// variance (plus `eps`). Returns the batch statistics for running
    /// averages; the tape itself holds no mutable state.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.rows() == 0 {
            return Err(invalid("batch norm needs a non-empty [n, d] batch"));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = (xv.row(r)[c] - mean[c]) * inv_std[c];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        let var_node = self.push(value, Op::BatchNorm { x, inv_std }, &[x]);
        Ok((var_node, BatchStats { mean, var }))
    }

    /// Normalizes with fixed statistics; a pure affine map of the input.
    pub fn batch_norm_infer(&mut self, x: Var, stats: &RunningStats, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.rank() != 2 || stats.mean.len() != d || stats.var.len() != d {
            return Err(invalid("running statistics do not match the batch width"));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let n = xv.rows();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = (xv.row(r)[c] - stats.mean[c]) * inv_std[c];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(value, Op::Standardize { x, inv_std }, &[x]))
    }

    /// Mode-dispatching batch norm that folds train-mode statistics into
    /// `stats` immediately.
    pub fn batch_norm(&mut self, x: Var, eps: f64, mode: NormMode, stats: &mut RunningStats) -> Result<Var> {
        match mode {
            NormMode::Train => {
                let (y, batch) = self.batch_norm_train(x, eps)?;
                stats.update(&batch);
                Ok(y)
            }
            NormMode::Infer => self.batch_norm_infer(x, stats, eps),
        }
    }

    /// Column-wise `x * gamma + beta`.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(invalid("scale/shift width does not match input"));
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = xv.row(r)[c] * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::with_shape_of(xv, out);
        Ok(self.push(value, Op::ScaleShift { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Selects rows of `[n, d]` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(invalid("gather_rows needs a matrix"));
        }
        let (n, d) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("row {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::matrix(idx.len(), d, data)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Max over consecutive groups of `group` rows: `[n * group, d]` to
    /// `[n, d]`. Ties go to the first row in the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.rank() != 2 || !xv.rows().is_multiple_of(group) {
            return Err(invalid(format!(
                "cannot max-pool shape {:?} in groups of {group}",
                xv.shape()
            )));
        }
        let (rows, d) = (xv.rows(), xv.cols());
        let n = rows / group;
        let mut out = vec![f64::NEG_INFINITY; n * d];
        let mut argmax = vec![0usize; n * d];
        for g in 0..n {
            for k in 0..group {
                let r = g * group + k;
                for c in 0..d {
                    let v = xv.row(r)[c];
                    if k == 0 || v > out[g * d + c] {
                        out[g * d + c] = v;
                        argmax[g * d + c] = r;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(value, Op::GroupMax { x, argmax }, &[x]))
    }

    /// Sums of consecutive runs of a flat input; run `i` covers
    /// `offsets[i]..offsets[i + 1]`.
    pub fn segment_sum(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if offsets.is_empty()
            || offsets[0] != 0
            || *offsets.last().unwrap() != xv.numel()
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(invalid("segment offsets must run from 0 to the input length"));
        }
        let data = offsets
            .windows(2)
            .map(|w| xv.data()[w[0]..w[1]].iter().sum())
            .collect();
        let value = Tensor::vector(data);
        Ok(self.push(
            value,
            Op::SegmentSum {
                x,
                offsets: offsets.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, norms clamped
    /// below by `crate::margin_contrast::NORM_EPSILON`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let eps = crate::margin_contrast::NORM_EPSILON;
        let data = (0..av.rows())
            .map(|r| {
                let (u, v) = (av.row(r), bv.row(r));
                let uu: f64 = u.iter().map(|x| x * x).sum();
                let vv: f64 = v.iter().map(|x| x * x).sum();
                let uv: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                uv / (uu.sqrt().max(eps) * vv.sqrt().max(eps))
            })
            .collect();
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::RowCosine { a, b }, &[a, b]))
    }

    /// Mean cross-entropy of softmaxed `[n, C]` scores against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if lv.rank() != 2 || labels.len() != n || n == 0 {
            return Err(invalid("cross entropy needs [n, C] scores and n labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
            let log_z = z.ln() + top;
            for k in 0..c {
                probs[r * c + k] = (row[k] - log_z).exp();
            }
            total += log_z - row[labels[r]];
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean absolute error; the subgradient at a zero residual is zero.
    pub fn mean_abs_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() || target.is_empty() {
            return Err(invalid(format!(
                "{} predictions for {} targets",
                pv.numel(),
                target.len()
            )));
        }
        let total: f64 = pv.data().iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
        let value = Tensor::scalar(total / target.len() as f64);
        Ok(self.push(
            value,
            Op::MeanAbsError {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// Row-wise convex refinement: rows with an empty source list pass
    /// through untouched, the rest become
    /// `gamma * sum(x[sources]) + (1 - gamma) * x[i]`.
    pub fn refine(&mut self, x: Var, sources: &[Vec<usize>], gamma: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || sources.len() != xv.rows() {
            return Err(invalid("refine needs one source list per row"));
        }
        let n = xv.rows();
        if sources.iter().flatten().any(|&s| s >= n) {
            return Err(invalid("refine source out of range"));
        }
        let mut data = xv.data().to_vec();
        let d = xv.cols();
        for (i, src) in sources.iter().enumerate() {
            if src.is_empty() {
                continue;
            }
            let blended = crate::refine::blend_rows(xv.row(i), src.iter().map(|&s| xv.row(s)), gamma);
            data[i * d..(i + 1) * d].copy_from_slice(&blended);
        }
        let value = Tensor::with_shape_of(xv, data);
        Ok(self.push(
            value,
            Op::Refine {
                x,
                sources: sources.to_vec(),
                gamma,
            },
            &[x],
        ))
    }

    /// Scalar computed outside the tape with a known gradient with respect
    /// to `x`.
    pub fn external(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.numel() != self.value(x).numel() {
            return Err(invalid("external gradient does not match its input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, &[x]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::with_shape_of(out, vec![1.0]));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                let want_dx = self.nodes[x.0].requires_grad;
                let mut dx = vec![0.0; if want_dx { n * inp } else { 0 }];
                let mut dw = vec![0.0; out * inp];
                let mut db = vec![0.0; out];
                for (r, (xr, gr)) in xv.data().chunks_exact(inp).zip(gd.chunks_exact(out)).enumerate() {
                    for (o, &go) in gr.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        let wr = &wv.data()[o * inp..(o + 1) * inp];
                        if want_dx {
                            for (d, w) in dx[r * inp..(r + 1) * inp].iter_mut().zip(wr) {
                                *d += go * w;
                            }
                        }
                        for (d, x) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                            *d += go * x;
                        }
                    }
                }
                if want_dx {
                    send(grads, *x, Tensor::with_shape_of(xv, dx));
                }
                send(grads, *w, Tensor::with_shape_of(wv, dw));
                send(grads, *b, Tensor::with_shape_of(self.value(*b), db));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                send(grads, *x, Tensor::with_shape_of(&node.value, dx));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                send(grads, *x, Tensor::with_shape_of(&node.value, dx));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                send(grads, *x, Tensor::with_shape_of(&node.value, dx));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(g, v)| g / v).collect();
                send(grads, *x, Tensor::with_shape_of(&node.value, dx));
            }
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, v)| g * v).collect();
                let db = gd.iter().zip(av).map(|(g, v)| g * v).collect();
                send(grads, *a, Tensor::with_shape_of(&node.value, da));
                send(grads, *b, Tensor::with_shape_of(&node.value, db));
            }
            Op::Scale(x, c) => {
                send(grads, *x, g.map(|v| v * c));
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, da, db) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for r in 0..n {
                    let row = &gd[r * (da + db)..(r + 1) * (da + db)];
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                send(grads, *a, Tensor::with_shape_of(av, ga));
                send(grads, *b, Tensor::with_shape_of(bv, gb));
            }
            Op::BatchNorm { x, inv_std } => {
                let xhat = node.value.data();
                let (n, d) = (node.value.rows(), node.value.cols());
                let mut mean_g = vec![0.0; d];
                let mut mean_gx = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        mean_g[c] += gd[r * d + c];
                        mean_gx[c] += gd[r * d + c] * xhat[r * d + c];
                    }
                }
                let nf = n as f64;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        let k = r * d + c;
                        dx[k] = inv_std[c] * (gd[k] - mean_g[c] / nf - xhat[k] * mean_gx[c] / nf);
                    }
                }
                send(grads, *x, Tensor::with_shape_of(&node.value, dx));
            }
            Op::Standardize { x, inv_std } => {
                let d = node.value.cols();
                let dx = gd.iter().enumerate().map(|(k, g)| g * inv_std[k % d]).collect();
                send(grads, *x, Tensor::with_shape_of(&node.value, dx));
            }
            Op::ScaleShift { x, gamma, beta } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let k = r * d + c;
                        dx[k] = gd[k] * gv.data()[c];
                        dg[c] += gd[k] * xv.data()[k];
                        dbeta[c] += gd[k];
                    }
                }
                send(grads, *x, Tensor::with_shape_of(xv, dx));
                send(grads, *gamma, Tensor::with_shape_of(gv, dg));
                send(grads, *beta, Tensor::with_shape_of(self.value(*beta), dbeta));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += gd[r * d + c];
                    }
                }
                send(grads, *x, Tensor::with_shape_of(xv, dx));
            }
            Op::GroupMax { x, argmax } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (k, &r) in argmax.iter().enumerate() {
                    dx[r * d + k % d] += gd[k];
                }
                send(grads, *x, Tensor::with_shape_of(xv, dx));
            }
            Op::SegmentSum { x, offsets } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (s, w) in offsets.windows(2).enumerate() {
                    dx[w[0]..w[1]].iter_mut().for_each(|v| *v = gd[s]);
                }
                send(grads, *x, Tensor::with_shape_of(xv, dx));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                send(grads, *x, Tensor::with_shape_of(xv, vec![gd[0]; xv.numel()]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = gd[0] / xv.numel() as f64;
                send(grads, *x, Tensor::with_shape_of(xv, vec![v; xv.numel()]));
            }
            Op::RowCosine { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let eps = crate::margin_contrast::NORM_EPSILON;
                let d = av.cols();
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for r in 0..av.rows() {
                    let (u, v) = (av.row(r), bv.row(r));
                    let lu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let lv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let (nu, nv) = (lu.max(eps), lv.max(eps));
                    let s = node.value.data()[r];
                    let g = gd[r];
                    for c in 0..d {
                        let mut gu = v[c] / (nu * nv);
                        let mut gv = u[c] / (nu * nv);
                        if lu > eps {
                            gu -= s * u[c] / (lu * lu);
                        }
                        if lv > eps {
                            gv -= s * v[c] / (lv * lv);
                        }
                        da[r * d + c] = g * gu;
                        db[r * d + c] = g * gv;
                    }
                }
                send(grads, *a, Tensor::with_shape_of(av, da));
                send(grads, *b, Tensor::with_shape_of(bv, db));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                let scale = gd[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * c + y] -= scale;
                }
                send(grads, *logits, Tensor::with_shape_of(lv, dl));
            }
            Op::MeanAbsError { pred, target } => {
                let pv = self.value(*pred);
                let scale = gd[0] / target.len() as f64;
                let dp = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let r = p - t;
                        if r > 0.0 {
                            scale
                        } else if r < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(grads, *pred, Tensor::with_shape_of(pv, dp));
            }
            Op::Refine { x, sources, gamma } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (i, src) in sources.iter().enumerate() {
                    let gi = &gd[i * d..(i + 1) * d];
                    if src.is_empty() {
                        for c in 0..d {
                            dx[i * d + c] += gi[c];
                        }
                        continue;
                    }
                    for c in 0..d {
                        dx[i * d + c] += (1.0 - gamma) * gi[c];
                    }
                    for &s in src {
                        for c in 0..d {
                            dx[s * d + c] += gamma * gi[c];
                        }
                    }
                }
                send(grads, *x, Tensor::with_shape_of(xv, dx));
            }
            Op::External { x, grad } => {
                let dx = grad.map(|v| v * gd[0]);
                send(grads, *x, Tensor::with_shape_of(self.value(*x), dx.into_data()));
            }
        }
    }
}

#[cfg(test)]
mod tests;
