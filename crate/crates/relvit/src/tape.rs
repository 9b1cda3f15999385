//! Define-by-run reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as it executes. Each op returns a
//! [`Var`] handle (an index into the tape); calling [`Tape::backward`] on a
//! scalar result walks the recorded ops in reverse and accumulates gradients
//! for every node, so parameters that never influenced the loss end up with
//! exact zero gradients.
//!
//! The tape is rebuilt from scratch for every training step. Values are f32;
//! matrix products, reductions and normalization statistics accumulate in f64.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Matrix};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right-hand operand of a binary elementwise op is expanded to the
/// left-hand shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Same shape, no expansion.
    Same,
    /// Rhs is 1x1 and applies to every element.
    Scalar,
    /// Rhs is 1xc and applies to every row.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    /// Input node; `param` links it to a parameter slot for gradient export.
    Leaf { param: Option<usize> },
    /// C = A . B
    MatMul { a: usize, b: usize },
    /// C = A . B^T
    MatMulNt { a: usize, b: usize },
    Transpose { x: usize },
    Bin { kind: BinKind, a: usize, b: usize, bcast: Bcast },
    /// y = mul * x + add; only the slope matters to the backward pass.
    Affine { x: usize, mul: f32 },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    ClampMin { x: usize, min: f32 },
    /// Elementwise min/max of same-shape operands; ties route the gradient to `a`.
    Minimum { a: usize, b: usize },
    Maximum { a: usize, b: usize },
    /// Row-wise layer norm with learned scale and shift (both 1xc nodes).
    /// Saved statistics make the backward pass cheap.
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows { x: usize },
    /// Rows scaled to unit L2 norm; saved norms are post-floor.
    L2NormRows { x: usize, norms: Vec<f64> },
    SumAll { x: usize },
    MeanAll { x: usize },
    /// out[r, :] = x[idx[r], :]
    GatherRows { x: usize, idx: Vec<usize> },
    /// Column vector out[r, 0] = x[idx[r].0, idx[r].1]
    GatherElems { x: usize, idx: Vec<(usize, usize)> },
    SliceCols { x: usize, start: usize, len: usize },
    /// Column vector of per-row maxima; saved argmax routes gradients
    /// (first maximum wins on ties).
    RowMax { x: usize, argmax: Vec<usize> },
    /// Elementwise binary cross-entropy from logits; gradients flow to both
    /// logits and targets unless the targets are detached upstream.
    BceWithLogits { logits: usize, targets: usize },
    StopGrad,
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradient tape. One per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh-based GeLU approximation.
pub fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient export but still gets a grad
    /// buffer so the backward pass is uniform.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Trainable input tied to parameter slot `param_id`.
    pub fn param(&mut self, param_id: usize, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: Some(param_id) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// A . B^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Op::MatMulNt { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.transpose();
        self.push(value, Op::Transpose { x: x.0 })
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let bcast = if (ar, ac) == (br, bc) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else {
            return Err(Error::Contract(format!(
                "elementwise {kind:?}: cannot broadcast {br}x{bc} onto {ar}x{ac}"
            )));
        };
        let mut value = self.nodes[a.0].value.clone();
        {
            let bv = self.nodes[b.0].value.data();
            let apply = |x: f32, y: f32| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            match bcast {
                Bcast::Same => {
                    for (v, &y) in value.data_mut().iter_mut().zip(bv.iter()) {
                        *v = apply(*v, y);
                    }
                }
                Bcast::Scalar => {
                    let y = bv[0];
                    for v in value.data_mut() {
                        *v = apply(*v, y);
                    }
                }
                Bcast::Row => {
                    for r in 0..ar {
                        for (v, &y) in value.row_mut(r).iter_mut().zip(bv.iter()) {
                            *v = apply(*v, y);
                        }
                    }
                }
            }
        }
        Ok(self.push(value, Op::Bin { kind, a: a.0, b: b.0, bcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    /// y = mul * x + add with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f32, add: f32) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = mul * *v + add;
        }
        self.push(value, Op::Affine { x: x.0, mul })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = gelu_scalar(*v);
        }
        self.push(value, Op::Gelu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = sigmoid_scalar(*v);
        }
        self.push(value, Op::Sigmoid { x: x.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = v.abs();
        }
        self.push(value, Op::Abs { x: x.0 })
    }

    pub fn clamp_min(&mut self, x: Var, min: f32) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = v.max(min);
        }
        self.push(value, Op::ClampMin { x: x.0, min })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.min_max(a, b, true)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.min_max(a, b, false)
    }

    fn min_max(&mut self, a: Var, b: Var, is_min: bool) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Contract(format!(
                "minimum/maximum requires equal shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.nodes[a.0].value.clone();
        {
            let bv = self.nodes[b.0].value.data();
            for (v, &y) in value.data_mut().iter_mut().zip(bv.iter()) {
                *v = if is_min { v.min(y) } else { v.max(y) };
            }
        }
        let op = if is_min { Op::Minimum { a: a.0, b: b.0 } } else { Op::Maximum { a: a.0, b: b.0 } };
        Ok(self.push(value, op))
    }

    /// Row-wise layer norm: y = gamma * (x - mean) / sqrt(var + eps) + beta.
    /// `gamma` and `beta` must be 1 x cols nodes. Statistics use f64.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(Error::Contract(format!(
                "layer_norm scale/shift must be 1x{cols}, got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if cols == 0 {
            return Err(Error::Contract("layer_norm over zero columns".into()));
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut means = vec![0.0f64; rows];
        let mut rstds = vec![0.0f64; rows];
        {
            let xv = &self.nodes[x.0].value;
            let gv = self.nodes[gamma.0].value.data();
            let bv = self.nodes[beta.0].value.data();
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let out = value.row_mut(r);
                for c in 0..cols {
                    let xhat = (row[c] as f64 - mean) * rstd;
                    out[c] = (xhat * gv[c] as f64 + bv[c] as f64) as f32;
                }
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, rstd: rstds },
        ))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let mut value = Matrix::zeros(rows, cols);
        {
            let xv = &self.nodes[x.0].value;
            for r in 0..rows {
                let row = xv.row(r);
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                let out = value.row_mut(r);
                for c in 0..cols {
                    let e = ((row[c] - max) as f64).exp();
                    out[c] = e as f32;
                    sum += e;
                }
                let inv = (1.0 / sum) as f32;
                for v in out.iter_mut() {
                    *v *= inv;
                }
            }
        }
        self.push(value, Op::SoftmaxRows { x: x.0 })
    }

    /// Rows scaled to unit L2 norm. Norms are floored at 1e-12 so zero rows
    /// pass through as zeros instead of NaN.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let mut value = Matrix::zeros(rows, cols);
        let mut norms = vec![0.0f64; rows];
        {
            let xv = &self.nodes[x.0].value;
            for r in 0..rows {
                let row = xv.row(r);
                let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
                norms[r] = norm;
                let out = value.row_mut(r);
                for c in 0..cols {
                    out[c] = (row[c] as f64 / norm) as f32;
                }
            }
        }
        self.push(value, Op::L2NormRows { x: x.0, norms })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].value.data().iter().map(|&v| v as f64).sum();
        self.push(Matrix::scalar(total as f32), Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1);
        let total: f64 = self.nodes[x.0].value.data().iter().map(|&v| v as f64).sum();
        self.push(Matrix::scalar((total / n as f64) as f32), Op::MeanAll { x: x.0 })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let mut value = Matrix::zeros(idx.len(), cols);
        for (r, &src) in idx.iter().enumerate() {
            if src >= rows {
                return Err(Error::Contract(format!(
                    "gather_rows index {src} out of range for {rows} rows"
                )));
            }
            value.row_mut(r).copy_from_slice(self.nodes[x.0].value.row(src));
        }
        Ok(self.push(value, Op::GatherRows { x: x.0, idx: idx.to_vec() }))
    }

    /// Column vector of individually addressed elements.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let mut value = Matrix::zeros(idx.len(), 1);
        for (r, &(sr, sc)) in idx.iter().enumerate() {
            if sr >= rows || sc >= cols {
                return Err(Error::Contract(format!(
                    "gather_elems index ({sr},{sc}) out of range for {rows}x{cols}"
                )));
            }
            value.set(r, 0, self.nodes[x.0].value.get(sr, sc));
        }
        Ok(self.push(value, Op::GatherElems { x: x.0, idx: idx.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {start}+{len}) out of range for {cols} columns"
            )));
        }
        let mut value = Matrix::zeros(rows, len);
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(&self.nodes[x.0].value.row(r)[start..start + len]);
        }
        Ok(self.push(value, Op::SliceCols { x: x.0, start, len }))
    }

    /// Column vector of per-row maxima.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols == 0 {
            return Err(Error::Contract("row_max over zero columns".into()));
        }
        let mut value = Matrix::zeros(rows, 1);
        let mut argmax = vec![0usize; rows];
        for r in 0..rows {
            let row = self.nodes[x.0].value.row(r);
            let (mut best_c, mut best) = (0usize, row[0]);
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            value.set(r, 0, best);
            argmax[r] = best_c;
        }
        Ok(self.push(value, Op::RowMax { x: x.0, argmax }))
    }

    /// Elementwise binary cross-entropy from logits, computed in the stable
    /// form max(l, 0) - l*t + ln(1 + exp(-|l|)).
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        if self.shape(logits) != self.shape(targets) {
            return Err(Error::Contract(format!(
                "bce_with_logits shape mismatch: {:?} vs {:?}",
                self.shape(logits),
                self.shape(targets)
            )));
        }
        let mut value = self.nodes[logits.0].value.clone();
        {
            let tv = self.nodes[targets.0].value.data();
            for (v, &t) in value.data_mut().iter_mut().zip(tv.iter()) {
                let l = *v;
                *v = l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
            }
        }
        Ok(self.push(value, Op::BceWithLogits { logits: logits.0, targets: targets.0 }))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGrad)
    }

    /// Reverse pass from a 1x1 root. Returns per-node gradients; every node
    /// gets a buffer, so untouched parameters read back as exact zeros.
    pub fn backward(&mut self, root: Var) -> Result<Grads> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].set(0, 0, 1.0);

        for i in (0..=root.0).rev() {
            if grads[i].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split off the gradient of node i so we can mutate input grads.
            let g = std::mem::replace(&mut grads[i], Matrix::zeros(0, 0));
            self.backward_op(i, &g, &mut grads)?;
            grads[i] = g;
        }
        Ok(Grads { grads })
    }

    fn backward_op(&self, i: usize, g: &Matrix, grads: &mut [Matrix]) -> Result<()> {
        /// dst += src
        fn accum(dst: &mut Matrix, src: &Matrix) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
                *d += s;
            }
        }
        /// Reduce a full-shape gradient onto a broadcast rhs shape.
        fn accum_bcast(dst: &mut Matrix, src: &Matrix, bcast: Bcast, sign: f32) {
            match bcast {
                Bcast::Same => {
                    for (d, &s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
                        *d += sign * s;
                    }
                }
                Bcast::Scalar => {
                    let total: f64 = src.data().iter().map(|&v| v as f64).sum();
                    let v = dst.get(0, 0) + sign * total as f32;
                    dst.set(0, 0, v);
                }
                Bcast::Row => {
                    let cols = dst.cols();
                    for c in 0..cols {
                        let mut total = 0.0f64;
                        for r in 0..src.rows() {
                            total += src.get(r, c) as f64;
                        }
                        let v = dst.get(0, c) + sign * total as f32;
                        dst.set(0, c, v);
                    }
                }
            }
        }

        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let da = matmul_nt(g, &self.nodes[*b].value)?;
                accum(&mut grads[*a], &da);
                let db = matmul_tn(&self.nodes[*a].value, g)?;
                accum(&mut grads[*b], &db);
            }
            Op::MatMulNt { a, b } => {
                // C = A.B^T: dA = G.B, dB = G^T.A
                let da = matmul_nn(g, &self.nodes[*b].value)?;
                accum(&mut grads[*a], &da);
                let db = matmul_tn(g, &self.nodes[*a].value)?;
                accum(&mut grads[*b], &db);
            }
            Op::Transpose { x } => {
                let gt = g.transpose();
                accum(&mut grads[*x], &gt);
            }
            Op::Bin { kind, a, b, bcast } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (rows, cols) = av.shape();
                let rhs_at = |r: usize, c: usize| -> f32 {
                    match bcast {
                        Bcast::Same => bv.get(r, c),
                        Bcast::Scalar => bv.get(0, 0),
                        Bcast::Row => bv.get(0, c),
                    }
                };
                match kind {
                    BinKind::Add => {
                        accum(&mut grads[*a], g);
                        accum_bcast(&mut grads[*b], g, *bcast, 1.0);
                    }
                    BinKind::Sub => {
                        accum(&mut grads[*a], g);
                        accum_bcast(&mut grads[*b], g, *bcast, -1.0);
                    }
                    BinKind::Mul => {
                        let mut da = g.clone();
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = da.get(r, c) * rhs_at(r, c);
                                da.set(r, c, v);
                            }
                        }
                        accum(&mut grads[*a], &da);
                        let mut db_full = g.clone();
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = db_full.get(r, c) * av.get(r, c);
                                db_full.set(r, c, v);
                            }
                        }
                        accum_bcast(&mut grads[*b], &db_full, *bcast, 1.0);
                    }
                    BinKind::Div => {
                        // y = a / b: dy/da = 1/b, dy/db = -a / b^2
                        let mut da = g.clone();
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = da.get(r, c) / rhs_at(r, c);
                                da.set(r, c, v);
                            }
                        }
                        accum(&mut grads[*a], &da);
                        let mut db_full = g.clone();
                        for r in 0..rows {
                            for c in 0..cols {
                                let bb = rhs_at(r, c);
                                let v = -db_full.get(r, c) * av.get(r, c) / (bb * bb);
                                db_full.set(r, c, v);
                            }
                        }
                        accum_bcast(&mut grads[*b], &db_full, *bcast, 1.0);
                    }
                }
            }
            Op::Affine { x, mul } => {
                let dst = &mut grads[*x];
                for (d, &s) in dst.data_mut().iter_mut().zip(g.data().iter()) {
                    *d += mul * s;
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                let dst = &mut grads[*x];
                for idx in 0..g.len() {
                    dst.data_mut()[idx] += g.data()[idx] * gelu_grad(xv.data()[idx]);
                }
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[i].value;
                let dst = &mut grads[*x];
                for idx in 0..g.len() {
                    let y = yv.data()[idx];
                    dst.data_mut()[idx] += g.data()[idx] * y * (1.0 - y);
                }
            }
            Op::Abs { x } => {
                let xv = &self.nodes[*x].value;
                let dst = &mut grads[*x];
                for idx in 0..g.len() {
                    let s = match xv.data()[idx] {
                        v if v > 0.0 => 1.0,
                        v if v < 0.0 => -1.0,
                        _ => 0.0,
                    };
                    dst.data_mut()[idx] += g.data()[idx] * s;
                }
            }
            Op::ClampMin { x, min } => {
                let xv = &self.nodes[*x].value;
                let dst = &mut grads[*x];
                for idx in 0..g.len() {
                    if xv.data()[idx] >= *min {
                        dst.data_mut()[idx] += g.data()[idx];
                    }
                }
            }
            Op::Minimum { a, b } | Op::Maximum { a, b } => {
                let is_min = matches!(self.nodes[i].op, Op::Minimum { .. });
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                for idx in 0..g.len() {
                    let x = av.data()[idx];
                    let y = bv.data()[idx];
                    let a_wins = if is_min { x <= y } else { x >= y };
                    if a_wins {
                        grads[*a].data_mut()[idx] += g.data()[idx];
                    } else {
                        grads[*b].data_mut()[idx] += g.data()[idx];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let (rows, cols) = xv.shape();
                let inv_c = 1.0 / cols as f64;
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    // h = g * gamma; dx = rstd * (h - mean(h) - xhat * mean(h*xhat))
                    let mut sum_h = 0.0f64;
                    let mut sum_hx = 0.0f64;
                    for c in 0..cols {
                        let xhat = (xv.get(r, c) as f64 - mu) * rs;
                        let h = g.get(r, c) as f64 * gv.get(0, c) as f64;
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                    let mean_h = sum_h * inv_c;
                    let mean_hx = sum_hx * inv_c;
                    for c in 0..cols {
                        let xhat = (xv.get(r, c) as f64 - mu) * rs;
                        let h = g.get(r, c) as f64 * gv.get(0, c) as f64;
                        let dx = rs * (h - mean_h - xhat * mean_hx);
                        let cur = grads[*x].get(r, c);
                        grads[*x].set(r, c, cur + dx as f32);
                        let dg = g.get(r, c) as f64 * xhat;
                        let cur_g = grads[*gamma].get(0, c);
                        grads[*gamma].set(0, c, cur_g + dg as f32);
                        let cur_b = grads[*beta].get(0, c);
                        grads[*beta].set(0, c, cur_b + g.get(r, c));
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let sv = &self.nodes[i].value;
                let (rows, cols) = sv.shape();
                for r in 0..rows {
                    let mut dot = 0.0f64;
                    for c in 0..cols {
                        dot += g.get(r, c) as f64 * sv.get(r, c) as f64;
                    }
                    for c in 0..cols {
                        let dx = sv.get(r, c) as f64 * (g.get(r, c) as f64 - dot);
                        let cur = grads[*x].get(r, c);
                        grads[*x].set(r, c, cur + dx as f32);
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let yv = &self.nodes[i].value;
                let (rows, cols) = yv.shape();
                for r in 0..rows {
                    let mut dot = 0.0f64;
                    for c in 0..cols {
                        dot += g.get(r, c) as f64 * yv.get(r, c) as f64;
                    }
                    let inv_n = 1.0 / norms[r];
                    for c in 0..cols {
                        let dx = (g.get(r, c) as f64 - yv.get(r, c) as f64 * dot) * inv_n;
                        let cur = grads[*x].get(r, c);
                        grads[*x].set(r, c, cur + dx as f32);
                    }
                }
            }
            Op::SumAll { x } => {
                let gs = g.get(0, 0);
                for d in grads[*x].data_mut() {
                    *d += gs;
                }
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].value.len().max(1);
                let gs = g.get(0, 0) / n as f32;
                for d in grads[*x].data_mut() {
                    *d += gs;
                }
            }
            Op::GatherRows { x, idx } => {
                for (r, &src) in idx.iter().enumerate() {
                    let cols = g.cols();
                    for c in 0..cols {
                        let cur = grads[*x].get(src, c);
                        grads[*x].set(src, c, cur + g.get(r, c));
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                for (r, &(sr, sc)) in idx.iter().enumerate() {
                    let cur = grads[*x].get(sr, sc);
                    grads[*x].set(sr, sc, cur + g.get(r, 0));
                }
            }
            Op::SliceCols { x, start, len } => {
                for r in 0..g.rows() {
                    for c in 0..*len {
                        let cur = grads[*x].get(r, start + c);
                        grads[*x].set(r, start + c, cur + g.get(r, c));
                    }
                }
            }
            Op::RowMax { x, argmax } => {
                for (r, &c) in argmax.iter().enumerate() {
                    let cur = grads[*x].get(r, c);
                    grads[*x].set(r, c, cur + g.get(r, 0));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = &self.nodes[*logits].value;
                let tv = &self.nodes[*targets].value;
                for idx in 0..g.len() {
                    let l = lv.data()[idx];
                    let t = tv.data()[idx];
                    let gs = g.data()[idx];
                    grads[*logits].data_mut()[idx] += gs * (sigmoid_scalar(l) - t);
                    grads[*targets].data_mut()[idx] += gs * (-l);
                }
            }
            Op::StopGrad => {}
        }
        Ok(())
    }

    /// Indices and parameter ids of all trainable leaves, in creation order.
    pub fn param_leaves(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(pid) } => Some((i, pid)),
                _ => None,
            })
            .collect()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Matrix>,
}

impl Grads {
    pub fn of(&self, v: Var) -> &Matrix {
        &self.grads[v.index()]
    }

    pub fn of_index(&self, i: usize) -> &Matrix {
        &self.grads[i]
    }
}
