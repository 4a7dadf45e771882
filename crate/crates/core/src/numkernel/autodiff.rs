//! Reverse-mode differentiation over a dynamically recorded graph of
//! matrix operations.
//!
//! Every operation appends a node holding its value and the indices of
//! its inputs, so node indices form a topological order and the graph is
//! acyclic by construction. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into every node that depends on a parameter.

use super::ops::{
    bce_logit_scalar, elu_scalar, leaky_relu_scalar, sigmoid_scalar, validate_binary_targets,
};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    HeadDot(Var, Var),
    HeadScale(Var, Var),
    SegmentSoftmax(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Matrix),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// A tape is single-use and single-threaded; build a fresh one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs.0 != 1 || rs.1 != xs.1 {
            return Err(Error::Dimension {
                op: "add_row",
                left: xs,
                right: rs,
            });
        }
        let mut value = self.value(x).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..xs.0 {
            for (v, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Adds a constant matrix of the same shape.
    pub fn add_const(&mut self, x: Var, constant: &Matrix) -> Result<Var> {
        let value = self.value(x).add(constant)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant matrix (masks, dropout, row scaling).
    pub fn mul_const(&mut self, x: Var, constant: Matrix) -> Result<Var> {
        let value = self.value(x).zip_map(&constant, |a, b| a * b)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, constant), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| leaky_relu_scalar(v, slope));
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(elu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Elu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Row `e` of the output is row `indices[e]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let rows = self.shape(x).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Validation(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let value = self.value(x).select_rows(&indices);
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, indices), rg))
    }

    /// Output row `t` is the sum of the rows `e` of `x` with `targets[e] == t`.
    pub fn scatter_add_rows(&mut self, x: Var, targets: Vec<usize>, n_out: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if targets.len() != rows {
            return Err(Error::Validation(format!(
                "scatter needs one target per row: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_out) {
            return Err(Error::Validation(format!(
                "scatter target {bad} out of range for {n_out} rows"
            )));
        }
        let mut value = Matrix::zeros(n_out, cols);
        {
            let src = self.value(x);
            for (e, &t) in targets.iter().enumerate() {
                for (o, &v) in value.row_mut(t).iter_mut().zip(src.row(e)) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ScatterAddRows(x, targets), rg))
    }

    /// Per-head dot product: `out[e, h] = Σ_d z[e, h·hd + d] · a[h, d]`
    /// where `a` is `heads x hd` and `z` is `E x (heads·hd)`.
    pub fn head_dot(&mut self, z: Var, a: Var) -> Result<Var> {
        let (zs, as_) = (self.shape(z), self.shape(a));
        if as_.0 * as_.1 != zs.1 {
            return Err(Error::Dimension {
                op: "head_dot",
                left: zs,
                right: as_,
            });
        }
        let (heads, hd) = as_;
        let mut value = Matrix::zeros(zs.0, heads);
        {
            let zv = self.value(z);
            let av = self.value(a);
            for e in 0..zs.0 {
                let zr = zv.row(e);
                for h in 0..heads {
                    let ar = av.row(h);
                    let acc: f64 = zr[h * hd..(h + 1) * hd]
                        .iter()
                        .zip(ar)
                        .map(|(x, y)| x * y)
                        .sum();
                    value.set(e, h, acc);
                }
            }
        }
        let rg = self.rg(z) || self.rg(a);
        Ok(self.push(value, Op::HeadDot(z, a), rg))
    }

    /// Scales each head block of `z` (`E x heads·hd`) by `alpha[e, h]` (`E x heads`).
    pub fn head_scale(&mut self, z: Var, alpha: Var) -> Result<Var> {
        let (zs, al) = (self.shape(z), self.shape(alpha));
        if zs.0 != al.0 || al.1 == 0 || zs.1 % al.1 != 0 {
            return Err(Error::Dimension {
                op: "head_scale",
                left: zs,
                right: al,
            });
        }
        let hd = zs.1 / al.1;
        let mut value = self.value(z).clone();
        {
            let alv = self.value(alpha);
            for e in 0..zs.0 {
                let row = value.row_mut(e);
                for (h, &w) in alv.row(e).iter().enumerate() {
                    for v in &mut row[h * hd..(h + 1) * hd] {
                        *v *= w;
                    }
                }
            }
        }
        let rg = self.rg(z) || self.rg(alpha);
        Ok(self.push(value, Op::HeadScale(z, alpha), rg))
    }

    /// Softmax within groups of rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segments: Vec<usize>, n_segments: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if segments.len() != rows {
            return Err(Error::Validation(format!(
                "segment softmax needs one segment per row: {} for {rows}",
                segments.len()
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Validation(format!(
                "segment id {bad} out of range for {n_segments}"
            )));
        }
        let xv = self.value(x);
        let mut max = Matrix::filled(n_segments, cols, f64::NEG_INFINITY);
        for (e, &s) in segments.iter().enumerate() {
            for (m, &v) in max.row_mut(s).iter_mut().zip(xv.row(e)) {
                *m = m.max(v);
            }
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut total = Matrix::zeros(n_segments, cols);
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let ex = (xv.get(e, c) - max.get(s, c)).exp();
                value.set(e, c, ex);
                total.set(s, c, total.get(s, c) + ex);
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                value.set(e, c, value.get(e, c) / total.get(s, c));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SegmentSoftmax(x, segments), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).data().len().max(1) as f64;
        let value = Matrix::scalar(self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Mean over all entries of the stable binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Result<Var> {
        validate_binary_targets(self.value(logits), &targets)?;
        let s = self.value(logits);
        let n = s.data().len().max(1) as f64;
        let loss: f64 = s
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&s, &z)| bce_logit_scalar(s, z))
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(Matrix::scalar(loss), Op::BceWithLogits(logits, targets), rg))
    }

    /// Weighted mean of per-row softmax cross-entropy:
    /// `Σ_i w_i · (-log softmax(x_i)[y_i]) / Σ_i w_i`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if labels.len() != rows || weights.len() != rows {
            return Err(Error::Validation(format!(
                "cross-entropy needs {rows} labels and weights, got {} and {}",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let total_w: f64 = weights.iter().sum();
        if !(total_w > 0.0) {
            return Err(Error::Validation("cross-entropy weights sum to zero".into()));
        }
        let x = self.value(logits);
        let mut loss = 0.0;
        for (i, (&y, &w)) in labels.iter().zip(&weights).enumerate() {
            let row = x.row(i);
            loss += w * (super::matrix::log_sum_exp(row) - row[y]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::scalar(loss / total_w),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Validation(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, contribution: Matrix) -> Result<()> {
        if !self.rg(var) {
            return Ok(());
        }
        debug_assert_eq!(contribution.shape(), self.shape(var));
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*row) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, db)?;
                }
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone())?,
            Op::MulConst(x, c) => {
                let dx = g.zip_map(c, |a, b| a * b)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.scale(*f))?,
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { g * slope })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Elu(x) => {
                let dx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { g * v.exp() })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GatherRows(x, indices) => {
                if self.rg(*x) {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Matrix::zeros(rows, cols);
                    for (e, &src) in indices.iter().enumerate() {
                        for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(e)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::ScatterAddRows(x, targets) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.select_rows(targets))?;
                }
            }
            Op::HeadDot(z, a) => {
                let zv = self.value(*z);
                let av = self.value(*a);
                let (heads, hd) = av.shape();
                if self.rg(*z) {
                    let mut dz = Matrix::zeros(zv.rows(), zv.cols());
                    for e in 0..zv.rows() {
                        let row = dz.row_mut(e);
                        for h in 0..heads {
                            let ge = g.get(e, h);
                            for (d, &w) in row[h * hd..(h + 1) * hd].iter_mut().zip(av.row(h)) {
                                *d = ge * w;
                            }
                        }
                    }
                    self.accumulate(grads, *z, dz)?;
                }
                if self.rg(*a) {
                    let mut da = Matrix::zeros(heads, hd);
                    for e in 0..zv.rows() {
                        let zr = zv.row(e);
                        for h in 0..heads {
                            let ge = g.get(e, h);
                            if ge == 0.0 {
                                continue;
                            }
                            for (d, &zz) in da.row_mut(h).iter_mut().zip(&zr[h * hd..(h + 1) * hd]) {
                                *d += ge * zz;
                            }
                        }
                    }
                    self.accumulate(grads, *a, da)?;
                }
            }
            Op::HeadScale(z, alpha) => {
                let zv = self.value(*z);
                let alv = self.value(*alpha);
                let heads = alv.cols();
                let hd = zv.cols() / heads;
                if self.rg(*z) {
                    let mut dz = g.clone();
                    for e in 0..zv.rows() {
                        let row = dz.row_mut(e);
                        for (h, &w) in alv.row(e).iter().enumerate() {
                            for v in &mut row[h * hd..(h + 1) * hd] {
                                *v *= w;
                            }
                        }
                    }
                    self.accumulate(grads, *z, dz)?;
                }
                if self.rg(*alpha) {
                    let mut dal = Matrix::zeros(alv.rows(), heads);
                    for e in 0..zv.rows() {
                        let (gr, zr) = (g.row(e), zv.row(e));
                        for h in 0..heads {
                            let s: f64 = gr[h * hd..(h + 1) * hd]
                                .iter()
                                .zip(&zr[h * hd..(h + 1) * hd])
                                .map(|(a, b)| a * b)
                                .sum();
                            dal.set(e, h, s);
                        }
                    }
                    self.accumulate(grads, *alpha, dal)?;
                }
            }
            Op::SegmentSoftmax(x, segments) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let cols = y.cols();
                    let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = Matrix::zeros(n_seg, cols);
                    for (e, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            dot.set(s, c, dot.get(s, c) + g.get(e, c) * y.get(e, c));
                        }
                    }
                    let mut dx = Matrix::zeros(y.rows(), cols);
                    for (e, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            dx.set(e, c, y.get(e, c) * (g.get(e, c) - dot.get(s, c)));
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::filled(r, c, g.data()[0]))?;
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, g.data()[0] / n))?;
            }
            Op::BceWithLogits(x, targets) => {
                let s = self.value(*x);
                let n = s.data().len().max(1) as f64;
                let scale = g.data()[0] / n;
                let dx = s.zip_map(targets, |s, z| (sigmoid_scalar(s) - z) * scale)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
            } => {
                let x = self.value(*logits);
                let total_w: f64 = weights.iter().sum();
                let scale = g.data()[0] / total_w;
                let mut dx = x.softmax_rows();
                for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    let row = dx.row_mut(i);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * scale;
                    }
                }
                self.accumulate(grads, *logits, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
    }

    /// Central finite differences of `f` w.r.t. every entry of every input.
    fn finite_difference(
        inputs: &[Matrix],
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
        step: f64,
    ) -> Vec<Matrix> {
        let eval = |inputs: &[Matrix]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item().unwrap()
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut grad = Matrix::zeros(m.rows(), m.cols());
                for idx in 0..m.data().len() {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[idx] += step;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[idx] -= step;
                    grad.data_mut()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * step);
                }
                grad
            })
            .collect()
    }

    fn check_gradients(inputs: Vec<Matrix>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let fd = finite_difference(&inputs, f, 1e-5);
        for (v, expected) in vars.iter().zip(&fd) {
            let got = grads.get_or_zeros(*v, expected.shape());
            let diff = got.zip_map(expected, |a, b| a - b).unwrap().norm();
            let scale = expected.norm().max(got.norm()).max(1e-8);
            assert!(diff / scale < 1e-4, "relative error {} too large", diff / scale);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(2, 3, 0.7));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(3, 2));
        let y = tape.sigmoid(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::filled(3, 2, 0.25));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Validation(_))));
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = tape.param(random(&mut rng, 4, 3));
        let b = tape.param(random(&mut rng, 3, 2));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.elu(c);
        let s = tape.sum(d);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(1, 2, 1.0));
        let w = tape.param(Matrix::filled(2, 1, 0.5));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &Matrix::filled(2, 1, 1.0));
    }

    #[test]
    fn mlp_composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            random(&mut rng, 5, 4),
            random(&mut rng, 4, 3),
            random(&mut rng, 1, 3),
            random(&mut rng, 3, 3),
        ];
        check_gradients(inputs, &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row(h, v[2]).unwrap();
            let h = t.tanh(h);
            let o = t.matmul(h, v[3]).unwrap();
            t.softmax_cross_entropy(o, vec![0, 2, 1, 1, 0], vec![1.0, 2.0, 0.5, 1.0, 1.0])
                .unwrap()
        });
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 6 edges into 3 segments, 2 heads of width 2
        let segments = vec![0, 0, 1, 2, 2, 2];
        let inputs = vec![random(&mut rng, 6, 4), random(&mut rng, 2, 2), random(&mut rng, 6, 4)];
        let seg = segments.clone();
        check_gradients(inputs, &move |t, v| {
            let z = t.leaky_relu(v[0], 0.2);
            let e = t.head_dot(z, v[1]).unwrap();
            let alpha = t.segment_softmax(e, seg.clone(), 3).unwrap();
            let msg = t.head_scale(v[2], alpha).unwrap();
            let agg = t.scatter_add_rows(msg, seg.clone(), 3).unwrap();
            let agg = t.elu(agg);
            let picked = t.gather_rows(agg, vec![2, 0, 2]).unwrap();
            let sig = t.sigmoid(picked);
            let scaled = t.mul_const(sig, Matrix::filled(3, 4, 1.5)).unwrap();
            t.mean(scaled)
        });
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        check_gradients(vec![random(&mut rng, 3, 2)], &move |t, v| {
            let s = t.scale(v[0], 3.0);
            t.bce_with_logits(s, targets.clone()).unwrap()
        });
    }

    #[test]
    fn segment_softmax_sums_to_one_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 5, 2);
        let segs = vec![1, 0, 1, 1, 0];
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let y = tape.segment_softmax(a, segs.clone(), 2).unwrap();
        let b = tape.constant(x.map(|v| v + 123.0));
        let y2 = tape.segment_softmax(b, segs.clone(), 2).unwrap();
        let (y, y2) = (tape.value(y).clone(), tape.value(y2).clone());
        assert!(y.max_abs_diff(&y2).unwrap() < 1e-12);
        for c in 0..2 {
            for s in 0..2 {
                let total: f64 = (0..5).filter(|&e| segs[e] == s).map(|e| y.get(e, c)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
