//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its value plus whatever the backward rule needs; nodes are
//! never removed. [`Tape::backward`] walks the nodes in strict reverse
//! creation order and returns a [`Gradients`] table indexed by [`Var`].

use std::ops::Range;
use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Tensor<S>,
        probs: Vec<S>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatCols(Var, Var),
    BlockMean {
        x: Var,
        block: usize,
    },
    Attention(Box<AttentionSaved<S>>),
    WeightedSum {
        x: Var,
        weights: Tensor<S>,
    },
}

struct AttentionSaved<S> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    ranges: Vec<Range<usize>>,
    /// Softmax weights, row-major by (query row, head, key).
    probs: Vec<S>,
    offsets: Vec<usize>,
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Numerically stable softmax of `scores` in place.
pub(crate) fn softmax_in_place<S: Scalar>(scores: &mut [S]) {
    let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a shared tensor (typically a model parameter) without copying it.
    pub fn param(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn matrix_dims(&self, var: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(var);
        if t.rank() != 2 {
            return Err(Error::dim(format!(
                "{what}: expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), needs, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs, "add")
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.len() != tx.cols() {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match rows of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.clone();
        let cols = tx.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias(x, bias), needs, "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v <= S::zero() {
                *v = S::zero();
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs, "relu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), needs, "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d == 0 || tg.len() != d || tb.len() != d {
            return Err(Error::dim(format!(
                "layer_norm: width {d} with gain {:?} and bias {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let eps = S::of(eps);
        let dn = S::of(d as f64);
        let mut out = Tensor::zeros(tx.shape());
        let mut xhat = vec![S::zero(); tx.len()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let istd = S::one() / (var + eps).sqrt();
            inv_std.push(istd);
            let base = r * d;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[base + c] = h;
                out.data_mut()[base + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
            "layer_norm",
        )
    }

    /// Mean over rows of the categorical cross-entropy between `softmax(logits)`
    /// and one-hot `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor<S>) -> Result<Var> {
        let tz = self.value(logits);
        if tz.shape() != labels.shape() || tz.rank() != 2 {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?} vs labels {:?}",
                tz.shape(),
                labels.shape()
            )));
        }
        let m = tz.cols();
        for (r, row) in labels.data().chunks(m).enumerate() {
            let ones = row.iter().filter(|&&v| v == S::one()).count();
            let zeros = row.iter().filter(|&&v| v == S::zero()).count();
            if ones != 1 || ones + zeros != m {
                return Err(Error::input(format!("label row {r} is not one-hot")));
            }
        }
        let rows = tz.rows();
        let mut probs = tz.data().to_vec();
        let mut total = S::zero();
        for (r, (zrow, prow)) in tz.data().chunks(m).zip(probs.chunks_mut(m)).enumerate() {
            let max = zrow.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + zrow.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
            let yz: S = zrow
                .iter()
                .zip(labels.row(r))
                .map(|(&z, &y)| y * z)
                .sum();
            total += lse - yz;
            softmax_in_place(prow);
        }
        let loss = total / S::of(rows.max(1) as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
                probs,
            },
            needs,
            "cross_entropy",
        )
    }

    /// Builds a matrix whose row `r` is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![index.len(), cols], data)?;
        let needs = self.needs(x);
        self.push(out, Op::GatherRows { x, index }, needs, "gather_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dim(format!(
                "concat_cols: {} rows vs {} rows",
                ta.rows(),
                tb.rows()
            )));
        }
        let (p, q) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![ta.rows(), p + q], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a, b), needs, "concat_cols")
    }

    /// Averages consecutive groups of `block` rows.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Result<Var> {
        let tx = self.value(x);
        if block == 0 || !tx.rows().is_multiple_of(block) {
            return Err(Error::dim(format!(
                "block_mean: {} rows not divisible into blocks of {block}",
                tx.rows()
            )));
        }
        let cols = tx.cols();
        let blocks = tx.rows() / block;
        let scale = S::one() / S::of(block as f64);
        let mut out = Tensor::zeros(&[blocks, cols]);
        for b in 0..blocks {
            let dst = &mut out.data_mut()[b * cols..(b + 1) * cols];
            for r in 0..block {
                for (o, &v) in dst.iter_mut().zip(tx.row(b * block + r)) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o = *o * scale;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::BlockMean { x, block }, needs, "block_mean")
    }

    /// Multi-head scaled dot-product attention where query row `i` attends to
    /// the key/value rows in `ranges[i]`.
    ///
    /// Columns of `q`, `k`, `v` are split into `heads` equal slices. An empty
    /// range yields a zero output row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        ranges: Vec<Range<usize>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if ranges.len() != tq.rows() {
            return Err(Error::dim(format!(
                "attention: {} ranges for {} query rows",
                ranges.len(),
                tq.rows()
            )));
        }
        if let Some(r) = ranges.iter().find(|r| r.end > tk.rows() || r.start > r.end) {
            return Err(Error::dim(format!(
                "attention: key range {r:?} outside {} rows",
                tk.rows()
            )));
        }
        let ds = d / heads;
        let scale = S::one() / S::of(ds as f64).sqrt();
        let mut out = Tensor::zeros(&[tq.rows(), d]);
        let mut offsets = Vec::with_capacity(ranges.len());
        let total: usize = ranges.iter().map(|r| r.len() * heads).sum();
        let mut probs = Vec::with_capacity(total);
        for (i, range) in ranges.iter().enumerate() {
            offsets.push(probs.len());
            let qi = tq.row(i);
            for h in 0..heads {
                let cols = h * ds..(h + 1) * ds;
                let start = probs.len();
                for j in range.clone() {
                    let kj = &tk.row(j)[cols.clone()];
                    let dot: S = qi[cols.clone()].iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    probs.push(dot * scale);
                }
                let p = &mut probs[start..];
                if p.is_empty() {
                    continue;
                }
                softmax_in_place(p);
                let dst = &mut out.data_mut()[i * d + h * ds..i * d + (h + 1) * ds];
                for (w, j) in p.iter().zip(range.clone()) {
                    for (o, &vv) in dst.iter_mut().zip(&tv.row(j)[cols.clone()]) {
                        *o += *w * vv;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                ranges,
                probs,
                offsets,
            })),
            needs,
            "attention",
        )
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node:
    /// `result[row][head]` holds the distribution over that row's key range.
    pub fn attention_weights(&self, var: Var) -> Option<Vec<Vec<Vec<S>>>> {
        let Op::Attention(saved) = &self.nodes[var.0].op else {
            return None;
        };
        Some(
            saved
                .ranges
                .iter()
                .zip(&saved.offsets)
                .map(|(r, &off)| {
                    (0..saved.heads)
                        .map(|h| saved.probs[off + h * r.len()..off + (h + 1) * r.len()].to_vec())
                        .collect()
                })
                .collect(),
        )
    }

    /// Scalar `sum(x * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(Error::dim(format!(
                "weighted_sum: {} values vs {} weights",
                tx.len(),
                weights.len()
            )));
        }
        let s: S = tx.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, needs, "weighted_sum")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.needs_grad && matches!(node.op, Op::Leaf) && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], var: Var, delta: Tensor<S>) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G * B^T
                    let mut ga = Tensor::zeros(&[m, k]);
                    S::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        S::zero(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let mut gb = Tensor::zeros(&[k, n]);
                    S::gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        S::zero(),
                        gb.data_mut(),
                        n as isize,
                        1,
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(&[cols]);
                    for row in g.data().chunks(cols) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= S::zero() {
                        *o = S::zero();
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut gx = Tensor::zeros(y.shape());
                for ((dst, yr), gr) in gx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dst[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let d = tg.len();
                let dn = S::of(d as f64);
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    let mut gxh = vec![S::zero(); d];
                    for (r, istd) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let mut sum = S::zero();
                        let mut sum_h = S::zero();
                        for c in 0..d {
                            gxh[c] = g.data()[base + c] * tg.data()[c];
                            sum += gxh[c];
                            sum_h += gxh[c] * xhat[base + c];
                        }
                        let mean = sum / dn;
                        let mean_h = sum_h / dn;
                        for c in 0..d {
                            gx.data_mut()[base + c] =
                                *istd * (gxh[c] - mean - xhat[base + c] * mean_h);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = Tensor::zeros(&[d]);
                    let mut gb = Tensor::zeros(&[d]);
                    for (r, row) in g.data().chunks(d).enumerate() {
                        for c in 0..d {
                            gg.data_mut()[c] += row[c] * xhat[r * d + c];
                            gb.data_mut()[c] += row[c];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let tz = self.value(*logits);
                let scale = g.item() / S::of(tz.rows().max(1) as f64);
                let data = probs
                    .iter()
                    .zip(labels.data())
                    .map(|(&p, &y)| (p - y) * scale)
                    .collect();
                let gz = Tensor::new(tz.shape().to_vec(), data).expect("same shape");
                self.accumulate(grads, *logits, gz);
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * cols..(src + 1) * cols];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    ga.extend_from_slice(&g.row(r)[..p]);
                    gb.extend_from_slice(&g.row(r)[p..]);
                }
                let ga = Tensor::new(self.value(*a).shape().to_vec(), ga).expect("same shape");
                let gb = Tensor::new(self.value(*b).shape().to_vec(), gb).expect("same shape");
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BlockMean { x, block } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let scale = S::one() / S::of(*block as f64);
                let mut gx = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    let src = g.row(r / block);
                    for (o, &v) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *o = v * scale;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                let data = weights.data().iter().map(|&w| w * s).collect();
                let gx = Tensor::new(self.value(*x).shape().to_vec(), data).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
        }
    }

    fn attention_backward(
        &self,
        saved: &AttentionSaved<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (tq, tk, tv) = (
            self.value(saved.q),
            self.value(saved.k),
            self.value(saved.v),
        );
        let d = tq.cols();
        let ds = d / saved.heads;
        let scale = S::one() / S::of(ds as f64).sqrt();
        let mut gq = Tensor::zeros(tq.shape());
        let mut gk = Tensor::zeros(tk.shape());
        let mut gv = Tensor::zeros(tv.shape());
        let mut dscore = Vec::new();
        for (i, range) in saved.ranges.iter().enumerate() {
            let len = range.len();
            if len == 0 {
                continue;
            }
            let gi = g.row(i);
            for h in 0..saved.heads {
                let cols = h * ds..(h + 1) * ds;
                let p = &saved.probs[saved.offsets[i] + h * len..saved.offsets[i] + (h + 1) * len];
                dscore.clear();
                let mut weighted = S::zero();
                for (w, j) in p.iter().zip(range.clone()) {
                    let vj = &tv.row(j)[cols.clone()];
                    let dp: S = gi[cols.clone()].iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dscore.push(dp);
                    weighted += *w * dp;
                    let dst = &mut gv.data_mut()[j * d + h * ds..j * d + (h + 1) * ds];
                    for (o, &gg) in dst.iter_mut().zip(&gi[cols.clone()]) {
                        *o += *w * gg;
                    }
                }
                for ((ds_j, w), j) in dscore.iter_mut().zip(p).zip(range.clone()) {
                    let s = *w * (*ds_j - weighted) * scale;
                    let kj = &tk.row(j)[cols.clone()];
                    let qi = &tq.row(i)[cols.clone()];
                    let gqi = &mut gq.data_mut()[i * d + h * ds..i * d + (h + 1) * ds];
                    for (o, &kv) in gqi.iter_mut().zip(kj) {
                        *o += s * kv;
                    }
                    let gkj = &mut gk.data_mut()[j * d + h * ds..j * d + (h + 1) * ds];
                    for (o, &qv) in gkj.iter_mut().zip(qi) {
                        *o += s * qv;
                    }
                }
            }
        }
        self.accumulate(grads, saved.q, gq);
        self.accumulate(grads, saved.k, gk);
        self.accumulate(grads, saved.v, gv);
    }
}
