//! Reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a dense `rows × cols` matrix of `f64`. Nodes
//! are appended in evaluation order, so walking the node list backwards is
//! a valid reverse topological order. Parameter reads are recorded with
//! their offset into the flat parameter vector and [`Tape::backward`]
//! scatters their adjoints into a [`GradVector`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{GradVector, LayerSegment, ParamVector};
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param {
        offset: usize,
    },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: Vec<bool>,
        probs: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        keep: Vec<f64>,
    },
    Interleave(Vec<NodeId>),
    AddPositional {
        x: NodeId,
        pos: NodeId,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Mse {
        pred: NodeId,
        target: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Ln(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: Option<usize>,
    training: bool,
    seed: u64,
    rng: ChaCha8Rng,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    /// A tape in training mode; dropout draws from `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_len: None,
            training: true,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A tape with dropout disabled.
    pub fn eval() -> Self {
        let mut t = Self::new(0);
        t.training = false;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The single entry of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Reads one segment of `params` as a `fan_in × fan_out` matrix.
    pub fn param(&mut self, params: &ParamVector, seg: &LayerSegment) -> Result<NodeId> {
        match self.param_len {
            None => self.param_len = Some(params.len()),
            Some(n) if n != params.len() => {
                return Err(Error::config(format!(
                    "tape already bound to a parameter vector of length {n}, got {}",
                    params.len()
                )))
            }
            Some(_) => {}
        }
        if seg.offset + seg.size > params.len() {
            return Err(Error::config(format!(
                "segment {} exceeds parameter vector",
                seg.name
            )));
        }
        let value = Tensor {
            rows: seg.fan_in,
            cols: seg.fan_out,
            data: params.values()[seg.range()].to_vec(),
        };
        Ok(self.push(value, Op::Param { offset: seg.offset }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return Err(Error::config(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let out = matmul(&av.data, &bv.data, av.rows, av.cols, bv.cols);
        let t = Tensor {
            rows: av.rows,
            cols: bv.cols,
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows * bv.cols != xv.cols {
            return Err(Error::config(format!(
                "bias of {} entries does not match {} columns",
                bv.rows * bv.cols,
                xv.cols
            )));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(xv.cols) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let t = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data,
        };
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// `x · W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn binary(&self, a: NodeId, b: NodeId, name: &str) -> Result<(&Tensor, &Tensor)> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::config(format!(
                "{name} shape mismatch: {}x{} vs {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        Ok((av, bv))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary(a, b, "add")?;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary(a, b, "mul")?;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().map(|x| x * factor).collect(),
        };
        self.push(t, Op::Scale(a, factor))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let av = self.value(a);
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(t, op)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut data = av.data.clone();
        for row in data.chunks_exact_mut(av.cols) {
            softmax_in_place(row);
        }
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        self.push(t, Op::Softmax(a))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols;
        if gv.data.len() != d || bv.data.len() != d {
            return Err(Error::config(format!(
                "layer norm parameters must have {d} entries"
            )));
        }
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = vec![0.0; xv.rows];
        let mut out = vec![0.0; xv.data.len()];
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        let t = Tensor {
            rows: xv.rows,
            cols: d,
            data: out,
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Causal multi-head scaled-dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with heads laid out as contiguous
    /// column blocks. `key_valid[b·seq + j]` false hides key `j` of sequence
    /// `b` from every query. A query with no visible key outputs zeros.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: Vec<bool>,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        if !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(Error::config("attention q/k/v shapes differ"));
        }
        if qv.rows != batch * seq || key_valid.len() != batch * seq {
            return Err(Error::config(format!(
                "attention expects {} rows, got {}",
                batch * seq,
                qv.rows
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv.data[(b * seq + i) * d + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if !key_valid[b * seq + j] {
                            continue;
                        }
                        let kj = &kv.data[(b * seq + j) * d + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        if key_valid[b * seq + j] {
                            let e = (scores[j] - max).exp();
                            probs[base + i * seq + j] = e;
                            z += e;
                        }
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        if !key_valid[b * seq + j] {
                            continue;
                        }
                        let p = probs[base + i * seq + j] / z;
                        probs[base + i * seq + j] = p;
                        let vj = &vv.data[(b * seq + j) * d + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let t = Tensor {
            rows: batch * seq,
            cols: d,
            data: out,
        };
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                key_valid,
                probs,
            },
        ))
    }

    /// Inverted dropout; identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if !self.training || p <= 0.0 {
            return x;
        }
        let n = self.value(x).data.len();
        let keep_scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let xv = self.value(x);
        let t = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().zip(&keep).map(|(a, k)| a * k).collect(),
        };
        self.push(t, Op::Dropout { x, keep })
    }

    /// Interleaves rows: output row `r·n + i` is row `r` of `parts[i]`.
    pub fn interleave_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]);
        let (rows, cols) = (first.rows, first.cols);
        for &p in parts {
            let v = self.value(p);
            if v.rows != rows || v.cols != cols {
                return Err(Error::config("interleave parts must share a shape"));
            }
        }
        let n = parts.len();
        let mut data = vec![0.0; rows * cols * n];
        for (i, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for r in 0..rows {
                data[(r * n + i) * cols..][..cols].copy_from_slice(v.row(r));
            }
        }
        let t = Tensor {
            rows: rows * n,
            cols,
            data,
        };
        Ok(self.push(t, Op::Interleave(parts.to_vec())))
    }

    /// Adds `pos` (`[seq, d]`) to every consecutive block of `seq` rows of `x`.
    pub fn add_positional(&mut self, x: NodeId, pos: NodeId) -> Result<NodeId> {
        let (xv, pv) = (self.value(x), self.value(pos));
        if pv.cols != xv.cols || xv.rows % pv.rows != 0 {
            return Err(Error::config(format!(
                "positional table {}x{} incompatible with {}x{}",
                pv.rows, pv.cols, xv.rows, xv.cols
            )));
        }
        let block = pv.data.len();
        let mut data = xv.data.clone();
        for chunk in data.chunks_exact_mut(block) {
            for (o, p) in chunk.iter_mut().zip(&pv.data) {
                *o += p;
            }
        }
        let t = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data,
        };
        Ok(self.push(t, Op::AddPositional { x, pos }))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows) {
            return Err(Error::config(format!(
                "row {bad} out of range for {} rows",
                xv.rows
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * xv.cols);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let t = Tensor {
            rows: rows.len(),
            cols: xv.cols,
            data,
        };
        Ok(self.push(t, Op::GatherRows { x, rows }))
    }

    /// Weighted mean over rows of the summed squared error per row.
    ///
    /// `Σ_r w_r Σ_c (pred − target)² / Σ_r w_r`; rows with weight 0 are
    /// padding. Errors when every weight is zero.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor, weights: &[f64]) -> Result<NodeId> {
        let pv = self.value(pred);
        if !pv.same_shape(target) || weights.len() != pv.rows {
            return Err(Error::config("mse target/weight shape mismatch"));
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(Error::data("every position is padded; loss undefined"));
        }
        let mut total = 0.0;
        for r in 0..pv.rows {
            if weights[r] == 0.0 {
                continue;
            }
            let se: f64 = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += weights[r] * se;
        }
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::Mse {
                pred,
                target: target.data.clone(),
                weights: weights.to_vec(),
                denom,
            },
        ))
    }

    /// Mean cross-entropy of integer labels under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if labels.len() != lv.rows || lv.rows == 0 {
            return Err(Error::config("cross-entropy label count mismatch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols) {
            return Err(Error::config(format!(
                "label {bad} out of range for {} classes",
                lv.cols
            )));
        }
        let mut probs = lv.data.clone();
        let mut total = 0.0;
        for (r, row) in probs.chunks_exact_mut(lv.cols).enumerate() {
            softmax_in_place(row);
            total -= row[labels[r]].max(f64::MIN_POSITIVE).ln();
        }
        let n = lv.rows as f64;
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Natural log of a positive scalar node.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.data.len() != 1 {
            return Err(Error::config("ln expects a scalar node"));
        }
        let x = av.data[0];
        if !(x > 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.push(Tensor::scalar(x.ln()), Op::Ln(a)))
    }

    /// Gradient of the scalar `loss` with respect to every parameter read.
    pub fn backward(&self, loss: NodeId) -> Result<GradVector> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward op".into()));
        }
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::State("backward requires a scalar loss node".into()));
        }
        let mut grad = GradVector::zeros(self.param_len.unwrap_or(0));
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (dst, src) in grad.values[*offset..][..g.len()].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows, av.cols, bv.cols);
                    let ga = acc(&mut adj, *a, n * k);
                    matmul_abt_acc(&g, &bv.data, ga, n, m, k);
                    let gb = acc(&mut adj, *b, k * m);
                    matmul_atb_acc(&av.data, &g, gb, n, k, m);
                }
                Op::AddBias(x, b) => {
                    let cols = node.value.cols;
                    add_into(acc(&mut adj, *x, g.len()), &g);
                    let gb = acc(&mut adj, *b, cols);
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g);
                    add_into(acc(&mut adj, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let ga = acc(&mut adj, *a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (d, gi) in ga.iter_mut().zip(&g) {
                        *d += gi * f;
                    }
                }
                Op::Relu(a) => {
                    let x = &self.value(*a).data;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = &self.value(*a).data;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *d += gi * gelu_grad(*xi);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((d, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Softmax(a) => {
                    let cols = node.value.cols;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((gr, yr), dr) in g
                        .chunks_exact(cols)
                        .zip(node.value.data.chunks_exact(cols))
                        .zip(ga.chunks_exact_mut(cols))
                    {
                        let s = dot(gr, yr);
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = node.value.cols;
                    let rows = node.value.rows;
                    let gv = &self.value(*gamma).data;
                    {
                        let gg = acc(&mut adj, *gamma, d);
                        for r in 0..rows {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    {
                        let gbeta = acc(&mut adj, *beta, d);
                        for row in g.chunks_exact(d) {
                            add_into(gbeta, row);
                        }
                    }
                    let gx = acc(&mut adj, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv[c];
                        }
                        let xh = &xhat[r * d..][..d];
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    key_valid,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let d = node.value.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let qd = &self.value(*q).data;
                    let kd = &self.value(*k).data;
                    let vd = &self.value(*v).data;
                    let n = batch * seq * d;
                    let mut gq = vec![0.0; n];
                    let mut gk = vec![0.0; n];
                    let mut gv = vec![0.0; n];
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = (b * heads + h) * seq * seq;
                            for i in 0..seq {
                                let go = &g[(b * seq + i) * d + h * dh..][..dh];
                                let mut sum = 0.0;
                                for j in 0..=i {
                                    if !key_valid[b * seq + j] {
                                        continue;
                                    }
                                    let p = probs[base + i * seq + j];
                                    let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                                    dp[j] = dot(go, vj);
                                    sum += p * dp[j];
                                    let gvj = &mut gv[(b * seq + j) * d + h * dh..][..dh];
                                    for (a, o) in gvj.iter_mut().zip(go) {
                                        *a += p * o;
                                    }
                                }
                                for j in 0..=i {
                                    if !key_valid[b * seq + j] {
                                        continue;
                                    }
                                    let p = probs[base + i * seq + j];
                                    let ds = p * (dp[j] - sum) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let qo = (b * seq + i) * d + h * dh;
                                    let ko = (b * seq + j) * d + h * dh;
                                    for c in 0..dh {
                                        gq[qo + c] += ds * kd[ko + c];
                                        gk[ko + c] += ds * qd[qo + c];
                                    }
                                }
                            }
                        }
                    }
                    add_into(acc(&mut adj, *q, n), &gq);
                    add_into(acc(&mut adj, *k, n), &gk);
                    add_into(acc(&mut adj, *v, n), &gv);
                }
                Op::Dropout { x, keep } => {
                    let gx = acc(&mut adj, *x, g.len());
                    for ((d, gi), k) in gx.iter_mut().zip(&g).zip(keep) {
                        *d += gi * k;
                    }
                }
                Op::Interleave(parts) => {
                    let n = parts.len();
                    let cols = node.value.cols;
                    let rows = node.value.rows / n;
                    for (i, p) in parts.iter().enumerate() {
                        let gp = acc(&mut adj, *p, rows * cols);
                        for r in 0..rows {
                            add_into(&mut gp[r * cols..][..cols], &g[(r * n + i) * cols..][..cols]);
                        }
                    }
                }
                Op::AddPositional { x, pos } => {
                    add_into(acc(&mut adj, *x, g.len()), &g);
                    let block = self.value(*pos).data.len();
                    let gp = acc(&mut adj, *pos, block);
                    for chunk in g.chunks_exact(block) {
                        add_into(gp, chunk);
                    }
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let cols = xv.cols;
                    let gx = acc(&mut adj, *x, xv.data.len());
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * cols..][..cols], &g[i * cols..][..cols]);
                    }
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                    denom,
                } => {
                    let pv = self.value(*pred);
                    let cols = pv.cols;
                    let pd = &pv.data;
                    let gp = acc(&mut adj, *pred, pd.len());
                    for (r, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        let f = g[0] * 2.0 * w / denom;
                        for c in 0..cols {
                            let i = r * cols + c;
                            gp[i] += f * (pd[i] - target[i]);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let cols = self.value(*logits).cols;
                    let n = labels.len() as f64;
                    let gl = acc(&mut adj, *logits, probs.len());
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let y = if c == l { 1.0 } else { 0.0 };
                            gl[r * cols + c] += g[0] * (probs[r * cols + c] - y) / n;
                        }
                    }
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data[0];
                    acc(&mut adj, *a, 1)[0] += g[0] / x;
                }
            }
        }
        Ok(grad)
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    adj[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (ac, bc) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    let mut lanes = [0.0f64; 4];
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `[n,k] · [k,m]`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..][..m];
        for (p, &aip) in a[i * k..][..k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, bv) in ci.iter_mut().zip(&b[p * m..][..m]) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `ga[n,k] += g[n,m] · b[k,m]ᵀ`.
fn matmul_abt_acc(g: &[f64], b: &[f64], ga: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let gi = &g[i * m..][..m];
        for p in 0..k {
            ga[i * k + p] += dot(gi, &b[p * m..][..m]);
        }
    }
}

/// `gb[k,m] += a[n,k]ᵀ · g[n,m]`.
fn matmul_atb_acc(a: &[f64], g: &[f64], gb: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let gi = &g[i * m..][..m];
        for (p, &aip) in a[i * k..][..k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, gv) in gb[p * m..][..m].iter_mut().zip(gi) {
                *d += aip * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::params::{Layout, SegmentKind};

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut tape = Tape::eval();
        let x = tape.input(t(1, 3, &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data, vec![0.0, 0.0, 2.0]);
        let z = tape.input(t(1, 2, &[0.0, 0.0]));
        let s = tape.softmax(z);
        assert_eq!(tape.value(s).data, vec![0.5, 0.5]);
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut tape = Tape::eval();
        let q = tape.input(t(1, 2, &[0.3, -1.2]));
        let k = tape.input(t(1, 2, &[2.0, 0.7]));
        let v = tape.input(t(1, 2, &[5.0, -3.0]));
        let o = tape.causal_attention(q, k, v, 1, 1, 1, vec![true]).unwrap();
        assert_eq!(tape.value(o).data, vec![5.0, -3.0]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut tape = Tape::eval();
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn ln_of_non_positive_is_domain_error() {
        let mut tape = Tape::eval();
        let a = tape.input(Tensor::scalar(0.0));
        assert!(matches!(tape.ln(a), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::eval();
        assert!(matches!(tape.backward(NodeId(0)), Err(Error::State(_))));
    }

    #[test]
    fn identity_read_and_constant_loss() {
        let mut layout = Layout::new();
        let seg = layout.push("w", 1, 4, SegmentKind::LinearWeight);
        let params = ParamVector::from_values(layout.clone(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();

        let mut tape = Tape::eval();
        let w = tape.param(&params, layout.segment(seg)).unwrap();
        let pick = tape.input(t(4, 1, &[0.0, 0.0, 1.0, 0.0]));
        let loss = tape.matmul(w, pick).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.values, vec![0.0, 0.0, 1.0, 0.0]);

        let mut tape = Tape::eval();
        let _w = tape.param(&params, layout.segment(seg)).unwrap();
        let c = tape.input(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.values, vec![0.0; 4]);
    }

    #[test]
    fn mse_all_padded_is_data_error() {
        let mut tape = Tape::eval();
        let p = tape.input(Tensor::zeros(2, 2));
        let target = Tensor::zeros(2, 2);
        assert!(matches!(
            tape.mse(p, &target, &[0.0, 0.0]),
            Err(Error::Data { .. })
        ));
    }

    #[test]
    fn dropout_is_seeded() {
        let run = |seed| {
            let mut tape = Tape::new(seed);
            let x = tape.input(Tensor::new(1, 64, vec![1.0; 64]).unwrap());
            let d = tape.dropout(x, 0.5);
            tape.value(d).data.clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let mut tape = Tape::eval();
        let x = tape.input(Tensor::new(1, 4, vec![1.0; 4]).unwrap());
        assert_eq!(tape.dropout(x, 0.5), x);
    }
}
