//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the tape visits every node
//! after all of its consumers. Only nodes that transitively depend on a leaf
//! created with `requires_grad = true` receive gradients.

use std::sync::Arc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    /// When false the rhs is a single matrix shared by every batch entry.
    batched_b: bool,
}

impl MatMulDims {
    fn a_strides(&self) -> (usize, usize) {
        if self.trans_a {
            (1, self.m)
        } else {
            (self.k, 1)
        }
    }

    fn b_strides(&self) -> (usize, usize) {
        if self.trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, dims: MatMulDims },
    AddBias { x: Var, bias: Var },
    AddBroadcast { x: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    Relu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatRows { a: Var, b: Var },
    SliceRows { x: Var, start: usize },
    PrependToken { x: Var, token: Var },
    SelectToken { x: Var, token: usize, seq: usize },
    Reshape { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`.
    ///
    /// Returns zeros when `v` does not influence the output, and `None` when
    /// `v` was not tracked (no `requires_grad` leaf upstream).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let shape = &self.shapes[v.0];
        self.grads[v.0].as_ref().map(|g| Tensor::from_vec(shape, g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0].take().map(|g| Tensor::from_vec(&shape, g))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are only propagated towards leaves that request them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x @ w^T + b` over the last dimension of `x`, with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let fan_in = *xs.last().expect("linear input must have rank >= 1");
        assert_eq!(ws[1], fan_in, "linear weight/input mismatch");
        let rows = xs.iter().product::<usize>() / fan_in;
        let y = self.matmul_raw(x, w, 1, rows, fan_in, ws[0], false, true, false);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[0];
        let y = self.reshape(y, &out_shape);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Batched matmul of `[batch, m, k] x [batch, k, n]`, optionally transposing
    /// either operand's stored layout.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-D");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-D");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        self.matmul_raw(a, b, sa[0], m, k, n, trans_a, trans_b, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_raw(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
        batched_b: bool,
    ) -> Var {
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
            batched_b,
        };
        let (rsa, csa) = dims.a_strides();
        let (rsb, csb) = dims.b_strides();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if batched_b { bi * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    (&av[a_off..a_off + m * k], rsa, csa),
                    (&bv[b_off..b_off + k * n], rsb, csb),
                    0.0,
                    (&mut out[bi * m * n..(bi + 1) * m * n], n, 1),
                );
            }
        }
        let shape = if batched_b { vec![batch, m, n] } else { vec![m, n] };
        self.push(
            Tensor::from_vec(&shape, out),
            Op::MatMul { a, b, dims },
            &[a, b],
        )
    }

    /// Adds a `[d]` bias along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let d = self.value(bias).len();
        assert_eq!(*self.shape(x).last().unwrap(), d, "bias size mismatch");
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Adds `b` to every leading-dimension slice of `x` (`b.shape == x.shape[1..]`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.shape(x)[1..], *self.shape(b), "broadcast shape mismatch");
        let d = self.value(b).len();
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        self.push(out, Op::AddBroadcast { x, b }, &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(xv.shape());
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        {
            let o = out.data_mut();
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    o[r * d + j] = h * gv[j] + bv[j];
                }
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// `out.data[i] = x.data[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather shape mismatch");
        let xv = self.value(x).data();
        let data: Vec<f64> = index.iter().map(|&i| xv[i]).collect();
        self.push(Tensor::from_vec(shape, data), Op::Gather { x, index }, &[x])
    }

    /// Elementwise clamp. The subgradient passes through on the closed interval
    /// `[lo, hi]` and is zero strictly outside it.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::concat_rows(self.value(a), self.value(b));
        self.push(out, Op::ConcatRows { a, b }, &[a, b])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    /// Prepends a `[d]` token to every sequence of a `[batch, seq, d]` tensor.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let d = s[2];
        assert_eq!(self.value(token).len(), d);
        let xv = self.value(x).data();
        let tv = self.value(token).data();
        let mut data = Vec::with_capacity(s[0] * (s[1] + 1) * d);
        for b in 0..s[0] {
            data.extend_from_slice(tv);
            data.extend_from_slice(&xv[b * s[1] * d..(b + 1) * s[1] * d]);
        }
        let out = Tensor::from_vec(&[s[0], s[1] + 1, d], data);
        self.push(out, Op::PrependToken { x, token }, &[x, token])
    }

    /// Picks sequence position `token` from `[batch, seq, d]`, giving `[batch, d]`.
    pub fn select_token(&mut self, x: Var, token: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (seq, d) = (s[1], s[2]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * d);
        for b in 0..s[0] {
            let off = (b * seq + token) * d;
            data.extend_from_slice(&xv[off..off + d]);
        }
        let out = Tensor::from_vec(&[s[0], d], data);
        self.push(out, Op::SelectToken { x, token, seq }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Mean cross-entropy of `[n, classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], labels.len(), "label count mismatch");
        let k = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            assert!(y < k, "label {y} out of range for {k} classes");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let n = labels.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Tracked nodes unreachable from the output still report a zero gradient.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => self.backprop_matmul(*a, *b, dims, g, grads),
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
                let d = self.value(*bias).len();
                if let Some(gb) = self.accum(grads, *bias) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
                let d = self.value(*b).len();
                if let Some(gb) = self.accum(grads, *b) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.accum(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((o, &v), &gy) in gx.iter_mut().zip(xv).zip(g) {
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        *o += gy * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((o, &v), &gy) in gx.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *o += gy;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.accum(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *beta) {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((orow, yrow), grow) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (&i, &gy) in index.iter().zip(g) {
                        gx[i] += gy;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((o, &v), &gy) in gx.iter_mut().zip(xv).zip(g) {
                        if v >= *lo && v <= *hi {
                            *o += gy;
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).len();
                if let Some(ga) = self.accum(grads, *a) {
                    add_into(ga, &g[..na]);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    add_into(gb, &g[na..]);
                }
            }
            Op::SliceRows { x, start } => {
                let row = self.value(*x).row_len();
                if let Some(gx) = self.accum(grads, *x) {
                    let off = start * row;
                    add_into(&mut gx[off..off + g.len()], g);
                }
            }
            Op::PrependToken { x, token } => {
                let s = self.shape(*x).to_vec();
                let (batch, seq, d) = (s[0], s[1], s[2]);
                if let Some(gt) = self.accum(grads, *token) {
                    for b in 0..batch {
                        let off = b * (seq + 1) * d;
                        add_into(gt, &g[off..off + d]);
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    for b in 0..batch {
                        let src = b * (seq + 1) * d + d;
                        add_into(&mut gx[b * seq * d..(b + 1) * seq * d], &g[src..src + seq * d]);
                    }
                }
            }
            Op::SelectToken { x, token, seq } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(gx) = self.accum(grads, *x) {
                    for (b, grow) in g.chunks(d).enumerate() {
                        let off = (b * seq + token) * d;
                        add_into(&mut gx[off..off + d], grow);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len().max(1) as f64;
                if let Some(gl) = self.accum(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == y { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                }
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        dims: &MatMulDims,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let MatMulDims {
            batch,
            m,
            k,
            n,
            batched_b,
            ..
        } = *dims;
        let (rsa, csa) = dims.a_strides();
        let (rsb, csb) = dims.b_strides();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if let Some(ga) = self.accum(grads, a) {
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if batched_b { bi * k * n } else { 0 };
                // dA (m x k) = dC (m x n) * B^T (n x k)
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    (&g[bi * m * n..(bi + 1) * m * n], n, 1),
                    (&bv[b_off..b_off + k * n], csb, rsb),
                    1.0,
                    (&mut ga[a_off..a_off + m * k], rsa, csa),
                );
            }
        }
        if let Some(gb) = self.accum(grads, b) {
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if batched_b { bi * k * n } else { 0 };
                // dB (k x n) = A^T (k x m) * dC (m x n)
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    (&av[a_off..a_off + m * k], csa, rsa),
                    (&g[bi * m * n..(bi + 1) * m * n], n, 1),
                    1.0,
                    (&mut gb[b_off..b_off + k * n], rsb, csb),
                );
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder `f`.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap();
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(q, t)| {
                            let mut t = t.clone();
                            if q == i {
                                t.data_mut()[j] += delta;
                            }
                            g.leaf(t, false)
                        })
                        .collect();
                    let o = f(&mut g, &vs);
                    g.value(o).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} entry {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Contracts a tensor to a scalar with fixed random weights.
    fn contract(g: &mut Graph, x: Var, seed: u64) -> Var {
        let n = g.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&[1, n], &mut rng));
        let flat = g.reshape(x, &[1, n]);
        let y = g.linear(flat, w, None);
        g.reshape(y, &[1])
    }

    #[test]
    fn linear_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]));
                contract(g, y, 9)
            },
        );
    }

    #[test]
    fn bmm_transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
            check(vec![random(&sa, &mut rng), random(&sb, &mut rng)], move |g, v| {
                let y = g.bmm(v[0], v[1], ta, tb);
                contract(g, y, 3)
            });
        }
    }

    #[test]
    fn nonlinearity_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&[2, 6], &mut rng)], |g, v| {
            let y = g.gelu(v[0]);
            let y = g.softmax(y);
            contract(g, y, 4)
        });
        check(
            vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]);
                contract(g, y, 5)
            },
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![random(&[2, 3, 4], &mut rng), random(&[4], &mut rng), random(&[4, 4], &mut rng)],
            |g, v| {
                let y = g.prepend_token(v[0], v[1]);
                let y = g.add_broadcast(y, v[2]);
                let t = g.select_token(y, 1);
                let s = g.slice_rows(y, 1, 2);
                let c = g.concat_rows(s, y);
                let idx = Arc::new(vec![0, 5, 5, 17, 30, 2]);
                let gth = g.gather(c, idx, &[2, 3]);
                let a = contract(g, gth, 6);
                let b = contract(g, t, 7);
                let b = g.scale(b, 0.5);
                g.add(a, b)
            },
        );
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&[4, 3], &mut rng)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 1]));
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 10]));
        let ce = g.cross_entropy(l, &[3, 7]);
        assert!((g.value(ce).data()[0] - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clamp_subgradient_is_zero_outside() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.5, 2.0]), true);
        let y = g.clamp(x, -1.0, 1.0);
        let s = contract(&mut g, y, 8);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert_eq!(gx.data()[3], 0.0);
        assert!(gx.data()[1] != 0.0 && gx.data()[2] != 0.0);
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 2], 1.0), true);
        let x2 = g.reshape(x, &[1, 2]);
        let y = g.linear(x2, w, None);
        let y = g.reshape(y, &[1]);
        let grads = g.backward(y);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }

}
