//! A small reverse-mode tape over [`Mat`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse iteration is a valid topological order for
//! the backward sweep. Parameters are pulled from a [`ParamStore`] once per
//! tape and cached, so every use of a parameter within one pass refers to
//! the same node.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_strided, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Gelu(Var),
    Silu(Var),
    Log(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<Mat> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    StraightThrough { probs: Var },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of the given shape when `v` is unreachable.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.wrt(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }

    /// Gradients of every parameter loaded into the tape, by parameter id.
    /// Parameters that did not receive a gradient are omitted.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads[v.0].as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on {:?}", m.shape());
        m.data[0]
    }

    /// Attention weights recorded by an [`Tape::attention`] node, one
    /// `queries × keys` matrix per head.
    pub fn attention_weights(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Parameter ids loaded into this tape, with their nodes.
    pub fn loaded_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Value-transparent copy with no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Mat::matmul_t(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows, 1, "add_row bias must be a row");
        assert_eq!(xv.cols, bv.cols, "add_row width");
        let mut value = xv.clone();
        for r in 0..value.rows {
            for (o, b) in value.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddRow { x, bias }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = scale * *v + shift);
        let ng = self.ng(x);
        self.push(value, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| f(*v)).collect();
        let value = Mat::from_vec(xv.rows, xv.cols, data);
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.cols, xv.cols, "layer_norm gamma width");
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut value = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                *xhat.at_mut(r, c) = h;
                *value.at_mut(r, c) = h * g.data[c] + b.data[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q [nq×d]`, `k [nk×d]`, `v [nk×d]`; heads split the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(heads > 0 && d % heads == 0, "attention: dim {d} not divisible by {heads} heads");
        assert_eq!(kv.cols, d, "attention key width");
        assert_eq!(vv.cols, d, "attention value width");
        assert_eq!(kv.rows, vv.rows, "attention key/value length");
        let (nq, nk) = (qv.rows, kv.rows);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(nq, d);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut s = Mat::zeros(nq, nk);
            // s = q_h · k_hᵀ
            gemm_strided(
                nq, dh, nk, scale, &qv.data[off..], d, 1, &kv.data[off..], 1, d, 0.0, &mut s.data, nk, 1,
            );
            for r in 0..nq {
                softmax_in_place(s.row_mut(r));
            }
            // out_h = a · v_h
            gemm_strided(
                nq, nk, dh, 1.0, &s.data, nk, 1, &vv.data[off..], d, 1, 0.0, &mut out.data[off..], d, 1,
            );
            weights.push(s);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width");
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols height");
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros(idx.len(), xv.cols);
        for (o, &i) in idx.iter().enumerate() {
            assert!(i < xv.rows, "gather_rows index {i} >= {}", xv.rows);
            value.row_mut(o).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Row-major reshape; the element order is unchanged.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape {:?} -> {rows}x{cols}", xv.shape());
        let value = Mat::from_vec(rows, cols, xv.data.clone());
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Forward value is `hard` exactly; the backward pass routes the incoming
    /// gradient unchanged to `probs`. This is `hard + probs − SG(probs)`
    /// without the rounding of evaluating that sum.
    pub fn straight_through(&mut self, probs: Var, hard: Mat) -> Var {
        assert_eq!(self.value(probs).shape(), hard.shape(), "straight_through shape");
        let ng = self.ng(probs);
        self.push(hard, Op::StraightThrough { probs }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let s = m.sum() / m.len() as f64;
        let ng = self.ng(x);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Mean(x), ng)
    }

    /// Sums each row: `[r×c] -> [r×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let value = Mat::from_vec(m.rows, 1, data);
        let ng = self.ng(x);
        self.push(value, Op::SumCols(x), ng)
    }

    /// Mean binary cross-entropy of `logits [n×1]` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len(), "bce label count");
        let n = labels.len() as f64;
        let loss = lv
            .data
            .iter()
            .zip(labels)
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Grads { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Const | Op::Input | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    // C = op(A) op(B): dop(A) = G op(B)ᵀ
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    if ta {
                        gemm_acc(bv, tb, g, true, &mut ga, 1.0);
                    } else {
                        gemm_acc(g, false, bv, !tb, &mut ga, 1.0);
                    }
                    self.acc(grads, a, ga);
                }
                if self.ng(b) {
                    // dop(B) = op(A)ᵀ G
                    let mut gb = Mat::zeros(bv.rows, bv.cols);
                    if tb {
                        gemm_acc(g, true, av, ta, &mut gb, 1.0);
                    } else {
                        gemm_acc(av, !ta, g, false, &mut gb, 1.0);
                    }
                    self.acc(grads, b, gb);
                }
            }
            &Op::AddRow { x, bias } => {
                if self.ng(bias) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, bias, gb);
                }
                self.acc(grads, x, g.clone());
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                if self.ng(b) {
                    let mut gb = g.clone();
                    gb.scale(-1.0);
                    self.acc(grads, b, gb);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    self.acc(grads, a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.ng(b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    self.acc(grads, b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            &Op::Affine { x, scale } => {
                let mut gx = g.clone();
                gx.scale(scale);
                self.acc(grads, x, gx);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(gy, &v)| {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        gy * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                self.acc(grads, x, Mat::from_vec(g.rows, g.cols, d));
            }
            &Op::Silu(x) => {
                let xv = self.value(x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(gy, &v)| {
                        let s = sigmoid(v);
                        gy * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, x, Mat::from_vec(g.rows, g.cols, d));
            }
            &Op::Log(x) => {
                let xv = self.value(x);
                let d = g.data.iter().zip(&xv.data).map(|(gy, v)| gy / v).collect();
                self.acc(grads, x, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gamma);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = Mat::zeros(1, cols);
                    let mut gb = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.at(r, c) * xhat.at(r, c);
                            gb.data[c] += g.at(r, c);
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gb);
                }
                if self.ng(*x) {
                    let mut gx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = g.at(r, c) * gv.data[c];
                            m1 += dxh;
                            m2 += dxh * xhat.at(r, c);
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let dxh = g.at(r, c) * gv.data[c];
                            *gx.at_mut(r, c) = rstd[r] * (dxh - m1 - xhat.at(r, c) * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            &Op::SoftmaxRows(x) => {
                let mut gx = Mat::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    softmax_backward(out.row(r), g.row(r), gx.row_mut(r));
                }
                self.acc(grads, x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols;
                let (nq, nk) = (qv.rows, kv.rows);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Mat::zeros(nq, d);
                let mut gk = Mat::zeros(nk, d);
                let mut gvv = Mat::zeros(nk, d);
                for (h, a) in weights.iter().enumerate() {
                    let off = h * dh;
                    // dV_h = Aᵀ · dO_h
                    gemm_strided(
                        nk, nq, dh, 1.0, &a.data, 1, nk, &g.data[off..], d, 1, 1.0, &mut gvv.data[off..], d, 1,
                    );
                    // dA = dO_h · V_hᵀ
                    let mut da = Mat::zeros(nq, nk);
                    gemm_strided(
                        nq, dh, nk, 1.0, &g.data[off..], d, 1, &vv.data[off..], 1, d, 0.0, &mut da.data, nk, 1,
                    );
                    let mut ds = Mat::zeros(nq, nk);
                    for r in 0..nq {
                        softmax_backward(a.row(r), da.row(r), ds.row_mut(r));
                    }
                    // dQ_h = dS · K_h · scale ; dK_h = dSᵀ · Q_h · scale
                    gemm_strided(
                        nq, nk, dh, scale, &ds.data, nk, 1, &kv.data[off..], d, 1, 1.0, &mut gq.data[off..], d, 1,
                    );
                    gemm_strided(
                        nk, nq, dh, scale, &ds.data, 1, nk, &qv.data[off..], d, 1, 1.0, &mut gk.data[off..], d, 1,
                    );
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gvv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let data = g.data[start * c..(start + r) * c].to_vec();
                        self.acc(grads, p, Mat::from_vec(r, c, data));
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let mut gp = Mat::zeros(r, c);
                        for row in 0..r {
                            gp.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut gx = Mat::zeros(r, c);
                for (o, &src) in idx.iter().enumerate() {
                    for (dst, v) in gx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *dst += v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            &Op::Reshape(x) => {
                let (r, c) = self.shape(x);
                self.acc(grads, x, Mat::from_vec(r, c, g.data.clone()));
            }
            &Op::StraightThrough { probs } => {
                self.acc(grads, probs, g.clone());
            }
            &Op::Sum(x) => {
                let (r, c) = self.shape(x);
                self.acc(grads, x, Mat::filled(r, c, g.data[0]));
            }
            &Op::Mean(x) => {
                let (r, c) = self.shape(x);
                self.acc(grads, x, Mat::filled(r, c, g.data[0] / (r * c) as f64));
            }
            &Op::SumCols(x) => {
                let (r, c) = self.shape(x);
                let mut gx = Mat::zeros(r, c);
                for row in 0..r {
                    gx.row_mut(row).iter_mut().for_each(|v| *v = g.data[row]);
                }
                self.acc(grads, x, gx);
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.value(*logits);
                let n = labels.len() as f64;
                let d = lv
                    .data
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| g.data[0] * (sigmoid(x) - y) / n)
                    .collect();
                self.acc(grads, *logits, Mat::from_vec(lv.rows, lv.cols, d));
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
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

/// `dx = y ⊙ (dy − ⟨dy, y⟩)` for one softmax row.
fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((o, &yy), &g) in dx.iter_mut().zip(y).zip(dy) {
        *o = yy * (g - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x0`, compared with the tape.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let y = build(&mut tape, x);
        let y = tape.sum(y);
        let grads = tape.backward(y);
        let analytic = grads.wrt(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let mut xm = x0.clone();
                xm.data[i] += delta;
                let xi = t.input(xm);
                let yy = build(&mut t, xi);
                let s = t.sum(yy);
                t.scalar(s)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (numeric - analytic.data[i]).abs() < 1e-6 * (1.0 + numeric.abs()),
                "entry {i}: numeric {numeric} analytic {}",
                analytic.data[i]
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        check_unary(|t, x| t.gelu(x), sample(3, 4, 1));
        check_unary(|t, x| t.silu(x), sample(3, 4, 2));
        check_unary(
            |t, x| {
                let w = t.constant(sample(4, 1, 9));
                let s = t.softmax_rows(x);
                t.matmul(s, w)
            },
            sample(3, 4, 3),
        );
        check_unary(
            |t, x| {
                let g = t.constant(sample(1, 4, 4));
                let b = t.constant(sample(1, 4, 5));
                let w = t.constant(sample(4, 2, 6));
                let y = t.layer_norm(x, g, b, 1e-6);
                t.matmul(y, w)
            },
            sample(3, 4, 7),
        );
    }

    #[test]
    fn matmul_transpose_gradients() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let x0 = if ta { sample(4, 2, 12) } else { sample(2, 4, 12) };
            let b_in = if tb { sample(3, 4, 13) } else { sample(4, 3, 13) };
            check_unary(
                move |t, x| {
                    let b = t.constant(b_in.clone());
                    let y = t.matmul_t(x, ta, b, tb);
                    t.mul(y, y)
                },
                x0,
            );
        }
    }

    #[test]
    fn attention_gradients_each_input() {
        let q0 = sample(3, 4, 21);
        let k0 = sample(5, 4, 22);
        let v0 = sample(5, 4, 23);
        let w = sample(3, 4, 24);
        for which in 0..3 {
            let (q0, k0, v0, w) = (q0.clone(), k0.clone(), v0.clone(), w.clone());
            let x0 = [&q0, &k0, &v0][which].clone();
            check_unary(
                move |t, x| {
                    let mut vars = [None, None, None];
                    vars[which] = Some(x);
                    let q = vars[0].unwrap_or_else(|| t.constant(q0.clone()));
                    let k = vars[1].unwrap_or_else(|| t.constant(k0.clone()));
                    let v = vars[2].unwrap_or_else(|| t.constant(v0.clone()));
                    let o = t.attention(q, k, v, 2);
                    let wc = t.constant(w.clone());
                    t.mul(o, wc)
                },
                x0,
            );
        }
    }

    #[test]
    fn structural_ops_route_gradients() {
        check_unary(
            |t, x| {
                let a = t.gather_rows(x, &[2, 0, 2]);
                let b = t.reshape(a, 2, 6);
                let c = t.concat_cols(&[b, b]);
                let d = t.concat_rows(&[c, c]);
                let s = t.sum_cols(d);
                t.mul(s, s)
            },
            sample(3, 4, 31),
        );
    }

    #[test]
    fn straight_through_value_is_exact_hard_sample() {
        let mut t = Tape::new();
        let p = t.input(Mat::row_vec(vec![0.3, 0.7]));
        let hard = Mat::row_vec(vec![1.0, 0.0]);
        let z = t.straight_through(p, hard.clone());
        assert_eq!(t.value(z), &hard);
        let w = t.constant(Mat::row_vec(vec![2.0, -1.0]));
        let y = t.mul(z, w);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.wrt(p).unwrap().data, vec![2.0, -1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.input(Mat::row_vec(vec![1.0, 2.0]));
        let d = t.detach(x);
        let y = t.mul(x, d);
        let s = t.sum(y);
        let g = t.backward(s);
        // d/dx (x · sg(x)) = sg(x)
        assert_eq!(g.wrt(x).unwrap().data, vec![1.0, 2.0]);
    }
}
