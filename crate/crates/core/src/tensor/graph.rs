//! Define-by-run computation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append nodes
//! in creation order, which is already a topological order, so
//! [`Graph::backward`] is a single reverse sweep. Each graph may be
//! differentiated once; gradients never accumulate across graphs.

use std::collections::HashMap;

use super::{gemm, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the rows of a stacked `[n_seqs·seq_len × d]` activation map onto
/// independent causal sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub n_seqs: usize,
    pub seq_len: usize,
}

impl SeqLayout {
    pub fn new(n_seqs: usize, seq_len: usize) -> Self {
        Self { n_seqs, seq_len }
    }

    pub fn rows(&self) -> usize {
        self.n_seqs * self.seq_len
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention(Box<AttentionSaved<T>>),
    RouteMix {
        x: Var,
        f: Var,
        gate: Var,
    },
    StraightThrough(Var),
    Column(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    layout: SeqLayout,
    q_rows: Vec<usize>,
    /// Per query: offset into `probs`; the block holds `heads × (pos+1)` values.
    offsets: Vec<usize>,
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Binds an existing tensor as a leaf. Shares its buffer; no copy.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data(), t.requires_grad());
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a named parameter once per graph; later calls return the same node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    /// Moves all parameter gradients out of the graph.
    pub fn take_param_grads(&mut self) -> HashMap<String, Vec<T>> {
        let mut out = HashMap::new();
        for (name, v) in &self.params {
            if let Some(g) = self.nodes[v.0].value.take_grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        let value = Tensor::new(shape, data)
            .expect("op output shape is consistent")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, self.data(a), self.data(b), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.output(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(op, a, b)?;
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.output(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.output(self.shape(a).to_vec(), out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.output(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.output(self.shape(a).to_vec(), out, rg, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.output(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.output(Vec::new(), vec![s / n], rg, Op::Mean(a))
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.abs()).collect();
        let rg = self.rg(a);
        self.output(self.shape(a).to_vec(), out, rg, Op::Abs(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        self.output(self.shape(a).to_vec(), out, rg, Op::Silu(a))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.data(a).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericDomain { op })
        }
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let (_, k) = self.matrix_dims(a);
        if k == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.output(self.shape(a).to_vec(), out, rg, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let (_, k) = self.matrix_dims(a);
        if k == 0 {
            return Err(Error::contract("log_softmax over an empty axis"));
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(k) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        Ok(self.output(self.shape(a).to_vec(), out, rg, Op::LogSoftmax(a)))
    }

    /// `x / sqrt(mean(x²) + eps) * gain`, row-wise over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x);
        if self.shape(gain) != [d] {
            return Err(Error::Shape {
                op: "rms_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::contract("rms_norm requires eps > 0"));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let xs = self.data(x);
        let gs = self.data(gain);
        let mut out = vec![T::zero(); rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for (xr, or) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let ms = xr.iter().map(|&v| v * v).sum::<T>() / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &xv), &gv) in or.iter_mut().zip(xr).zip(gs) {
                *o = xv * inv * gv;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.output(self.shape(x).to_vec(), out, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Mean next-token negative log-likelihood of `targets` under `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits);
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: vocab,
            });
        }
        self.check_finite("cross_entropy", logits)?;
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = total / T::of(rows.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.output(
            Vec::new(),
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row lookup into a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table);
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.output(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `k` and `v` hold every row of the layout. `q` holds the rows listed in
    /// `q_rows` (all rows when `None`); query row `r` at position `p` of its
    /// sequence attends to positions `0..=p` of the same sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: SeqLayout,
        q_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let (n, d) = self.matrix_dims(k);
        if self.shape(k) != self.shape(v) || n != layout.rows() {
            return Err(Error::Shape {
                op: "causal_attention",
                left: self.shape(k).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let q_rows: Vec<usize> = match q_rows {
            Some(r) => r.to_vec(),
            None => (0..n).collect(),
        };
        let (nq, dq) = self.matrix_dims(q);
        if dq != d || nq != q_rows.len() {
            return Err(Error::Shape {
                op: "causal_attention",
                left: self.shape(q).to_vec(),
                right: vec![q_rows.len(), d],
            });
        }
        if let Some(&bad) = q_rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                op: "causal_attention",
                index: bad,
                bound: n,
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); nq * d];
        let mut offsets = Vec::with_capacity(nq);
        let mut probs = Vec::new();
        let mut scores = Vec::with_capacity(layout.seq_len);
        for (i, &row) in q_rows.iter().enumerate() {
            let start = row - row % layout.seq_len;
            let len = row - start + 1;
            offsets.push(probs.len());
            for h in 0..heads {
                let qh = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                scores.clear();
                for j in 0..len {
                    let kr = start + j;
                    let kh = &ks[kr * d + h * dh..kr * d + (h + 1) * dh];
                    scores.push(dot(qh, kh) * scale);
                }
                softmax_in_place(&mut scores);
                let oh = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vr = start + j;
                    let vh = &vs[vr * d + h * dh..vr * d + (h + 1) * dh];
                    for (o, &x) in oh.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.output(
            vec![nq, d],
            out,
            rg,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                layout,
                q_rows,
                offsets,
                probs,
            })),
        ))
    }

    /// Gated residual update `gate[:,1]·(f + x) + gate[:,0]·x`, row-wise.
    pub fn route_mix(&mut self, x: Var, f: Var, gate: Var) -> Result<Var> {
        self.same_shape("route_mix", x, f)?;
        let (n, d) = self.matrix_dims(x);
        if self.shape(gate) != [n, 2] {
            return Err(Error::Shape {
                op: "route_mix",
                left: self.shape(x).to_vec(),
                right: self.shape(gate).to_vec(),
            });
        }
        let (xs, fs, gs) = (self.data(x), self.data(f), self.data(gate));
        let mut out = vec![T::zero(); n * d];
        for t in 0..n {
            let (g0, g1) = (gs[2 * t], gs[2 * t + 1]);
            let r = t * d..(t + 1) * d;
            for ((o, &xv), &fv) in out[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&fs[r]) {
                *o = g1 * (fv + xv) + g0 * xv;
            }
        }
        let rg = self.rg(x) || self.rg(f) || self.rg(gate);
        Ok(self.output(vec![n, d], out, rg, Op::RouteMix { x, f, gate }))
    }

    /// Forward value is the row-wise one-hot argmax of `soft` (ties go to the
    /// highest index); the gradient passes to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let (_, k) = self.matrix_dims(soft);
        let mut out = vec![T::zero(); self.data(soft).len()];
        for (src, dst) in self.data(soft).chunks(k).zip(out.chunks_mut(k)) {
            dst[argmax_prefer_last(src)] = T::one();
        }
        let rg = self.rg(soft);
        self.output(self.shape(soft).to_vec(), out, rg, Op::StraightThrough(soft))
    }

    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let (rows, k) = self.matrix_dims(a);
        if col >= k {
            return Err(Error::Index {
                op: "column",
                index: col,
                bound: k,
            });
        }
        let out = (0..rows).map(|r| self.data(a)[r * k + col]).collect();
        let rg = self.rg(a);
        Ok(self.output(vec![rows], out, rg, Op::Column(a, col)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.output(vec![rows.len(), d], out, rg, Op::GatherRows(a, rows.to_vec())))
    }

    /// Places the rows of `a` at positions `rows` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let (m, d) = self.matrix_dims(a);
        if m != rows.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                left: self.shape(a).to_vec(),
                right: vec![rows.len()],
            });
        }
        let mut seen = vec![false; n];
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: r,
                    bound: n,
                });
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::contract(format!("scatter_rows: duplicate row {r}")));
            }
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); n * d];
        for (i, &r) in rows.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.output(vec![n, d], out, rg, Op::ScatterRows(a, rows.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad_mut_or_zero()[0] = T::one();

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gout) = node.value.grad() else {
                continue;
            };
            if !node.value.requires_grad() {
                continue;
            }
            backprop_node(before, node, gout);
        }
        Ok(())
    }
}

fn grad_of<T: Float>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let t = &mut nodes[v.0].value;
    if t.requires_grad() {
        Some(t.grad_mut_or_zero())
    } else {
        None
    }
}

fn accumulate<T: Float>(nodes: &mut [Node<T>], v: Var, contrib: impl Iterator<Item = T>) {
    if let Some(g) = grad_of(nodes, v) {
        for (dst, c) in g.iter_mut().zip(contrib) {
            *dst += c;
        }
    }
}

fn backprop_node<T: Float>(nodes: &mut [Node<T>], node: &Node<T>, gout: &[T]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = nodes[b.0].value.cols();
            let a_data = nodes[a.0].value.shared_data();
            let b_data = nodes[b.0].value.shared_data();
            if let Some(ga) = grad_of(nodes, *a) {
                // dA += dOut · Bᵀ
                gemm(false, true, m, n, k, gout, &b_data, ga, true);
            }
            if let Some(gb) = grad_of(nodes, *b) {
                // dB += Aᵀ · dOut
                gemm(true, false, k, m, n, &a_data, gout, gb, true);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, gout.iter().copied());
            accumulate(nodes, *b, gout.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, gout.iter().copied());
            accumulate(nodes, *b, gout.iter().map(|&g| -g));
        }
        Op::Mul(a, b) => {
            let a_data = nodes[a.0].value.shared_data();
            let b_data = nodes[b.0].value.shared_data();
            accumulate(nodes, *a, gout.iter().zip(b_data.iter()).map(|(&g, &y)| g * y));
            accumulate(nodes, *b, gout.iter().zip(a_data.iter()).map(|(&g, &x)| g * x));
        }
        Op::Scale(a, c) => accumulate(nodes, *a, gout.iter().map(|&g| g * *c)),
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, *a, std::iter::repeat_n(gout[0], n));
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            let g = gout[0] / T::of(n as f64);
            accumulate(nodes, *a, std::iter::repeat_n(g, n));
        }
        Op::Abs(a) => {
            let x = nodes[a.0].value.shared_data();
            accumulate(nodes, *a, gout.iter().zip(x.iter()).map(|(&g, &x)| g * sign(x)));
        }
        Op::Silu(a) => {
            let x = nodes[a.0].value.shared_data();
            accumulate(
                nodes,
                *a,
                gout.iter().zip(x.iter()).map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                }),
            );
        }
        Op::Softmax(a) => {
            let k = node.value.cols();
            if let Some(ga) = grad_of(nodes, *a) {
                for ((y, dy), dx) in out.chunks(k).zip(gout.chunks(k)).zip(ga.chunks_mut(k)) {
                    let s = dot(y, dy);
                    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
                        *d += yv * (g - s);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let k = node.value.cols();
            if let Some(ga) = grad_of(nodes, *a) {
                for ((y, dy), dx) in out.chunks(k).zip(gout.chunks(k)).zip(ga.chunks_mut(k)) {
                    let s: T = dy.iter().copied().sum();
                    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
                        *d += g - yv.exp() * s;
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let d = node.value.cols();
            let dn = T::of(d as f64);
            let xd = nodes[x.0].value.shared_data();
            let gd = nodes[gain.0].value.shared_data();
            if let Some(gg) = grad_of(nodes, *gain) {
                for ((xr, dy), &inv) in xd.chunks(d).zip(gout.chunks(d)).zip(inv_rms) {
                    for ((acc, &xv), &g) in gg.iter_mut().zip(xr).zip(dy) {
                        *acc += g * xv * inv;
                    }
                }
            }
            if let Some(gx) = grad_of(nodes, *x) {
                for (((xr, dy), dx), &inv) in xd.chunks(d).zip(gout.chunks(d)).zip(gx.chunks_mut(d)).zip(inv_rms) {
                    let ux: T = dy.iter().zip(gd.iter()).zip(xr).map(|((&g, &w), &xv)| g * w * xv).sum();
                    let coef = inv * inv * inv * ux / dn;
                    for (((dst, &g), &w), &xv) in dx.iter_mut().zip(dy).zip(gd.iter()).zip(xr) {
                        *dst += inv * g * w - coef * xv;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let vocab = nodes[logits.0].value.cols();
            let scale = gout[0] / T::of(targets.len().max(1) as f64);
            if let Some(gl) = grad_of(nodes, *logits) {
                for ((row, p), &t) in gl.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                    for (dst, &pv) in row.iter_mut().zip(p) {
                        *dst += scale * pv;
                    }
                    row[t] -= scale;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.cols();
            if let Some(gt) = grad_of(nodes, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, &g) in gt[id * d..(id + 1) * d].iter_mut().zip(&gout[i * d..(i + 1) * d]) {
                        *dst += g;
                    }
                }
            }
        }
        Op::Attention(saved) => attention_backward(nodes, saved, gout),
        Op::RouteMix { x, f, gate } => {
            let d = node.value.cols();
            let xd = nodes[x.0].value.shared_data();
            let fd = nodes[f.0].value.shared_data();
            let gd = nodes[gate.0].value.shared_data();
            let n = gd.len() / 2;
            if let Some(gx) = grad_of(nodes, *x) {
                for t in 0..n {
                    let w = gd[2 * t] + gd[2 * t + 1];
                    for (dst, &g) in gx[t * d..(t + 1) * d].iter_mut().zip(&gout[t * d..(t + 1) * d]) {
                        *dst += w * g;
                    }
                }
            }
            if let Some(gf) = grad_of(nodes, *f) {
                for t in 0..n {
                    let w = gd[2 * t + 1];
                    for (dst, &g) in gf[t * d..(t + 1) * d].iter_mut().zip(&gout[t * d..(t + 1) * d]) {
                        *dst += w * g;
                    }
                }
            }
            if let Some(gg) = grad_of(nodes, *gate) {
                for t in 0..n {
                    let r = t * d..(t + 1) * d;
                    let (mut skip, mut exec) = (T::zero(), T::zero());
                    for ((&g, &xv), &fv) in gout[r.clone()].iter().zip(&xd[r.clone()]).zip(&fd[r]) {
                        skip += g * xv;
                        exec += g * (fv + xv);
                    }
                    gg[2 * t] += skip;
                    gg[2 * t + 1] += exec;
                }
            }
        }
        Op::StraightThrough(soft) => accumulate(nodes, *soft, gout.iter().copied()),
        Op::Column(a, col) => {
            let k = nodes[a.0].value.cols();
            if let Some(ga) = grad_of(nodes, *a) {
                for (r, &g) in gout.iter().enumerate() {
                    ga[r * k + col] += g;
                }
            }
        }
        Op::GatherRows(a, rows) => {
            let d = node.value.cols();
            if let Some(ga) = grad_of(nodes, *a) {
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, &g) in ga[r * d..(r + 1) * d].iter_mut().zip(&gout[i * d..(i + 1) * d]) {
                        *dst += g;
                    }
                }
            }
        }
        Op::ScatterRows(a, rows) => {
            let d = node.value.cols();
            if let Some(ga) = grad_of(nodes, *a) {
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, &g) in ga[i * d..(i + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                        *dst += g;
                    }
                }
            }
        }
    }
}

fn attention_backward<T: Float>(nodes: &mut [Node<T>], s: &AttentionSaved<T>, gout: &[T]) {
    let need = |nodes: &[Node<T>], v: Var| nodes[v.0].value.requires_grad();
    if !(need(nodes, s.q) || need(nodes, s.k) || need(nodes, s.v)) {
        return;
    }
    let qd = nodes[s.q.0].value.shared_data();
    let kd = nodes[s.k.0].value.shared_data();
    let vd = nodes[s.v.0].value.shared_data();
    let d = nodes[s.k.0].value.cols();
    let dh = d / s.heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = Vec::with_capacity(s.layout.seq_len);
    for (i, &row) in s.q_rows.iter().enumerate() {
        let start = row - row % s.layout.seq_len;
        let len = row - start + 1;
        for h in 0..s.heads {
            let p = &s.probs[s.offsets[i] + h * len..s.offsets[i] + (h + 1) * len];
            let go = &gout[i * d + h * dh..i * d + (h + 1) * dh];
            dp.clear();
            for (j, &pj) in p.iter().enumerate() {
                let r = (start + j) * d + h * dh;
                dp.push(dot(go, &vd[r..r + dh]));
                axpy(&mut dv[r..r + dh], pj, go);
            }
            let mix = dot(p, &dp);
            let qi = i * d + h * dh;
            for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                let ds = pj * (dpj - mix) * scale;
                let r = (start + j) * d + h * dh;
                axpy(&mut dq[qi..qi + dh], ds, &kd[r..r + dh]);
                axpy(&mut dk[r..r + dh], ds, &qd[qi..qi + dh]);
            }
        }
    }
    accumulate(nodes, s.q, dq.into_iter());
    accumulate(nodes, s.k, dk.into_iter());
    accumulate(nodes, s.v, dv.into_iter());
}

#[inline]
fn axpy<T: Float>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Index of the maximum; ties resolve to the highest index.
pub(crate) fn argmax_prefer_last<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v >= row[best] {
            best = i;
        }
    }
    best
}
