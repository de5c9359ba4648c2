//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid reverse topological order. Ops are coarse (fused attention,
//! fused softmax cross-entropy) to keep the tape short for transformer use.
//! Reductions accumulate in `f64` regardless of the element type.

use crate::error::{dim_err, Result, TensorError};
use crate::real::{gemm, Real, View};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SwiGlu { x: Var },
    Rope { x: Var, head_dim: usize, angles: Vec<(f64, f64)> },
    Attention { q: Var, k: Var, v: Var, segments: Vec<usize>, heads: usize, probs: Vec<T> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, lse: Vec<f64> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    /// A graph that never needs a backward pass: saved activations are skipped.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), record: false }
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

    /// Consumes the graph and returns the value of one node.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Leaf node; tracked for gradients when `t.requires_grad()` and recording.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.record && t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Leaf node that is always tracked (when recording).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.record;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Leaf node that is never tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push_checked(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs = self.needs(inputs);
        Ok(self.push(value, op, needs))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return dim_err(op, format!("expected a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return dim_err("matmul", format!("inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            self.value(a).data(),
            View::dense(0, m, k),
            self.value(b).data(),
            View::dense(0, k, n),
            T::zero(),
            &mut out,
            View::dense(0, m, n),
        );
        self.push_checked(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b], "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Tensor::from_parts(shape, data), Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Tensor::from_parts(shape, data), Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ct = T::of(c);
        let data = self.value(x).data().iter().map(|&v| v * ct).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_checked(Tensor::from_parts(shape, data), Op::Scale { x, c }, &[x], "scale")
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push_checked(Tensor::scalar(T::of(s)), Op::Sum { x }, &[x], "sum")
    }

    /// Row gather: `table[V,d]`, `ids` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index { op: "embedding", index: id, size: vocab });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        self.push_checked(Tensor::from_parts(vec![ids.len(), d], out), op, &[table], "embedding")
    }

    /// Each trailing-dimension vector divided by `sqrt(mean(x^2) + eps)`, times `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gain).shape() != [d] {
            return dim_err("rms_norm", format!("gain shape {:?} for feature size {d}", self.value(gain).shape()));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let ms: f64 = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g).map(|(&v, &gj)| T::of(v.f64() * inv) * gj));
        }
        let shape = xv.shape().to_vec();
        let op = Op::RmsNorm { x, gain, inv_rms };
        self.push_checked(Tensor::from_parts(shape, out), op, &[x, gain], "rms_norm")
    }

    /// `[..., 2f] -> [..., f]`: `silu(gate) * value` with gate the first half.
    pub fn swiglu(&mut self, x: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if w % 2 != 0 {
            return dim_err("swiglu", format!("combined width {w} is odd"));
        }
        let f = w / 2;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.numel() / 2);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (gate, value) = row.split_at(f);
            out.extend(gate.iter().zip(value).map(|(&g, &v)| silu(g) * v));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = f;
        self.push_checked(Tensor::from_parts(shape, out), Op::SwiGlu { x }, &[x], "swiglu")
    }

    /// Rotary position embedding on `[n, heads * head_dim]`; `positions[i]` is row i's position.
    ///
    /// Pairs `(2p, 2p+1)` inside each head rotate by `pos * base^(-2p/head_dim)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if heads == 0 || d % heads != 0 {
            return dim_err("rope", format!("width {d} not divisible into {heads} heads"));
        }
        let head_dim = d / heads;
        if head_dim % 2 != 0 {
            return dim_err("rope", format!("head dimension {head_dim} is odd"));
        }
        if positions.len() != xv.rows() {
            return dim_err("rope", format!("{} positions for {} rows", positions.len(), xv.rows()));
        }
        let angles = rope_angles(positions, head_dim, base);
        let half = head_dim / 2;
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let ang = &angles[r * half..(r + 1) * half];
            for head in row.chunks_mut(head_dim) {
                rotate(head, ang, false);
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::Rope { x, head_dim, angles };
        self.push_checked(Tensor::from_parts(shape, out), op, &[x], "rope")
    }

    /// Multi-head scaled dot-product attention over `[n, d]` inputs.
    ///
    /// Rows are partitioned into independent sequences of the given lengths;
    /// no position attends across a segment boundary. With `causal`, row i of
    /// a segment attends only to rows `<= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[usize], heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return dim_err("attention", "q, k and v must share one [n, d] shape");
        }
        if heads == 0 || d % heads != 0 {
            return dim_err("attention", format!("width {d} not divisible into {heads} heads"));
        }
        if segments.iter().sum::<usize>() != n {
            return dim_err("attention", format!("segments {segments:?} do not cover {n} rows"));
        }
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let saved: usize = if self.record { segments.iter().map(|l| l * l * heads).sum() } else { 0 };
        let mut probs = Vec::with_capacity(saved);
        let mut scores = Vec::new();
        let mut start = 0;
        for &len in segments {
            scores.resize(len * len, T::zero());
            for h in 0..heads {
                let block = View { offset: start * d + h * hd, rows: len, cols: hd, rs: d, cs: 1 };
                gemm(scale, qd, block, kd, block.t(), T::zero(), &mut scores, View::dense(0, len, len));
                softmax_in_place(&mut scores, len, causal);
                gemm(T::one(), &scores, View::dense(0, len, len), vd, block, T::zero(), &mut out, block);
                if self.record {
                    probs.extend_from_slice(&scores);
                }
            }
            start += len;
        }
        let op = Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs };
        self.push_checked(Tensor::from_parts(vec![n, d], out), op, &[q, k, v], "attention")
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.last_dim();
        let mut out = xv.data().to_vec();
        let rows = xv.rows();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols], cols);
        }
        let shape = xv.shape().to_vec();
        self.push_checked(Tensor::from_parts(shape, out), Op::Softmax { x }, &[x], "softmax_rows")
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` as a `[1]` tensor.
    ///
    /// Rows with weight exactly 0 contribute exactly 0. Per-row losses are
    /// available afterwards through [`Graph::row_losses`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return dim_err("cross_entropy", format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()));
        }
        let lv = self.value(logits);
        let mut lse = Vec::with_capacity(n);
        let mut total = 0.0f64;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= vocab {
                return Err(TensorError::Index { op: "cross_entropy", index: t, size: vocab });
            }
            let row = lv.row(i);
            let l = log_sum_exp(row);
            lse.push(l);
            if w != 0.0 {
                total += w * (l - row[t].f64());
            }
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), lse };
        self.push_checked(Tensor::scalar(T::of(total)), op, &[logits], "cross_entropy")
    }

    /// Unweighted `-log p(target)` for every row of a cross-entropy node.
    pub fn row_losses(&self, ce: Var) -> Option<Vec<f64>> {
        match &self.nodes[ce.0].op {
            Op::CrossEntropy { logits, targets, lse, .. } => {
                let lv = self.value(*logits);
                Some(targets.iter().enumerate().map(|(i, &t)| lse[i] - lv.row(i)[t].f64()).collect())
            }
            _ => None,
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let gv = View::dense(0, m, n);
                if self.nodes[a.0].needs_grad {
                    // dA += dC * B^T
                    let bd = self.value(*b).data();
                    let acc = slot(grads, *a, m * k);
                    gemm(T::one(), g, gv, bd, View::dense(0, k, n).t(), T::one(), acc, View::dense(0, m, k));
                }
                if self.nodes[b.0].needs_grad {
                    // dB += A^T * dC
                    let ad = self.value(*a).data();
                    let acc = slot(grads, *b, k * n);
                    gemm(T::one(), ad, View::dense(0, m, k).t(), g, gv, T::one(), acc, View::dense(0, k, n));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.nodes[v.0].needs_grad {
                        add_into(slot(grads, v, g.len()), g.iter().copied());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    add_into(slot(grads, *a, g.len()), g.iter().zip(bd).map(|(&gi, &bi)| gi * bi));
                }
                if self.nodes[b.0].needs_grad {
                    add_into(slot(grads, *b, g.len()), g.iter().zip(ad).map(|(&gi, &ai)| gi * ai));
                }
            }
            Op::Scale { x, c } => {
                let ct = T::of(*c);
                add_into(slot(grads, *x, g.len()), g.iter().map(|&gi| gi * ct));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                add_into(slot(grads, *x, n), std::iter::repeat(g[0]).take(n));
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                let acc = slot(grads, *table, self.value(*table).numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * d..(id + 1) * d], g[r * d..(r + 1) * d].iter().copied());
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => self.backprop_rms_norm(*x, *gain, inv_rms, g, grads),
            Op::SwiGlu { x } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let f = w / 2;
                let acc = slot(grads, *x, xv.numel());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let gr = &g[r * f..(r + 1) * f];
                    let ar = &mut acc[r * w..(r + 1) * w];
                    for j in 0..f {
                        let (gate, value) = (row[j], row[f + j]);
                        let sig = sigmoid(gate);
                        let dsilu = sig * (T::one() + gate * (T::one() - sig));
                        ar[j] += gr[j] * value * dsilu;
                        ar[f + j] += gr[j] * gate * sig;
                    }
                }
            }
            Op::Rope { x, head_dim, angles } => {
                let d = self.value(*x).last_dim();
                let half = head_dim / 2;
                let mut back = g.to_vec();
                for (r, row) in back.chunks_mut(d).enumerate() {
                    let ang = &angles[r * half..(r + 1) * half];
                    for head in row.chunks_mut(*head_dim) {
                        rotate(head, ang, true);
                    }
                }
                add_into(slot(grads, *x, g.len()), back.into_iter());
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.backprop_attention([*q, *k, *v], segments, *heads, probs, g, grads)
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let acc = slot(grads, *x, y.len());
                for ((yr, gr), ar) in y.chunks(cols).zip(g.chunks(cols)).zip(acc.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    for j in 0..cols {
                        ar[j] += T::of(yr[j].f64() * (gr[j].f64() - dot));
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, lse } => {
                let lv = self.value(*logits);
                let vocab = lv.last_dim();
                let upstream = g[0].f64();
                let acc = slot(grads, *logits, lv.numel());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = w * upstream;
                    let row = lv.row(i);
                    let ar = &mut acc[i * vocab..(i + 1) * vocab];
                    for j in 0..vocab {
                        let p = (row[j].f64() - lse[i]).exp();
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        ar[j] += T::of(scale * (p - onehot));
                    }
                }
            }
        }
    }

    fn backprop_rms_norm(&self, x: Var, gain: Var, inv_rms: &[f64], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let d = xv.last_dim();
        if self.nodes[x.0].needs_grad {
            let acc = slot(grads, x, xv.numel());
            for (r, &inv) in inv_rms.iter().enumerate() {
                let row = xv.row(r);
                let gr = &g[r * d..(r + 1) * d];
                let dot: f64 = (0..d).map(|j| gr[j].f64() * gv[j].f64() * row[j].f64()).sum();
                let coef = dot * inv * inv * inv / d as f64;
                let ar = &mut acc[r * d..(r + 1) * d];
                for j in 0..d {
                    ar[j] += T::of(inv * gv[j].f64() * gr[j].f64() - row[j].f64() * coef);
                }
            }
        }
        if self.nodes[gain.0].needs_grad {
            let mut sums = vec![0.0f64; d];
            for (r, &inv) in inv_rms.iter().enumerate() {
                let row = xv.row(r);
                for j in 0..d {
                    sums[j] += g[r * d + j].f64() * row[j].f64() * inv;
                }
            }
            add_into(slot(grads, gain, d), sums.into_iter().map(T::of));
        }
    }

    fn backprop_attention(
        &self,
        qkv: [Var; 3],
        segments: &[usize],
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let [q, k, v] = qkv;
        let (n, d) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = Vec::new();
        let mut start = 0;
        let mut poff = 0;
        for &len in segments {
            dp.resize(len * len, T::zero());
            let sq = View::dense(0, len, len);
            for h in 0..heads {
                let block = View { offset: start * d + h * hd, rows: len, cols: hd, rs: d, cs: 1 };
                let p = &probs[poff..poff + len * len];
                poff += len * len;
                // dV += P^T dO ; dP = dO V^T
                gemm(T::one(), p, sq.t(), g, block, T::one(), &mut dv, block);
                gemm(T::one(), g, block, vd, block.t(), T::zero(), &mut dp, sq);
                // dS = P * (dP - rowsum(dP * P))
                for r in 0..len {
                    let pr = &p[r * len..(r + 1) * len];
                    let dr = &mut dp[r * len..(r + 1) * len];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
                    for (dj, &pj) in dr.iter_mut().zip(pr) {
                        *dj = T::of(pj.f64() * (dj.f64() - dot));
                    }
                }
                // dQ += s dS K ; dK += s dS^T Q
                gemm(scale, &dp, sq, kd, block, T::one(), &mut dq, block);
                gemm(scale, &dp, sq.t(), qd, block, T::one(), &mut dk, block);
            }
            start += len;
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                let n = d.len();
                add_into(slot(grads, var, n), d.into_iter());
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(acc: &mut [T], vals: impl Iterator<Item = T>) {
    for (a, v) in acc.iter_mut().zip(vals) {
        *a += v;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T], len: usize) {
    debug_assert_eq!(row.len(), len);
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.f64();
    }
    let inv = T::of(1.0 / sum);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn softmax_in_place<T: Real>(scores: &mut [T], len: usize, causal: bool) {
    for r in 0..len {
        let row = &mut scores[r * len..(r + 1) * len];
        let visible = if causal { r + 1 } else { len };
        softmax_row(&mut row[..visible], visible);
        for v in &mut row[visible..] {
            *v = T::zero();
        }
    }
}

/// `(cos, sin)` per (row, pair) for rotary embedding.
pub(crate) fn rope_angles(positions: &[usize], head_dim: usize, base: f64) -> Vec<(f64, f64)> {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half).map(|p| base.powf(-2.0 * p as f64 / head_dim as f64)).collect();
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let table: Vec<(f64, f64)> = (0..=max_pos)
        .flat_map(|pos| inv_freq.iter().map(move |f| (pos as f64 * f).sin_cos()))
        .map(|(s, c)| (c, s))
        .collect();
    let mut out = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        out.extend_from_slice(&table[pos * half..(pos + 1) * half]);
    }
    out
}

pub(crate) fn rotate<T: Real>(head: &mut [T], angles: &[(f64, f64)], inverse: bool) {
    for (p, &(c, s)) in angles.iter().enumerate() {
        let s = if inverse { -s } else { s };
        let (x0, x1) = (head[2 * p].f64(), head[2 * p + 1].f64());
        head[2 * p] = T::of(x0 * c - x1 * s);
        head[2 * p + 1] = T::of(x0 * s + x1 * c);
    }
}
