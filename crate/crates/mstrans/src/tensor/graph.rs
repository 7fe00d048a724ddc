//! Operation tape with exact reverse-mode adjoints.
//!
//! Ops execute eagerly: recording an op computes its value immediately and
//! captures whatever forward state its backward rule needs (softmax outputs,
//! argmax indices, dropout masks, attention weights). `backward` walks the
//! tape in reverse execution order and accumulates gradients into
//! `requires_grad` leaves. A graph is meant to live for one forward/backward
//! pass; build a fresh one (or call `clear`) between optimization steps.

use super::Tensor;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    ConcatLast { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, lo: usize },
    MaxOverPositions { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    WindowAttention { q: Var, k: Var, v: Var, width: usize, weights: Vec<Vec<f64>> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
pub struct Graph {
    nodes: Vec<Node>,
    rng: StdRng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Seed controls dropout masks; everything else is deterministic.
    pub fn with_seed(seed: u64) -> Self {
        Graph { nodes: Vec::new(), rng: StdRng::seed_from_u64(seed) }
    }

    /// Drops all recorded nodes so the graph can be reused for a new pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0].tensor;
        node.grad().map(|g| {
            Tensor::new(node.shape().to_vec(), g.to_vec()).expect("grad matches shape")
        })
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Differentiable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.set_requires_grad(true);
        c.zero_grad();
        self.push(c, Op::Leaf)
    }

    /// Non-differentiable leaf holding a copy of `t`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.set_requires_grad(false);
        c.zero_grad();
        self.push(c, Op::Leaf)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn out_tensor(&self, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> Tensor {
        let mut t = Tensor::new(shape, data).expect("op output shape consistent");
        t.set_requires_grad(requires);
        t
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        let out = self.out_tensor(vec![m, n], data, req);
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: t.shape().to_vec(), rhs: vec![] });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let req = self.requires(x);
        let out = self.out_tensor(vec![n, m], data, req);
        Ok(self.push(out, Op::Transpose { x }))
    }

    /// Elementwise sum. `b` may also be a suffix shape of `a` (e.g. a bias
    /// row added to every row), broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcastable(ta.shape(), tb.shape()) {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bn = tb.numel();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % bn])
            .collect();
        let req = self.requires(a) || self.requires(b);
        let out = self.out_tensor(ta.shape().to_vec(), data, req);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let req = self.requires(a) || self.requires(b);
        let out = self.out_tensor(ta.shape().to_vec(), data, req);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let req = self.requires(x);
        let out = self.out_tensor(t.shape().to_vec(), data, req);
        self.push(out, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let req = self.requires(x);
        let out = self.out_tensor(t.shape().to_vec(), data, req);
        self.push(out, Op::Relu { x })
    }

    /// Numerically stabilized softmax over the last axis. NaN in, NaN out.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_extent();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let req = self.requires(x);
        let out = self.out_tensor(t.shape().to_vec(), data, req);
        self.push(out, Op::SoftmaxRows { x })
    }

    /// Per-position normalization to zero mean and unit (population)
    /// variance over the last axis, then affine transform by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_extent();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps", format!("{eps} <= 0")));
        }
        let rows = tx.leading_rows();
        let mut data = vec![0.0; tx.numel()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv));
            for i in 0..d {
                data[r * d + i] = (xr[i] - mean) * inv * tg.data()[i] + tb.data()[i];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        let out = self.out_tensor(tx.shape().to_vec(), data, req);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last", "no parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let last = t.last_extent();
                data.extend_from_slice(&t.data()[r * last..(r + 1) * last]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let req = parts.iter().any(|&p| self.requires(p));
        let out = self.out_tensor(shape, data, req);
        Ok(self.push(out, Op::ConcatLast { parts: parts.to_vec() }))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let rest = &first[1..];
        let mut total_rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != first.len() || &t.shape()[1..] != rest {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![total_rows];
        shape.extend_from_slice(rest);
        let req = parts.iter().any(|&p| self.requires(p));
        let out = self.out_tensor(shape, data, req);
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Rows `lo..hi` along the first axis.
    pub fn slice_rows(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if lo >= hi || hi > n {
            return Err(Error::invalid("slice_rows", format!("range {lo}..{hi} of {n} rows")));
        }
        let stride: usize = t.shape()[1..].iter().product();
        let data = t.data()[lo * stride..hi * stride].to_vec();
        let mut shape = vec![hi - lo];
        shape.extend_from_slice(&t.shape()[1..]);
        let req = self.requires(x);
        let out = self.out_tensor(shape, data, req);
        Ok(self.push(out, Op::SliceRows { x, lo }))
    }

    /// Column-wise maximum over positions: `[N×D] -> [D]`. Ties break to the
    /// lowest row index; backward routes the gradient to that row only.
    pub fn max_over_positions(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Shape { op: "max_over_positions", lhs: t.shape().to_vec(), rhs: vec![] });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0usize; d];
        for i in 0..n {
            for j in 0..d {
                let v = t.data()[i * d + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let req = self.requires(x);
        let out = self.out_tensor(vec![d], data, req);
        Ok(self.push(out, Op::MaxOverPositions { x, argmax }))
    }

    /// Inverted dropout: scales kept values by `1/(1-p)`; identity when
    /// `training` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout p", format!("{p} outside [0,1)")));
        }
        let t = self.value(x);
        if !training || p == 0.0 {
            let data = t.data().to_vec();
            let req = self.requires(x);
            let mask = vec![1.0; t.numel()];
            let out = self.out_tensor(t.shape().to_vec(), data, req);
            return Ok(self.push(out, Op::Dropout { x, mask }));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let req = self.requires(x);
        let out = self.out_tensor(t.shape().to_vec(), data, req);
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Row gather: `table[V×D]` indexed by `ids` -> `[len(ids)×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape { op: "embedding", lhs: t.shape().to_vec(), rhs: vec![] });
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding", "empty id sequence"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("embedding", format!("id {bad} >= table rows {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let req = self.requires(table);
        let out = self.out_tensor(vec![ids.len(), d], data, req);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape { op: "reshape", lhs: t.shape().to_vec(), rhs: shape });
        }
        let data = t.data().to_vec();
        let req = self.requires(x);
        let out = self.out_tensor(shape, data, req);
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total = t.data().iter().sum();
        let req = self.requires(x);
        let out = self.out_tensor(vec![1], vec![total], req);
        self.push(out, Op::Sum { x })
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `-log softmax(logits)[label]` for a rank-1 logits vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 1 {
            return Err(Error::Shape { op: "cross_entropy", lhs: t.shape().to_vec(), rhs: vec![] });
        }
        if label >= t.numel() {
            return Err(Error::invalid(
                "cross_entropy label",
                format!("{label} out of range for {} classes", t.numel()),
            ));
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs);
        let loss = -probs[label].ln();
        let req = self.requires(logits);
        let out = self.out_tensor(vec![1], vec![loss], req);
        Ok(self.push(out, Op::CrossEntropy { logits, label, probs }))
    }

    /// Mean squared elementwise error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape {
                op: "mse_loss",
                lhs: self.value(pred).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let t = self.constant(target);
        let neg_t = self.scale(t, -1.0);
        let diff = self.add(pred, neg_t)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Windowed single-head attention: for each query row `j` of `q`, attend
    /// over rows of `k`/`v` within the odd `width` window centered at `j`,
    /// clipped to the sequence (no padding). Logits scaled by `1/sqrt(D')`.
    ///
    /// Output row `j` depends only on inputs within the clipped window.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, width: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape().len() != 2 || tq.shape() != tk.shape() || tk.shape() != tv.shape() {
            return Err(Error::Shape {
                op: "window_attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        if width % 2 == 0 || width == 0 {
            return Err(Error::invalid("window width", format!("{width} is not odd and positive")));
        }
        let (n, dh) = (tq.shape()[0], tq.shape()[1]);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut data = vec![0.0; n * dh];
        let mut weights = Vec::with_capacity(n);
        for j in 0..n {
            let (lo, hi) = context_span(j, width, n);
            let qj = &tq.data()[j * dh..(j + 1) * dh];
            let mut logits: Vec<f64> = (lo..hi)
                .map(|i| {
                    let ki = &tk.data()[i * dh..(i + 1) * dh];
                    dot(qj, ki) * scale
                })
                .collect();
            softmax_in_place(&mut logits);
            let out = &mut data[j * dh..(j + 1) * dh];
            for (w, i) in logits.iter().zip(lo..hi) {
                let vi = &tv.data()[i * dh..(i + 1) * dh];
                for (o, x) in out.iter_mut().zip(vi) {
                    *o += w * x;
                }
            }
            weights.push(logits);
        }
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        let out = self.out_tensor(vec![n, dh], data, req);
        Ok(self.push(out, Op::WindowAttention { q, k, v, width, weights }))
    }

    /// Post-softmax attention rows of a `window_attention` node, with each
    /// row's absolute start position. Rows sum to 1.
    pub fn attention_rows(&self, v: Var) -> Option<Vec<(usize, Vec<f64>)>> {
        match &self.nodes[v.0].op {
            Op::WindowAttention { width, weights, .. } => {
                let n = weights.len();
                Some(
                    weights
                        .iter()
                        .enumerate()
                        .map(|(j, w)| (context_span(j, *width, n).0, w.clone()))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar node. Gradients land additively on the
    /// `requires_grad` leaves reachable from `out`.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].tensor.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output has shape {:?}, expected scalar", self.nodes[out.0].tensor.shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(vec![1.0]);

        for id in (0..=out.0).rev() {
            let Some(dout) = adj[id].take() else { continue };
            if !self.nodes[id].tensor.requires_grad() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].tensor.accumulate_grad(&dout);
                continue;
            }
            self.backprop_node(id, &dout, &mut adj);
        }
        Ok(())
    }

    fn accum(&self, adj: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].tensor.requires_grad() {
            return;
        }
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].tensor.numel()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backprop_node(&self, id: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Split borrows: read node state, write adjoints.
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("handled by caller"),
            &Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires(a) {
                    // dA = dC · B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            if d != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += d * tb.data()[p * n + j];
                                }
                            }
                        }
                    }
                    self.accum(adj, a, &da);
                }
                if self.requires(b) {
                    // dB = A^T · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += av * dout[i * n + j];
                                }
                            }
                        }
                    }
                    self.accum(adj, b, &db);
                }
            }
            &Op::Transpose { x } => {
                let t = &self.nodes[id].tensor;
                let (n, m) = (t.shape()[0], t.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = dout[i * m + j];
                    }
                }
                self.accum(adj, x, &dx);
            }
            &Op::Add { a, b } => {
                self.accum(adj, a, dout);
                if self.requires(b) {
                    let bn = self.nodes[b.0].tensor.numel();
                    if bn == dout.len() {
                        self.accum(adj, b, dout);
                    } else {
                        let mut db = vec![0.0; bn];
                        for (i, d) in dout.iter().enumerate() {
                            db[i % bn] += d;
                        }
                        self.accum(adj, b, &db);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.requires(a) {
                    let tb = &self.nodes[b.0].tensor;
                    let da: Vec<f64> = dout.iter().zip(tb.data()).map(|(d, y)| d * y).collect();
                    self.accum(adj, a, &da);
                }
                if self.requires(b) {
                    let ta = &self.nodes[a.0].tensor;
                    let db: Vec<f64> = dout.iter().zip(ta.data()).map(|(d, x)| d * x).collect();
                    self.accum(adj, b, &db);
                }
            }
            &Op::Scale { x, c } => {
                let dx: Vec<f64> = dout.iter().map(|d| d * c).collect();
                self.accum(adj, x, &dx);
            }
            &Op::Relu { x } => {
                let tx = &self.nodes[x.0].tensor;
                // Subgradient 0 at 0.
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(tx.data())
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(adj, x, &dx);
            }
            &Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].tensor;
                let n = y.last_extent();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.leading_rows() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let dr = &dout[r * n..(r + 1) * n];
                    let s: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for i in 0..n {
                        dx[r * n + i] = yr[i] * (dr[i] - s);
                    }
                }
                self.accum(adj, x, &dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let tx = &self.nodes[x.0].tensor;
                let tg = &self.nodes[gain.0].tensor;
                let d = tx.last_extent();
                let rows = tx.leading_rows();
                let mut dx = vec![0.0; tx.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let (mean, inv) = stats[r];
                    let xr = &tx.data()[r * d..(r + 1) * d];
                    let dr = &dout[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * inv;
                        let dxhat = dr[i] * tg.data()[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[i] += dr[i] * xhat;
                        dbias[i] += dr[i];
                    }
                    let dn = d as f64;
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * inv;
                        let dxhat = dr[i] * tg.data()[i];
                        dx[r * d + i] =
                            inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                self.accum(adj, x, &dx);
                self.accum(adj, gain, &dgain);
                self.accum(adj, bias, &dbias);
            }
            Op::ConcatLast { parts } => {
                let parts = parts.clone();
                let out_last = self.nodes[id].tensor.last_extent();
                let rows = self.nodes[id].tensor.leading_rows();
                let mut offset = 0;
                for p in parts {
                    let last = self.nodes[p.0].tensor.last_extent();
                    if self.requires(p) {
                        let mut dp = vec![0.0; rows * last];
                        for r in 0..rows {
                            dp[r * last..(r + 1) * last].copy_from_slice(
                                &dout[r * out_last + offset..r * out_last + offset + last],
                            );
                        }
                        self.accum(adj, p, &dp);
                    }
                    offset += last;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let numel = self.nodes[p.0].tensor.numel();
                    if self.requires(p) {
                        self.accum(adj, p, &dout[offset..offset + numel]);
                    }
                    offset += numel;
                }
            }
            &Op::SliceRows { x, lo } => {
                let tx = &self.nodes[x.0].tensor;
                let stride: usize = tx.shape()[1..].iter().product();
                let mut dx = vec![0.0; tx.numel()];
                dx[lo * stride..lo * stride + dout.len()].copy_from_slice(dout);
                self.accum(adj, x, &dx);
            }
            Op::MaxOverPositions { x, argmax } => {
                let x = *x;
                let d = dout.len();
                let mut dx = vec![0.0; self.nodes[x.0].tensor.numel()];
                for (j, (&row, dv)) in argmax.iter().zip(dout).enumerate() {
                    dx[row * d + j] = *dv;
                }
                self.accum(adj, x, &dx);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<f64> = dout.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accum(adj, x, &dx);
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let tt = &self.nodes[table.0].tensor;
                let d = tt.shape()[1];
                let mut dt = vec![0.0; tt.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += dout[r * d + j];
                    }
                }
                self.accum(adj, table, &dt);
            }
            &Op::Reshape { x } => {
                self.accum(adj, x, dout);
            }
            &Op::Sum { x } => {
                let n = self.nodes[x.0].tensor.numel();
                let dx = vec![dout[0]; n];
                self.accum(adj, x, &dx);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let (logits, label) = (*logits, *label);
                let d = dout[0];
                let dx: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| d * (p - if i == label { 1.0 } else { 0.0 }))
                    .collect();
                self.accum(adj, logits, &dx);
            }
            Op::WindowAttention { q, k, v, width, weights } => {
                let (q, k, v, width) = (*q, *k, *v, *width);
                let tq = &self.nodes[q.0].tensor;
                let tk = &self.nodes[k.0].tensor;
                let tv = &self.nodes[v.0].tensor;
                let (n, dh) = (tq.shape()[0], tq.shape()[1]);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * dh];
                let mut dk = vec![0.0; n * dh];
                let mut dv = vec![0.0; n * dh];
                for j in 0..n {
                    let (lo, hi) = context_span(j, width, n);
                    let aw = &weights[j];
                    let doj = &dout[j * dh..(j + 1) * dh];
                    let qj = &tq.data()[j * dh..(j + 1) * dh];
                    // da_i = dout_j . v_i ; dv_i += a_i dout_j
                    let mut da = vec![0.0; hi - lo];
                    for (idx, i) in (lo..hi).enumerate() {
                        let vi = &tv.data()[i * dh..(i + 1) * dh];
                        da[idx] = dot(doj, vi);
                        for (dvi, d) in dv[i * dh..(i + 1) * dh].iter_mut().zip(doj) {
                            *dvi += aw[idx] * d;
                        }
                    }
                    // softmax backward
                    let s: f64 = da.iter().zip(aw).map(|(d, a)| d * a).sum();
                    for (idx, i) in (lo..hi).enumerate() {
                        let ds = aw[idx] * (da[idx] - s) * scale;
                        let ki = &tk.data()[i * dh..(i + 1) * dh];
                        for (dqj, kv) in dq[j * dh..(j + 1) * dh].iter_mut().zip(ki) {
                            *dqj += ds * kv;
                        }
                        for (dki, qv) in dk[i * dh..(i + 1) * dh].iter_mut().zip(qj) {
                            *dki += ds * qv;
                        }
                    }
                }
                self.accum(adj, q, &dq);
                self.accum(adj, k, &dk);
                self.accum(adj, v, &dv);
            }
        }
    }
}

/// Clipped window `[lo, hi)` of odd `width` centered at `j` in a sequence of
/// length `n`. No padding: boundaries shrink the span.
pub fn context_span(j: usize, width: usize, n: usize) -> (usize, usize) {
    let r = (width - 1) / 2;
    let lo = j.saturating_sub(r);
    let hi = (j + r + 1).min(n);
    (lo, hi)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// Max-subtraction stabilized softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn suffix_broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == b[..]
}
