//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records what its backward pass needs. Node ids
//! are issued in evaluation order, so the node list is already a topological order
//! and the backward sweep is a single reverse pass.
//!
//! Non-differentiable decisions (expert selections) and stop-gradient values are
//! recorded and can be replayed verbatim in a later graph. The gradient checker
//! uses this to take finite differences of exactly the function the backward
//! pass differentiates.

use crate::attention::{attn_backward, attn_forward, rms_norm_rows, rotate_pairs, softmax_in_place, AttnLayout};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulCol(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    RmsNorm { x: Var, gain: Var, rstd: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, dim: usize },
    Attention { q: Var, k: Var, v: Var, lay: AttnLayout, probs: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    SegmentSum { a: Var, group: usize },
    SliceCols { a: Var, start: usize },
    GatherElems { a: Var, idx: Vec<usize>, k: usize },
    RoutedLinear { x: Var, w: Var, groups: Vec<Vec<usize>> },
    RowNormalize { a: Var, sums: Vec<T> },
    Reshape(Var),
    StackDepth { parts: Vec<Var>, width: usize },
    ConcatSeq { a: Var, b: Var, batch: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded non-differentiable decisions of a graph.
#[derive(Clone, Debug, Default)]
pub struct Decisions<T> {
    pub detached: Vec<Tensor<T>>,
    pub selections: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: Decisions<T>,
    replay: Option<Decisions<T>>,
    replay_detach: usize,
    replay_select: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: Decisions::default(),
            replay: None,
            replay_detach: 0,
            replay_select: 0,
        }
    }

    /// A graph that returns previously recorded detached values and selections
    /// instead of computing fresh ones.
    pub fn replaying(decisions: Decisions<T>) -> Self {
        Self {
            replay: Some(decisions),
            ..Self::new()
        }
    }

    pub fn decisions(&self) -> &Decisions<T> {
        &self.record
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.input(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Stop-gradient: a constant copy of `v`. Replayed graphs return the value
    /// recorded at the same call index.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = match &self.replay {
            Some(r) => {
                let t = r
                    .detached
                    .get(self.replay_detach)
                    .cloned()
                    .ok_or_else(|| Error::Contract("replay ran out of detached values".into()))?;
                self.replay_detach += 1;
                t
            }
            None => self.value(v).clone(),
        };
        self.record.detached.push(value.clone());
        Ok(self.constant(value))
    }

    /// Registers a discrete decision (expert ids). Replayed graphs return the
    /// recorded decision instead of `computed`.
    pub fn select(&mut self, computed: Vec<usize>) -> Result<Vec<usize>> {
        let chosen = match &self.replay {
            Some(r) => {
                let s = r
                    .selections
                    .get(self.replay_select)
                    .cloned()
                    .ok_or_else(|| Error::Contract("replay ran out of selections".into()))?;
                self.replay_select += 1;
                s
            }
            None => computed,
        };
        self.record.selections.push(chosen.clone());
        Ok(chosen)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let v = self.map(a, |x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// Scales row `r` of `a` by `c[r]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        if self.value(c).len() != rows {
            return Err(shape_err(
                "mul_col",
                format!("{:?} rows scaled by {:?}", self.shape(a), self.shape(c)),
            ));
        }
        let cols = self.value(a).cols();
        let cd = self.data(c);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cd[i / cols])
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul_col", v, Op::MulCol(a, c), &[a, c])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * sigmoid(x));
        self.push("silu", v, Op::Silu(a), &[a])
    }

    /// `a[m,k] @ b[k,n]`, or `a[m,k] @ b[n,k]^T` with `trans_b`.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}{}", sa, sb, if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, T::one(), self.data(a), k as isize, 1, self.data(b), rsb, csb, T::zero(), &mut out, n as isize, 1);
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul { a, b, trans_b, m, k, n }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// Row-wise RMSNorm of `x[.., d]` with gain `[d]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(gain).len();
        if self.value(x).cols() != d {
            return Err(shape_err(
                "rms_norm",
                format!("x {:?} with gain {:?}", self.shape(x), self.shape(gain)),
            ));
        }
        let (out, rstd) = rms_norm_rows(self.data(x), self.data(gain), eps);
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("rms_norm", v, Op::RmsNorm { x, gain, rstd }, &[x, gain])
    }

    /// Rotary encoding of every `dim`-wide head in each row of `x`; `cos`/`sin`
    /// carry `dim / 2` entries per row.
    pub fn rope(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>, dim: usize) -> Result<Var> {
        let t = self.value(x);
        if dim == 0 || dim % 2 != 0 || t.cols() % dim != 0 || cos.len() != t.rows() * dim / 2 || sin.len() != cos.len() {
            return Err(shape_err(
                "rope",
                format!("x {:?}, dim {}, table {}", t.shape(), dim, cos.len()),
            ));
        }
        let width = t.cols();
        let mut data = t.data().to_vec();
        rotate_pairs(&mut data, width, dim, &cos, &sin, false);
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("rope", v, Op::Rope { x, cos, sin, dim }, &[x])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, lay: AttnLayout) -> Result<Var> {
        let (out, probs) = attn_forward(&lay, self.data(q), self.data(k), self.data(v))?;
        let value = Tensor::new(vec![lay.batch * lay.q_len, lay.q_heads * lay.head_dim], out)?;
        self.push("attention", value, Op::Attention { q, k, v, lay, probs }, &[q, k, v])
    }

    /// Softmax weights saved by an attention node, `[batch, heads, q_len, kv_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnLayout, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { lay, probs, .. } => Some((lay, probs)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {} of {}", bad, rows)));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new(vec![idx.len(), cols], data)?;
        self.push("gather_rows", v, Op::GatherRows { a, idx }, &[a])
    }

    /// Sums consecutive groups of `group` rows.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 {
            return Err(shape_err("segment_sum", format!("{} rows in groups of {}", rows, group)));
        }
        let mut data = vec![T::zero(); rows / group * cols];
        for r in 0..rows {
            let o = r / group;
            for c in 0..cols {
                data[o * cols + c] = data[o * cols + c] + t.data()[r * cols + c];
            }
        }
        let v = Tensor::new(vec![rows / group, cols], data)?;
        self.push("segment_sum", v, Op::SegmentSum { a, group }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{}..{} of {}", start, start + len, cols)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let v = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", v, Op::SliceCols { a, start }, &[a])
    }

    /// `out[r, j] = a[r, idx[r * k + j]]`.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<usize>, k: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if k == 0 || idx.len() != rows * k || idx.iter().any(|&i| i >= cols) {
            return Err(shape_err(
                "gather_elems",
                format!("{:?} with {} indices, k={}", t.shape(), idx.len(), k),
            ));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(p, &c)| t.data()[(p / k) * cols + c])
            .collect();
        let v = Tensor::new(vec![rows, k], data)?;
        self.push("gather_elems", v, Op::GatherElems { a, idx, k }, &[a])
    }

    /// Row `r` of `x[n, in]` multiplied by expert matrix `w[idx[r]]` from
    /// `w[E, in, out]`.
    pub fn routed_linear(&mut self, x: Var, w: Var, idx: &[usize]) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sx = self.shape(x).to_vec();
        if sw.len() != 3 || sx.len() != 2 || sx[1] != sw[1] || idx.len() != sx[0] {
            return Err(shape_err(
                "routed_linear",
                format!("x {:?}, experts {:?}, {} routes", sx, sw, idx.len()),
            ));
        }
        let (e, din, dout) = (sw[0], sw[1], sw[2]);
        let mut groups = vec![Vec::new(); e];
        for (r, &ex) in idx.iter().enumerate() {
            if ex >= e {
                return Err(shape_err("routed_linear", format!("expert {} of {}", ex, e)));
            }
            groups[ex].push(r);
        }
        let mut out = vec![T::zero(); sx[0] * dout];
        let xd = self.data(x);
        let wd = self.data(w);
        let mut buf_in = Vec::new();
        let mut buf_out = Vec::new();
        for (ex, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            buf_in.clear();
            for &r in rows {
                buf_in.extend_from_slice(&xd[r * din..(r + 1) * din]);
            }
            buf_out.clear();
            buf_out.resize(rows.len() * dout, T::zero());
            T::gemm(rows.len(), din, dout, T::one(), &buf_in, din as isize, 1, &wd[ex * din * dout..], dout as isize, 1, T::zero(), &mut buf_out, dout as isize, 1);
            for (i, &r) in rows.iter().enumerate() {
                out[r * dout..(r + 1) * dout].copy_from_slice(&buf_out[i * dout..(i + 1) * dout]);
            }
        }
        let v = Tensor::new(vec![sx[0], dout], out)?;
        self.push("routed_linear", v, Op::RoutedLinear { x, w, groups }, &[x, w])
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let sums: Vec<T> = t.data().chunks(cols).map(|r| r.iter().fold(T::zero(), |s, &x| s + x)).collect();
        let data = t.data().iter().enumerate().map(|(i, &x)| x / sums[i / cols]).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("row_normalize", v, Op::RowNormalize { a, sums }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Interleaves `parts[j][r, :]` into `out[r, j, :]`: each row gets a new
    /// axis running over the parts.
    pub fn stack_depth(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("stack_depth", "no parts"))?;
        let (rows, width) = (self.value(first).rows(), self.value(first).cols());
        for &p in parts {
            if self.value(p).rows() != rows || self.value(p).cols() != width {
                return Err(shape_err("stack_depth", format!("{:?} vs {:?}", self.shape(first), self.shape(p))));
            }
        }
        let n = parts.len();
        let mut data = vec![T::zero(); rows * n * width];
        for (j, &p) in parts.iter().enumerate() {
            let src = self.data(p);
            for r in 0..rows {
                data[(r * n + j) * width..][..width].copy_from_slice(&src[r * width..(r + 1) * width]);
            }
        }
        let v = Tensor::new(vec![rows * n, width], data)?;
        self.push("stack_depth", v, Op::StackDepth { parts: parts.to_vec(), width }, parts)
    }

    /// Concatenates `a[batch*sa, w]` and `b[batch*sb, w]` along each batch
    /// entry's sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if batch == 0 || ta.cols() != tb.cols() || ta.rows() % batch != 0 || tb.rows() % batch != 0 {
            return Err(shape_err("concat_seq", format!("{:?} ++ {:?} over batch {}", ta.shape(), tb.shape(), batch)));
        }
        let w = ta.cols();
        let (sa, sb) = (ta.rows() / batch, tb.rows() / batch);
        let mut data = Vec::with_capacity((ta.rows() + tb.rows()) * w);
        for bi in 0..batch {
            data.extend_from_slice(&ta.data()[bi * sa * w..(bi + 1) * sa * w]);
            data.extend_from_slice(&tb.data()[bi * sb * w..(bi + 1) * sb * w]);
        }
        let v = Tensor::new(vec![batch * (sa + sb), w], data)?;
        self.push("concat_seq", v, Op::ConcatSeq { a, b, batch }, &[a, b])
    }

    /// Mean token cross-entropy of `logits[n, vocab]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} rows, {} targets", rows, targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&c| c >= cols) {
            return Err(Error::Input(format!("target {} outside vocab {}", bad, cols)));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Input("cross entropy without any target".into()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            if let Some(c) = targets[r] {
                // log-sum-exp form stays finite when the target probability underflows
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let lse = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln() + max;
                loss = loss + lse - row[c];
            }
            softmax_in_place(row);
        }
        let loss = loss / T::of(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets, probs, count },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|&x| x * *s).collect()),
            Op::MulCol(a, c) => {
                let cols = self.value(*a).cols();
                let cd = self.data(*c);
                if needs(*a) {
                    accumulate(grads, *a, g.iter().enumerate().map(|(i, &x)| x * cd[i / cols]).collect());
                }
                if needs(*c) {
                    let ad = self.data(*a);
                    let dc = g
                        .chunks(cols)
                        .zip(ad.chunks(cols))
                        .map(|(gr, ar)| gr.iter().zip(ar).fold(T::zero(), |s, (&x, &y)| s + x * y))
                        .collect();
                    accumulate(grads, *c, dc);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Silu(a) => {
                let x = self.data(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| {
                            let s = sigmoid(v);
                            d * s * (T::one() + v * (T::one() - s))
                        })
                        .collect(),
                );
            }
            Op::MatMul { a, b, trans_b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    // dA[m,k] = dC[m,n] @ B^T  (B is [k,n], or [n,k] when transposed)
                    let mut da = vec![T::zero(); m * k];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, self.data(*b), rsb, csb, T::zero(), &mut da, k as isize, 1);
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let ad = self.data(*a);
                    if *trans_b {
                        // dB[n,k] = dC^T @ A
                        let mut db = vec![T::zero(); n * k];
                        T::gemm(n, m, k, T::one(), g, 1, n as isize, ad, k as isize, 1, T::zero(), &mut db, k as isize, 1);
                        accumulate(grads, *b, db);
                    } else {
                        // dB[k,n] = A^T @ dC
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, T::one(), ad, 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::RmsNorm { x, gain, rstd } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let d = gd.len();
                let dn = T::of(d as f64);
                if needs(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for (r, ((xr, gr), dxr)) in xd.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let rs = rstd[r];
                        let dot = (0..d).fold(T::zero(), |s, i| s + gr[i] * gd[i] * xr[i]);
                        let c = rs * rs * rs * dot / dn;
                        for i in 0..d {
                            dxr[i] = rs * gd[i] * gr[i] - xr[i] * c;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (r, (xr, gr)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                        for i in 0..d {
                            dg[i] = dg[i] + gr[i] * xr[i] * rstd[r];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
            }
            Op::Rope { x, cos, sin, dim } => {
                let mut dx = g.to_vec();
                rotate_pairs(&mut dx, node.value.cols(), *dim, cos, sin, true);
                accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, lay, probs } => {
                let (dq, dk, dv) = attn_backward(lay, self.data(*q), self.data(*k), self.data(*v), probs, g);
                if needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.cols();
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] = da[i * cols + c] + g[r * cols + c];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SegmentSum { a, group } => {
                let cols = node.value.cols();
                let rows = self.value(*a).rows();
                let mut da = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    da.extend_from_slice(&g[(r / group) * cols..(r / group + 1) * cols]);
                }
                accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start } => {
                let len = node.value.cols();
                let cols = self.value(*a).cols();
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (r, gr) in g.chunks(len).enumerate() {
                    da[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                accumulate(grads, *a, da);
            }
            Op::GatherElems { a, idx, k } => {
                let cols = self.value(*a).cols();
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (p, &c) in idx.iter().enumerate() {
                    let i = (p / k) * cols + c;
                    da[i] = da[i] + g[p];
                }
                accumulate(grads, *a, da);
            }
            Op::RoutedLinear { x, w, groups } => {
                let sw = self.shape(*w);
                let (din, dout) = (sw[1], sw[2]);
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut dx = if needs(*x) { Some(vec![T::zero(); xd.len()]) } else { None };
                let mut dw = if needs(*w) { Some(vec![T::zero(); wd.len()]) } else { None };
                let mut gbuf = Vec::new();
                let mut xbuf = Vec::new();
                let mut obuf = Vec::new();
                for (ex, rows) in groups.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let nr = rows.len();
                    gbuf.clear();
                    for &r in rows {
                        gbuf.extend_from_slice(&g[r * dout..(r + 1) * dout]);
                    }
                    let wex = &wd[ex * din * dout..(ex + 1) * din * dout];
                    if let Some(dx) = dx.as_mut() {
                        obuf.clear();
                        obuf.resize(nr * din, T::zero());
                        T::gemm(nr, dout, din, T::one(), &gbuf, dout as isize, 1, wex, 1, dout as isize, T::zero(), &mut obuf, din as isize, 1);
                        for (i, &r) in rows.iter().enumerate() {
                            for c in 0..din {
                                dx[r * din + c] = dx[r * din + c] + obuf[i * din + c];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        xbuf.clear();
                        for &r in rows {
                            xbuf.extend_from_slice(&xd[r * din..(r + 1) * din]);
                        }
                        T::gemm(din, nr, dout, T::one(), &xbuf, 1, din as isize, &gbuf, dout as isize, 1, T::one(), &mut dw[ex * din * dout..(ex + 1) * din * dout], dout as isize, 1);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::RowNormalize { a, sums } => {
                let cols = node.value.cols();
                let y = node.value.data();
                let mut da = vec![T::zero(); y.len()];
                for r in 0..sums.len() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&x, &z)| s + x * z);
                    for c in 0..cols {
                        da[r * cols + c] = (gr[c] - dot) / sums[r];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::StackDepth { parts, width } => {
                let n = parts.len();
                let rows = node.value.rows() / n;
                for (j, &p) in parts.iter().enumerate() {
                    if !needs(p) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(rows * width);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[(r * n + j) * width..][..*width]);
                    }
                    accumulate(grads, p, dp);
                }
            }
            Op::ConcatSeq { a, b, batch } => {
                let w = node.value.cols();
                let sa = self.value(*a).rows() / batch;
                let sb = self.value(*b).rows() / batch;
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for bi in 0..*batch {
                    let base = bi * (sa + sb) * w;
                    da.extend_from_slice(&g[base..base + sa * w]);
                    db.extend_from_slice(&g[base + sa * w..base + (sa + sb) * w]);
                }
                if needs(*a) {
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / T::of(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(c) = *t {
                        for j in 0..cols {
                            dl[r * cols + j] = probs[r * cols + j] * scale;
                        }
                        dl[r * cols + c] = dl[r * cols + c] - scale;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; self.value(*a).len()]),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`]. Nodes the loss does not depend on report a
/// zero gradient.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_zero(&self, v: Var) -> bool {
        self.grads[v.0].as_ref().is_none_or(|g| g.iter().all(|x| x.is_zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 3], &[0.0; 6]));
        let b = g.param(t(&[2, 3], &[0.0; 6]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::scalar(1e30f32));
        assert!(matches!(g.mul(a, a), Err(Error::NumericOverflow { op: "mul" })));
    }

    #[test]
    fn eval_is_bitwise_repeatable() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let a = g.param(Tensor::from_f64(&[2, 3], &[0.1, 0.2, -0.3, 0.7, 1.1, -2.0]).unwrap());
            let b = g.param(Tensor::from_f64(&[3, 2], &[1.0, -0.5, 0.25, 0.3, 0.9, -1.7]).unwrap());
            let c = g.matmul(a, b).unwrap();
            let s = g.silu(c).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = g.cross_entropy(x, vec![Some(0)]).unwrap();
        assert!((g.data(loss)[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn replay_returns_recorded_decisions() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x).unwrap();
        let s = g.select(vec![1, 0]).unwrap();
        assert_eq!(s, vec![1, 0]);
        assert!(!g.requires_grad(d));
        let rec = g.decisions().clone();

        let mut h = Graph::replaying(rec);
        let y = h.param(t(&[2], &[5.0, 6.0]));
        let dy = h.detach(y).unwrap();
        assert_eq!(h.data(dy), &[1.0, 2.0]);
        assert_eq!(h.select(vec![0, 1]).unwrap(), vec![1, 0]);
    }
}
