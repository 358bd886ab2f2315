use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Axis selector for `concat` and `slice`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// The leading axis.
    First,
    /// The trailing axis.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand repeated over the left operand's leading axis.
    Right,
    /// Left operand repeated over the right operand's leading axis.
    Left,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    MatMul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat { inputs: Vec<usize>, axis: Axis },
    Slice { input: usize, axis: Axis, start: usize, len: usize },
    Sum(usize),
    Mean(usize),
    Lookup { table: usize, indices: Vec<Option<usize>> },
    Gather { input: usize, indices: Vec<Option<usize>> },
    LstmUpdate { gates: usize, cell: usize },
    SelectRows { mask: Vec<bool>, on: usize, off: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every operation appends a node, so node order is a topological order and
/// `backward` is a single reverse sweep. Build a fresh graph per forward pass.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() == b.len() + 1 && a[1..] == *b {
        Ok(Broadcast::Right)
    } else if b.len() == a.len() + 1 && b[1..] == *a {
        Ok(Broadcast::Left)
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
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

impl Graph {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    /// Value of a node. Panics if `v` belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.resolve(v).expect("variable belongs to a different graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize, usize, Broadcast)> {
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bc = broadcast(name, ta.shape(), tb.shape())?;
        let out = match bc {
            Broadcast::Same => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::Right => {
                let k = tb.len();
                let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % k])).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::Left => {
                let k = ta.len();
                let data = tb.data().iter().enumerate().map(|(i, &y)| f(ta.data()[i % k], y)).collect();
                Tensor::new(tb.shape().to_vec(), data)?
            }
        };
        Ok((out, ia, ib, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("add", out, Op::Add(ia, ib, bc), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("sub", out, Op::Sub(ia, ib, bc), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("mul", out, Op::Mul(ia, ib, bc), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.resolve(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())?;
        let ng = self.needs(ia);
        self.push("scale", out, Op::Scale(ia, factor), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("matmul", out, Op::MatMul(ia, ib), ng)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.resolve(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        let ng = self.needs(ia);
        self.push(name, out, op(ia), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs)
    }

    fn row_wise(&mut self, name: &'static str, a: Var, log: bool) -> Result<Var> {
        let ia = self.resolve(a)?;
        let t = &self.nodes[ia].value;
        let cols = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                out.extend(row.iter().map(|x| x - lse));
            } else {
                out.extend(row.iter().map(|x| (x - max).exp() / sum));
            }
        }
        debug_assert_eq!(out.len() % cols, 0);
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.needs(ia);
        let op = if log { Op::LogSoftmax(ia) } else { Op::Softmax(ia) };
        self.push(name, out, op, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise("softmax", a, false)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise("log_softmax", a, true)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: Axis) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.resolve(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base = self.nodes[first].value.shape().to_vec();
        let mut shape = base.clone();
        match axis {
            Axis::First => {
                let mut total = 0;
                for &i in &idx {
                    let s = self.nodes[i].value.shape();
                    if s.len() != base.len() || s[1..] != base[1..] {
                        return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
                    }
                    total += s[0];
                }
                shape[0] = total;
                let mut data = Vec::with_capacity(shape.iter().product());
                for &i in &idx {
                    data.extend_from_slice(self.nodes[i].value.data());
                }
                let ng = idx.iter().any(|&i| self.needs(i));
                let out = Tensor::new(shape, data)?;
                self.push("concat", out, Op::Concat { inputs: idx, axis }, ng)
            }
            Axis::Last => {
                let last = base.len() - 1;
                let mut total = 0;
                for &i in &idx {
                    let s = self.nodes[i].value.shape();
                    if s.len() != base.len() || s[..last] != base[..last] {
                        return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
                    }
                    total += s[last];
                }
                shape[last] = total;
                let rows = self.nodes[first].value.rows();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &i in &idx {
                        data.extend_from_slice(self.nodes[i].value.row(r));
                    }
                }
                let ng = idx.iter().any(|&i| self.needs(i));
                let out = Tensor::new(shape, data)?;
                self.push("concat", out, Op::Concat { inputs: idx, axis }, ng)
            }
        }
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let ia = self.resolve(a)?;
        let t = &self.nodes[ia].value;
        let dim = match axis {
            Axis::First => t.shape()[0],
            Axis::Last => t.cols(),
        };
        if len == 0 || start + len > dim {
            return Err(Error::shape("slice", format!("range {start}..{} of axis size {dim}", start + len)));
        }
        let mut shape = t.shape().to_vec();
        let data = match axis {
            Axis::First => {
                shape[0] = len;
                let chunk = t.len() / dim;
                t.data()[start * chunk..(start + len) * chunk].to_vec()
            }
            Axis::Last => {
                *shape.last_mut().unwrap() = len;
                let mut data = Vec::with_capacity(t.rows() * len);
                for r in 0..t.rows() {
                    data.extend_from_slice(&t.row(r)[start..start + len]);
                }
                data
            }
        };
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(ia);
        self.push("slice", out, Op::Slice { input: ia, axis, start, len }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.resolve(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        let ng = self.needs(ia);
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.resolve(a)?;
        let t = &self.nodes[ia].value;
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(ia);
        self.push("mean", Tensor::scalar(m), Op::Mean(ia), ng)
    }

    /// Row lookup into a `[classes x dim]` table. `None` yields a zero row.
    pub fn lookup(&mut self, table: Var, indices: &[Option<usize>]) -> Result<Var> {
        let it = self.resolve(table)?;
        let t = &self.nodes[it].value;
        if t.shape().len() != 2 {
            return Err(Error::shape("lookup", format!("table must be 2-D, got {:?}", t.shape())));
        }
        let (classes, dim) = (t.shape()[0], t.shape()[1]);
        if indices.is_empty() {
            return Err(Error::shape("lookup", "no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for idx in indices {
            match *idx {
                Some(i) if i < classes => data.extend_from_slice(t.row(i)),
                Some(i) => return Err(Error::shape("lookup", format!("index {i} outside [0, {classes})"))),
                None => data.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        let out = Tensor::new(vec![indices.len(), dim], data)?;
        let ng = self.needs(it);
        self.push("lookup", out, Op::Lookup { table: it, indices: indices.to_vec() }, ng)
    }

    /// Picks one column per row of a 2-D tensor; `None` rows yield 0.
    pub fn gather(&mut self, a: Var, indices: &[Option<usize>]) -> Result<Var> {
        let ia = self.resolve(a)?;
        let t = &self.nodes[ia].value;
        if t.shape().len() != 2 || t.shape()[0] != indices.len() {
            return Err(Error::shape("gather", format!("{:?} with {} indices", t.shape(), indices.len())));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len());
        for (r, idx) in indices.iter().enumerate() {
            match *idx {
                Some(c) if c < cols => data.push(t.row(r)[c]),
                Some(c) => return Err(Error::shape("gather", format!("column {c} outside [0, {cols})"))),
                None => data.push(0.0),
            }
        }
        let out = Tensor::new(vec![indices.len()], data)?;
        let ng = self.needs(ia);
        self.push("gather", out, Op::Gather { input: ia, indices: indices.to_vec() }, ng)
    }

    /// Fused gated-LSTM state update.
    ///
    /// `gates` holds pre-activations `[B x 4H]` in input/forget/candidate/output
    /// order and `cell` the previous cell state `[B x H]`. Returns `[B x 2H]`
    /// with the new hidden state in the first `H` columns and the new cell
    /// state in the last `H`.
    pub fn lstm_update(&mut self, gates: Var, cell: Var) -> Result<Var> {
        let (ig, ic) = (self.resolve(gates)?, self.resolve(cell)?);
        let (tg, tc) = (&self.nodes[ig].value, &self.nodes[ic].value);
        if tg.shape().len() != 2 || tc.shape().len() != 2 || tg.shape()[0] != tc.shape()[0] || tg.shape()[1] != 4 * tc.shape()[1] {
            return Err(Error::shape("lstm_update", format!("gates {:?}, cell {:?}", tg.shape(), tc.shape())));
        }
        let (b, h) = (tc.shape()[0], tc.shape()[1]);
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let g = tg.row(r);
            let c = tc.row(r);
            let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[h + j]);
                let c_g = g[2 * h + j].tanh();
                let o_g = sigmoid(g[3 * h + j]);
                let c_new = f_g * c[j] + i_g * c_g;
                o[j] = o_g * c_new.tanh();
                o[h + j] = c_new;
            }
        }
        let out = Tensor::new(vec![b, 2 * h], out)?;
        let ng = self.needs(ig) || self.needs(ic);
        self.push("lstm_update", out, Op::LstmUpdate { gates: ig, cell: ic }, ng)
    }

    /// Row-wise choice: row `r` comes from `on` where `mask[r]`, else from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (ia, ib) = (self.resolve(on)?, self.resolve(off)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() || ta.shape()[0] != mask.len() {
            return Err(Error::shape(
                "select_rows",
                format!("{:?} vs {:?} with {} mask rows", ta.shape(), tb.shape(), mask.len()),
            ));
        }
        let chunk = ta.len() / mask.len();
        let mut data = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { ta } else { tb };
            data.extend_from_slice(&src.data()[r * chunk..(r + 1) * chunk]);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("select_rows", out, Op::SelectRows { mask: mask.to_vec(), on: ia, off: ib }, ng)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// parameter leaf the loss depends on. Gradients from fan-out accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.resolve(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        check_finite("backward", lv)?;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[li] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f64>> {
            if !nodes[i].needs_grad {
                return None;
            }
            Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
        }

        // Adds `g * factor(other)` to the gradient of `target`, honoring broadcast.
        fn acc_binary(
            grads: &mut [Option<Vec<f64>>],
            nodes: &[Node],
            target: usize,
            target_is_broadcast: bool,
            g: &[f64],
            factor: impl Fn(usize) -> f64,
        ) {
            if let Some(s) = slot(grads, nodes, target) {
                if target_is_broadcast {
                    let k = s.len();
                    for (i, gv) in g.iter().enumerate() {
                        s[i % k] += gv * factor(i);
                    }
                } else {
                    for (i, gv) in g.iter().enumerate() {
                        s[i] += gv * factor(i);
                    }
                }
            }
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    acc_binary(&mut grads, nodes, a, bc == Broadcast::Left, &g, |_| 1.0);
                    acc_binary(&mut grads, nodes, b, bc == Broadcast::Right, &g, |_| sign);
                }
                &Op::Mul(a, b, bc) => {
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    let (ka, kb) = (va.len(), vb.len());
                    acc_binary(&mut grads, nodes, a, bc == Broadcast::Left, &g, |k| vb[k % kb]);
                    acc_binary(&mut grads, nodes, b, bc == Broadcast::Right, &g, |k| va[k % ka]);
                }
                &Op::Scale(a, f) => {
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for (sv, gv) in s.iter_mut().zip(&g) {
                            *sv += gv * f;
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        let bt = transpose(tb.data(), k, n);
                        gemm(&g, &bt, s, m, n, k);
                    }
                    if let Some(s) = slot(&mut grads, nodes, b) {
                        let at = transpose(ta.data(), m, k);
                        gemm(&at, &g, s, k, m, n);
                    }
                }
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for ((sv, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *sv += gv * (1.0 - yv * yv);
                        }
                    }
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.data();
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for ((sv, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *sv += gv * yv * (1.0 - yv);
                        }
                    }
                }
                &Op::Abs(a) => {
                    let x = nodes[a].value.data();
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for ((sv, gv), xv) in s.iter_mut().zip(&g).zip(x) {
                            let sign = if *xv > 0.0 {
                                1.0
                            } else if *xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *sv += gv * sign;
                        }
                    }
                }
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for c in 0..cols {
                                s[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                &Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let total: f64 = gr.iter().sum();
                            for c in 0..cols {
                                s[r * cols + c] += gr[c] - yr[c].exp() * total;
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => match axis {
                    Axis::First => {
                        let mut off = 0;
                        for &inp in inputs {
                            let n = nodes[inp].value.len();
                            if let Some(s) = slot(&mut grads, nodes, inp) {
                                for (sv, gv) in s.iter_mut().zip(&g[off..off + n]) {
                                    *sv += gv;
                                }
                            }
                            off += n;
                        }
                    }
                    Axis::Last => {
                        let total = node.value.cols();
                        let rows = node.value.rows();
                        let mut off = 0;
                        for &inp in inputs {
                            let c = nodes[inp].value.cols();
                            if let Some(s) = slot(&mut grads, nodes, inp) {
                                for r in 0..rows {
                                    let src = &g[r * total + off..r * total + off + c];
                                    for (sv, gv) in s[r * c..(r + 1) * c].iter_mut().zip(src) {
                                        *sv += gv;
                                    }
                                }
                            }
                            off += c;
                        }
                    }
                },
                &Op::Slice { input, axis, start, len } => {
                    let src = &nodes[input].value;
                    let (rows, cols) = (src.rows(), src.cols());
                    let dim0 = src.shape()[0];
                    if let Some(s) = slot(&mut grads, nodes, input) {
                        match axis {
                            Axis::First => {
                                let chunk = s.len() / dim0;
                                for (sv, gv) in s[start * chunk..(start + len) * chunk].iter_mut().zip(&g) {
                                    *sv += gv;
                                }
                            }
                            Axis::Last => {
                                for r in 0..rows {
                                    for j in 0..len {
                                        s[r * cols + start + j] += g[r * len + j];
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::Sum(a) => {
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        for sv in s.iter_mut() {
                            *sv += g[0];
                        }
                    }
                }
                &Op::Mean(a) => {
                    if let Some(s) = slot(&mut grads, nodes, a) {
                        let scale = g[0] / s.len() as f64;
                        for sv in s.iter_mut() {
                            *sv += scale;
                        }
                    }
                }
                Op::Lookup { table, indices } => {
                    let dim = node.value.cols();
                    if let Some(s) = slot(&mut grads, nodes, *table) {
                        for (r, idx) in indices.iter().enumerate() {
                            if let Some(k) = *idx {
                                for j in 0..dim {
                                    s[k * dim + j] += g[r * dim + j];
                                }
                            }
                        }
                    }
                }
                Op::Gather { input, indices } => {
                    let cols = nodes[*input].value.cols();
                    if let Some(s) = slot(&mut grads, nodes, *input) {
                        for (r, idx) in indices.iter().enumerate() {
                            if let Some(c) = *idx {
                                s[r * cols + c] += g[r];
                            }
                        }
                    }
                }
                Op::SelectRows { mask, on, off } => {
                    let chunk = g.len() / mask.len();
                    for (target, want) in [(*on, true), (*off, false)] {
                        if let Some(s) = slot(&mut grads, nodes, target) {
                            for (r, &m) in mask.iter().enumerate() {
                                if m == want {
                                    for k in r * chunk..(r + 1) * chunk {
                                        s[k] += g[k];
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::LstmUpdate { gates, cell } => {
                    let (tg, tc) = (&nodes[gates].value, &nodes[cell].value);
                    let (b, h) = (tc.shape()[0], tc.shape()[1]);
                    let mut d_gates = vec![0.0; b * 4 * h];
                    let mut d_cell = vec![0.0; b * h];
                    for r in 0..b {
                        let pre = tg.row(r);
                        let c_prev = tc.row(r);
                        let c_new = &node.value.row(r)[h..];
                        let go = &g[r * 2 * h..(r + 1) * 2 * h];
                        for j in 0..h {
                            let i_g = sigmoid(pre[j]);
                            let f_g = sigmoid(pre[h + j]);
                            let c_g = pre[2 * h + j].tanh();
                            let o_g = sigmoid(pre[3 * h + j]);
                            let tc_new = c_new[j].tanh();
                            let dh = go[j];
                            let dc = go[h + j] + dh * o_g * (1.0 - tc_new * tc_new);
                            let dg = &mut d_gates[r * 4 * h..(r + 1) * 4 * h];
                            dg[j] = dc * c_g * i_g * (1.0 - i_g);
                            dg[h + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
                            dg[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                            dg[3 * h + j] = dh * tc_new * o_g * (1.0 - o_g);
                            d_cell[r * h + j] = dc * f_g;
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, gates) {
                        for (sv, dv) in s.iter_mut().zip(&d_gates) {
                            *sv += dv;
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, cell) {
                        for (sv, dv) in s.iter_mut().zip(&d_cell) {
                            *sv += dv;
                        }
                    }
                }
            }
        }

        Ok(Gradients { graph: self.id, leaves })
    }
}

/// Parameter-leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves.get_mut(v.index).and_then(Option::take)
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `out += a b` for row-major `a [m x k]`, `b [k x n]`.
///
/// Each output entry is summed over `p = 0..k` in order, whichever block it
/// falls in, so results do not depend on a row's position in the batch.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const R: usize = 4;
    const C: usize = 8;
    let full_cols = n - n % C;
    let mut i = 0;
    while i < m {
        let rows = R.min(m - i);
        for j in (0..full_cols).step_by(C) {
            let mut acc = [[0.0; C]; R];
            for p in 0..k {
                let bv: &[f64; C] = b[p * n + j..p * n + j + C].try_into().expect("block width");
                for (r, acc_r) in acc.iter_mut().enumerate().take(rows) {
                    let av = a[(i + r) * k + p];
                    for c in 0..C {
                        acc_r[c] += av * bv[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(rows) {
                for c in 0..C {
                    out[(i + r) * n + j + c] += acc_r[c];
                }
            }
        }
        for r in i..i + rows {
            for j in full_cols..n {
                let mut sum = 0.0;
                for p in 0..k {
                    sum += a[r * k + p] * b[p * n + j];
                }
                out[r * n + j] += sum;
            }
        }
        i += rows;
    }
}
