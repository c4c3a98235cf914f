use std::collections::BTreeMap;

use super::{lanes, top_k_indices, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    /// Mean of the `k` largest entries of each lane.
    TopKMean(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Abs,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Unary(Unary, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    /// `selected` holds, per output element, the lane offsets that contributed.
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        selected: Vec<Vec<usize>>,
    },
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    Conv1d(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies the current value of `v` into a fresh constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(dim_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), &[a])
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// `x[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        if self.value(bias).len() != n {
            return Err(dim_err(
                "add_row",
                format!("bias of {} values for {n} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push("add_row", Tensor::matrix(m, n, data)?, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x[m×n] * col[m]`, each row scaled by its own factor.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "mul_col")?;
        if self.value(col).len() != m {
            return Err(dim_err(
                "mul_col",
                format!("column of {} values for {m} rows", self.value(col).len()),
            ));
        }
        let c = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &cv) in data.chunks_mut(n).zip(c) {
            for v in row.iter_mut() {
                *v *= cv;
            }
        }
        self.push("mul_col", Tensor::matrix(m, n, data)?, Op::MulCol(x, col), &[x, col])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, kind: Unary, name: &'static str, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| match kind {
            Unary::Abs => v.abs(),
            Unary::Relu => v.max(0.0),
            Unary::Sigmoid => sigmoid(v),
        });
        self.push(name, value, Op::Unary(kind, x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, "abs", x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, "relu", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, "sigmoid", x)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(dim_err(op, format!("axis {axis} on rank {rank}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let value = softmax_tensor(self.value(x), axis);
        self.push("softmax", value, Op::Softmax(x, axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let (outer, len, inner) = lanes(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| t.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (t.data()[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = t.data()[at(j)] - lse;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x, axis), &[x])
    }

    /// Reduces `axis` away. Reducing the only axis of a vector yields shape `[1]`.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        self.check_axis(x, axis, "reduce")?;
        let t = self.value(x);
        let (outer, len, inner) = lanes(t.shape(), axis);
        let k = match kind {
            ReduceKind::Max => 1,
            ReduceKind::TopKMean(k) => {
                if k == 0 || k > len {
                    return Err(TensorError::Argument {
                        op: "reduce",
                        detail: format!("top-k with k={k} over extent {len}"),
                    });
                }
                k
            }
            _ => len,
        };
        let mut out = Vec::with_capacity(outer * inner);
        let mut selected = Vec::new();
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = t.data()[o * len * inner + j * inner + i];
                }
                match kind {
                    ReduceKind::Sum => out.push(lane.iter().sum()),
                    ReduceKind::Mean => out.push(lane.iter().sum::<f64>() / len as f64),
                    ReduceKind::Max | ReduceKind::TopKMean(_) => {
                        let idx = top_k_indices(&lane, k);
                        out.push(idx.iter().map(|&j| lane[j]).sum::<f64>() / k as f64);
                        selected.push(idx);
                    }
                }
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "reduce",
            value,
            Op::Reduce {
                x,
                axis,
                kind,
                selected,
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.matrix_dims(x, "gather_rows")?;
        let value = self.value(x).select_rows(idx)?;
        self.push("gather_rows", value, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Temporal convolution with kernel 3 and zero padding 1.
    ///
    /// `x` is `T×Din`, `w` is `3×Din×Dout` (tap 0 looks one step back).
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, din) = self.matrix_dims(x, "conv1d")?;
        let ws = self.value(w).shape();
        if ws.len() != 3 || ws[0] != 3 || ws[1] != din {
            return Err(dim_err("conv1d", format!("weight {ws:?} for input width {din}")));
        }
        let dout = ws[2];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; t * dout];
        for step in 0..t {
            let orow = &mut out[step * dout..(step + 1) * dout];
            for tap in 0..3 {
                let src = step as isize + tap as isize - 1;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xd[src as usize * din..(src as usize + 1) * din];
                let wtap = &wd[tap * din * dout..(tap + 1) * din * dout];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wtap[i * dout..(i + 1) * dout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push("conv1d", Tensor::matrix(t, dout, out)?, Op::Conv1d(x, w), &[x, w])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(TensorError::Contract("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, contribution: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contribution) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let value = Tensor::new(node.value.shape().to_vec(), g)?;
                    result.grads.insert(Var(id), value);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).cols();
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose_raw(bd, k, n);
                        acc(*a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose_raw(ad, m, k);
                        acc(*b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                    acc(*a, transpose_raw(&g, n, m));
                }
                Op::Binary(kind, a, b) => match kind {
                    Binary::Add => {
                        acc(*a, g.clone());
                        acc(*b, g);
                    }
                    Binary::Sub => {
                        acc(*a, g.clone());
                        acc(*b, g.iter().map(|v| -v).collect());
                    }
                    Binary::Mul => {
                        let ad = self.value(*a).data();
                        let bd = self.value(*b).data();
                        acc(*a, g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect());
                        acc(*b, g.iter().zip(ad).map(|(gv, av)| gv * av).collect());
                    }
                },
                Op::AddRow(x, bias) => {
                    let n = self.value(*x).cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*bias, gb);
                    acc(*x, g);
                }
                Op::MulCol(x, col) => {
                    let n = self.value(*x).cols();
                    let xd = self.value(*x).data();
                    let cd = self.value(*col).data();
                    let gc = g
                        .chunks(n)
                        .zip(xd.chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    let gx = g
                        .chunks(n)
                        .zip(cd)
                        .flat_map(|(gr, &c)| gr.iter().map(move |v| v * c))
                        .collect();
                    acc(*col, gc);
                    acc(*x, gx);
                }
                Op::Affine(x, scale) => acc(*x, g.iter().map(|v| v * scale).collect()),
                Op::Unary(kind, x) => {
                    let xd = self.value(*x).data();
                    let yd = node.value.data();
                    let gx = g
                        .iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(gv, (&xv, &yv))| {
                            gv * match kind {
                                Unary::Abs => {
                                    if xv > 0.0 {
                                        1.0
                                    } else if xv < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => yv * (1.0 - yv),
                            }
                        })
                        .collect();
                    acc(*x, gx);
                }
                Op::Softmax(x, axis) => {
                    let y = &node.value;
                    let (outer, len, inner) = lanes(y.shape(), *axis);
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y.data()[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = y.data()[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmax(x, axis) => {
                    let y = &node.value;
                    let (outer, len, inner) = lanes(y.shape(), *axis);
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = g[at(j)] - y.data()[at(j)].exp() * total;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Reduce {
                    x,
                    axis,
                    kind,
                    selected,
                } => {
                    let xs = self.value(*x).shape();
                    let (outer, len, inner) = lanes(xs, *axis);
                    let mut gx = vec![0.0; xs.iter().product()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let out_idx = o * inner + i;
                            let at = |j: usize| o * len * inner + j * inner + i;
                            match kind {
                                ReduceKind::Sum => (0..len).for_each(|j| gx[at(j)] = g[out_idx]),
                                ReduceKind::Mean => (0..len).for_each(|j| gx[at(j)] = g[out_idx] / len as f64),
                                ReduceKind::Max | ReduceKind::TopKMean(_) => {
                                    let sel = &selected[out_idx];
                                    for &j in sel {
                                        gx[at(j)] += g[out_idx] / sel.len() as f64;
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    acc(*x, vec![g[0]; n]);
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            gx[src * n + c] += g[r * n + c];
                        }
                    }
                    acc(*x, gx);
                }
                Op::Conv1d(x, w) => {
                    let (t, din) = (self.value(*x).rows(), self.value(*x).cols());
                    let dout = self.value(*w).shape()[2];
                    let xd = self.value(*x).data();
                    let wd = self.value(*w).data();
                    let mut gx = vec![0.0; t * din];
                    let mut gw = vec![0.0; 3 * din * dout];
                    for step in 0..t {
                        let grow = &g[step * dout..(step + 1) * dout];
                        for tap in 0..3 {
                            let src = step as isize + tap as isize - 1;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for i in 0..din {
                                let wrow = &wd[(tap * din + i) * dout..(tap * din + i + 1) * dout];
                                let gwrow = &mut gw[(tap * din + i) * dout..(tap * din + i + 1) * dout];
                                let xv = xd[src * din + i];
                                let mut s = 0.0;
                                for o in 0..dout {
                                    s += grow[o] * wrow[o];
                                    gwrow[o] += xv * grow[o];
                                }
                                gx[src * din + i] += s;
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*w, gw);
                }
            }
        }
        Ok(result)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Max-subtracted softmax along `axis`.
pub(crate) fn softmax_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = lanes(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| t.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (t.data()[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor {
        shape: t.shape().to_vec(),
        data: out,
    }
}
