use super::ops::{self, NORMALIZE_EPS};
use super::special::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    BroadcastCol(Var),
    Softplus(Var),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    L2NormalizeRows(Var),
    Digamma(Var),
    LnGamma(Var),
    Sum(Var),
    SumRows(Var),
    MeanRows(Var),
    Diag(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in evaluation order, so every node's inputs
/// precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`. `None` for nodes that do
    /// not depend on any trainable leaf, or that the root does not reach.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient for `var` into the tensor's gradient slot,
    /// replacing what was there. Leaves without gradient are left untouched.
    pub fn write_to(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.set_grad(g.to_vec()),
            None => Ok(()),
        }
    }

    /// Same as [`write_to`](Self::write_to) but adds to any existing gradient.
    pub fn accumulate_to(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("tape tensors are rank 1 or 2")
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

    /// Records a leaf. It is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor.clone(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let requires_grad = self.inputs_require_grad(&op);
        let value = Tensor::new(shape, data).map_err(|e| match e {
            Error::InvalidTensor(msg) if msg.starts_with("non-finite") => Error::NonFinite(name),
            other => other,
        })?;
        Ok(self.push_node(value, op, requires_grad))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                rg(a) || rg(b)
            }
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::BroadcastCol(a)
            | Op::Softplus(a)
            | Op::SoftmaxRow(a)
            | Op::LogSoftmaxRow(a)
            | Op::L2NormalizeRows(a)
            | Op::Digamma(a)
            | Op::LnGamma(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::Diag(a) => rg(a),
            Op::SliceRows { src, .. } => rg(src),
            Op::ConcatRows(parts) => parts.iter().any(rg),
            Op::GatherRows { table, .. } => rg(table),
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// a (m×k) · b (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = ops::matmul_raw(self.value(a).data(), m, k, self.value(b).data(), n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    /// a (m×k) · bᵀ where b is n×k. Linear layers store weights as out×in.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let data = ops::matmul_nt_raw(self.value(a).data(), m, k, self.value(b).data(), n);
        self.push("matmul_nt", vec![m, n], data, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let data = ops::transpose_raw(self.value(a).data(), r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.value(a).shape().to_vec(),
                right: shape,
            });
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, shape, data, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// Adds a row vector (1×n or [n]) to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let (rr, rn) = dims(self.value(row));
        if rr != 1 || rn != n {
            return Err(self.shape_err("add_row", a, row));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", vec![m, n], data, Op::AddRow(a, row))
    }

    /// Repeats an m×1 column across `cols` columns.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (m, c) = dims(self.value(a));
        if c != 1 || cols == 0 {
            return Err(Error::Shape {
                op: "broadcast_col",
                left: self.value(a).shape().to_vec(),
                right: vec![m, cols],
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        self.push("broadcast_col", vec![m, cols], data, Op::BroadcastCol(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, ops::softplus_scalar, Op::Softplus(a))
    }

    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let data = ops::softmax_rows_raw(self.value(a).data(), r, c);
        let shape = self.value(a).shape().to_vec();
        self.push("softmax_row", shape, data, Op::SoftmaxRow(a))
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let data = ops::log_softmax_rows_raw(self.value(a).data(), r, c);
        let shape = self.value(a).shape().to_vec();
        self.push("log_softmax_row", shape, data, Op::LogSoftmaxRow(a))
    }

    /// Row-wise unit normalization; fails on rows with norm ≤ 1e-12.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let data = ops::l2_normalize_rows_raw(self.value(a).data(), r, c)?;
        let shape = self.value(a).shape().to_vec();
        self.push("l2_normalize", shape, data, Op::L2NormalizeRows(a))
    }

    fn check_positive(&self, name: &str, a: Var) -> Result<()> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("{name} requires x > 0, got {bad}")));
        }
        Ok(())
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.check_positive("digamma", a)?;
        self.map("digamma", a, digamma_unchecked, Op::Digamma(a))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.check_positive("ln_gamma", a)?;
        self.map("ln_gamma", a, ln_gamma_unchecked, Op::LnGamma(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(a))
    }

    /// m×n → m×1 row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let data = self.value(a).data().chunks(n).map(|c| c.iter().sum()).collect();
        self.push("sum_rows", vec![m, 1], data, Op::SumRows(a))
    }

    /// m×n → 1×n mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let mut data = vec![0.0; n];
        for chunk in self.value(a).data().chunks(n) {
            data.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.push("mean_rows", vec![1, n], data, Op::MeanRows(a))
    }

    /// n×n → n×1 diagonal.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        if m != n {
            return Err(self.shape_err("diag", a, a));
        }
        let v = self.value(a).data();
        let data = (0..n).map(|i| v[i * n + i]).collect();
        self.push("diag", vec![n, 1], data, Op::Diag(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        if len == 0 || start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.value(a).shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", vec![len, n], data, Op::SliceRows { src: a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows"));
        };
        let n = dims(self.value(first)).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = dims(self.value(p));
            if c != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", vec![rows, n], data, Op::ConcatRows(parts.to_vec()))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row i.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = dims(self.value(table));
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: m,
            });
        }
        let t = self.value(table).data();
        let data = indices
            .iter()
            .flat_map(|&i| t[i * n..(i + 1) * n].iter().copied())
            .collect();
        self.push(
            "gather_rows",
            vec![indices.len(), n],
            data,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar root. Gradients start from zero on every
    /// call; use [`Gradients::accumulate_to`] to sum across calls.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(val(a));
                let n = dims(val(b)).1;
                send(a, ops::matmul_nt_raw(g, m, n, val(b).data(), k));
                send(b, ops::matmul_tn_raw(val(a).data(), m, k, g, n));
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = dims(val(a));
                let n = dims(val(b)).0;
                send(a, ops::matmul_raw(g, m, n, val(b).data(), k));
                send(b, ops::matmul_tn_raw(g, m, n, val(a).data(), k));
            }
            &Op::Transpose(a) => {
                let (r, c) = dims(val(a));
                send(a, ops::transpose_raw(g, c, r));
            }
            &Op::Reshape(a) => send(a, g.to_vec()),
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                send(a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                send(b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            &Op::Scale(a, c) => send(a, g.iter().map(|v| c * v).collect()),
            &Op::AddScalar(a) => send(a, g.to_vec()),
            &Op::AddRow(a, row) => {
                let n = dims(val(a)).1;
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                send(a, g.to_vec());
                send(row, gr);
            }
            &Op::BroadcastCol(a) => {
                let cols = dims(out).1;
                send(a, g.chunks(cols).map(|c| c.iter().sum()).collect());
            }
            &Op::Softplus(a) => {
                let x = val(a).data();
                send(a, g.iter().zip(x).map(|(gv, &xv)| gv * ops::sigmoid(xv)).collect());
            }
            &Op::SoftmaxRow(a) => {
                let n = dims(out).1;
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - inner);
                    }
                }
                send(a, dx);
            }
            &Op::LogSoftmaxRow(a) => {
                let n = dims(out).1;
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), lr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gv), lv) in dxr.iter_mut().zip(gr).zip(lr) {
                        *d = gv - lv.exp() * total;
                    }
                }
                send(a, dx);
            }
            &Op::L2NormalizeRows(a) => {
                let (r, n) = dims(out);
                let norms = ops::row_norms(val(a).data(), r, n);
                let mut dx = vec![0.0; g.len()];
                for (((dxr, gr), yr), norm) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.data().chunks(n))
                    .zip(norms)
                {
                    let norm = norm.max(NORMALIZE_EPS);
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * inner) / norm;
                    }
                }
                send(a, dx);
            }
            &Op::Digamma(a) => {
                let x = val(a).data();
                send(a, g.iter().zip(x).map(|(gv, &xv)| gv * trigamma_unchecked(xv)).collect());
            }
            &Op::LnGamma(a) => {
                let x = val(a).data();
                send(a, g.iter().zip(x).map(|(gv, &xv)| gv * digamma_unchecked(xv)).collect());
            }
            &Op::Sum(a) => send(a, vec![g[0]; val(a).numel()]),
            &Op::SumRows(a) => {
                let n = dims(val(a)).1;
                send(a, g.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect());
            }
            &Op::MeanRows(a) => {
                let m = dims(val(a)).0;
                let scaled: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
                send(a, scaled.repeat(m));
            }
            &Op::Diag(a) => {
                let n = g.len();
                let mut dx = vec![0.0; n * n];
                for (i, gv) in g.iter().enumerate() {
                    dx[i * n + i] = *gv;
                }
                send(a, dx);
            }
            &Op::SliceRows { src, start } => {
                let n = dims(out).1;
                let mut dx = vec![0.0; val(src).numel()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                send(src, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::GatherRows { table, indices } => {
                let n = dims(out).1;
                let mut dx = vec![0.0; val(*table).numel()];
                for (row, &i) in g.chunks(n).zip(indices) {
                    dx[i * n..(i + 1) * n].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*table, dx);
            }
        }
    }
}
