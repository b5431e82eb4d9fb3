//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes
//! are appended in execution order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep. One tape
//! lives for one training step.

use crate::error::{Error, Result};

/// Row-major dense array. Scalars have an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// (rows, row width) viewing the leading axis as rows. Rank-1 tensors are one row.
    pub fn row_layout(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.data.len() / self.shape[0]),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, w) = self.row_layout();
        &self.data[i * w..(i + 1) * w]
    }
}

/// Handle to a node on a [`Tape`].
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
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    L2Normalize { input: usize, norms: Vec<f64> },
    LogSoftmax(usize),
    GatherRows { input: usize, rows: Vec<usize> },
    Gather { input: usize, indices: Vec<usize> },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_FLOOR: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.needs(&[a.0]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a.0), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a.0, b.0]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// `a[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::dim("add_row", sa, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let value = Tensor {
            shape: sa.to_vec(),
            data,
        };
        let rg = self.needs(&[a.0, bias.0]);
        Ok(self.push(value, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| x * c).collect(),
        };
        let rg = self.needs(&[a.0]);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| relu_value(x)).collect(),
        };
        let rg = self.needs(&[a.0]);
        self.push(value, Op::Relu(a.0), rg)
    }

    /// Normalizes each row (or the whole vector, for rank ≤ 1) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, w) = va.row_layout();
        let mut data = va.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in data.chunks_exact_mut(w) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a.0]);
        self.push(value, Op::L2Normalize { input: a.0, norms }, rg)
    }

    /// Log-softmax over the last axis, with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to log_softmax".into()));
        }
        let (_, w) = va.row_layout();
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            let lse = logsumexp(row);
            if !lse.is_finite() {
                return Err(Error::Numeric(format!("non-finite logsumexp {lse}")));
            }
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a.0]);
        Ok(self.push(value, Op::LogSoftmax(a.0), rg))
    }

    /// Selects rows along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (n_rows, w) = va.row_layout();
        if va.rank() == 0 {
            return Err(Error::dim("gather_rows", va.shape(), &[rows.len()]));
        }
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= n_rows {
                return Err(Error::Contract(format!("row {r} out of range {n_rows}")));
            }
            data.extend_from_slice(va.row(r));
        }
        let mut shape = va.shape().to_vec();
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows with no rows".into()));
        }
        if va.rank() == 1 {
            shape = vec![rows.len(), w];
        } else {
            shape[0] = rows.len();
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(
            Tensor { shape, data },
            Op::GatherRows {
                input: a.0,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks elements by flat (row-major) index into a rank-1 result.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if indices.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = va
                .data()
                .get(i)
                .ok_or_else(|| Error::Contract(format!("index {i} out of range {}", va.numel())))?;
            data.push(*v);
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                input: a.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks rows of rank-1 or rank-2 inputs with a common row width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, w) = self.value(first).row_layout();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, pw) = v.row_layout();
            if pw != w || v.rank() == 0 {
                return Err(Error::dim("concat_rows", self.shape(first), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&idx);
        Ok(self.push(Tensor::matrix(rows, w, data)?, Op::ConcatRows(idx), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())
            .map_err(|_| Error::dim("reshape", va.shape(), shape))?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.numel() as f64;
        let rg = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Value-identical copy that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Gradients from shared subexpressions are summed. Any non-finite
    /// gradient aborts with [`Error::Numeric`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at node {idx}")));
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |target: usize, contribution: Vec<f64>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contribution)
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.nodes[*a].requires_grad {
                    let bt = transpose_raw(vb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.nodes[*b].requires_grad {
                    let at = transpose_raw(va.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                acc(*a, transpose_raw(g, m, n));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.to_vec());
                let n = self.nodes[*b].value.numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::L2Normalize { input, norms } => {
                let (_, w) = out.row_layout();
                let mut gx = Vec::with_capacity(g.len());
                for ((gy, y), n) in g.chunks_exact(w).zip(out.data().chunks_exact(w)).zip(norms) {
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    gx.extend(gy.iter().zip(y).map(|(gy, y)| (gy - y * dot) / n));
                }
                acc(*input, gx);
            }
            Op::LogSoftmax(a) => {
                let (_, w) = out.row_layout();
                let mut gx = Vec::with_capacity(g.len());
                for (gy, y) in g.chunks_exact(w).zip(out.data().chunks_exact(w)) {
                    let total: f64 = gy.iter().sum();
                    gx.extend(gy.iter().zip(y).map(|(gy, y)| gy - y.exp() * total));
                }
                acc(*a, gx);
            }
            Op::GatherRows { input, rows } => {
                let src = &self.nodes[*input].value;
                let (_, w) = src.row_layout();
                let mut gx = vec![0.0; src.numel()];
                for (gr, &r) in g.chunks_exact(w).zip(rows) {
                    gx[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(s, v)| *s += v);
                }
                acc(*input, gx);
            }
            Op::Gather { input, indices } => {
                let mut gx = vec![0.0; self.nodes[*input].value.numel()];
                for (v, &i) in g.iter().zip(indices) {
                    gx[i] += v;
                }
                acc(*input, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[*a].value.numel()]),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// `max(x, 0)` that keeps NaN, unlike `f64::max`.
pub(crate) fn relu_value(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if x == 0.0 {
                continue;
            }
            out_row.iter_mut().zip(b_row).for_each(|(o, y)| *o += x * y);
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
