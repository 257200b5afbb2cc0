//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output and remembers its parents, so node indices are already
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//! Graphs are cheap to build and are rebuilt for every forward pass.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Negative slope used by every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Neg,
    Square,
    /// `sqrt(x + eps)`.
    Sqrt(f64),
    /// `ln(max(x, floor))`; the gradient is zero below the floor.
    LnClamped(f64),
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// Column-wise standardisation; saves `1/sqrt(var + eps)` per column.
    BatchNorm(Var, Vec<f64>),
    Pick(Var, usize),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Transpose(x)
            | Op::SelectRows(x, _)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::SumRows(x)
            | Op::SumCols(x)
            | Op::BatchNorm(x, _)
            | Op::Pick(x, _) => vec![*x],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(xs, _) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::SelectRows(..) => "select_rows",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::BatchNorm(..) => "batch_norm",
            Op::Pick(..) => "pick",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node, zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let out = self.value(x).map(|v| unary_forward(kind, v));
        self.push(Op::Unary(kind, x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::LeakyRelu(LEAKY_SLOPE), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var, eps: f64) -> Var {
        self.unary(UnaryKind::Sqrt(eps), x)
    }

    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(UnaryKind::LnClamped(floor), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    /// Elementwise binary op. Shapes must match unless one side is a scalar.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(Error::shape(op, va.shape(), vb.shape()));
        };
        Ok(self.push(Op::Binary(kind, a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(Op::Scale(x, c), out)
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(Op::Shift(x), out)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.shift(n, 1.0)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        let out = transposed(v);
        Ok(self.push(Op::Transpose(x), out))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Tensor("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Tensor(format!("concat axis {axis} out of range")));
        }
        let first = self.value(xs[0]).shape().to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * first[1]);
            for &x in xs {
                data.extend_from_slice(self.value(x).data());
            }
            Tensor::new(vec![total, first[1]], data)?
        } else {
            let rows = first[0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &x in xs {
                    data.extend_from_slice(self.value(x).row_slice(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(self.push(Op::Concat(xs.to_vec(), axis), out))
    }

    /// Gathers rows (repeats allowed) into a new `[indices.len(), cols]` tensor.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.rows();
        if indices.is_empty() {
            return Err(Error::Tensor("select_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Tensor(format!("row {bad} out of range for {:?}", v.shape())));
        }
        let mut data = Vec::with_capacity(indices.len() * v.cols());
        for &i in indices {
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(vec![indices.len(), v.cols()], data)?;
        Ok(self.push(Op::SelectRows(x, indices.to_vec()), out))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.select_rows(x, &[i])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = v.clone().reshaped(shape.to_vec());
        Ok(self.push(Op::Reshape(x), out))
    }

    // ---- reductions --------------------------------------------------------

    /// Softmax over all entries of a vector, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Tensor("softmax of empty input".into()));
        }
        let out = Tensor::new(v.shape().to_vec(), softmax_values(v.data()))?;
        Ok(self.push(Op::Softmax(x), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), out)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(Op::MeanAll(x), out)
    }

    /// Sum along columns of each row: `[r, c] -> [r, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let out = Tensor::new(vec![v.rows(), 1], data).expect("rows > 0");
        self.push(Op::SumRows(x), out)
    }

    /// Sum over rows: `[r, c] -> [1, c]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (d, s) in data.iter_mut().zip(v.row_slice(r)) {
                *d += s;
            }
        }
        let out = Tensor::new(vec![1, v.cols()], data).expect("cols > 0");
        self.push(Op::SumCols(x), out)
    }

    /// Adds a `[1, c]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(Op::AddRow(x, row), out))
    }

    /// Multiplies every row of `x` elementwise by a `[1, c]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(Op::MulRow(x, row), out))
    }

    fn row_broadcast(
        &self,
        x: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vx.shape().len() != 2 || vr.shape() != [1, vx.cols()] {
            return Err(Error::shape(op, vx.shape(), vr.shape()));
        }
        let c = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, vr.data()[i % c]))
            .collect();
        Tensor::new(vx.shape().to_vec(), data)
    }

    /// Standardises every column of `x` with batch statistics (biased variance).
    /// Returns the normalised tensor together with the per-column mean and variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::shape("batch_norm", v.shape(), &[]));
        }
        let (n, c) = (v.rows(), v.cols());
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(v.row_slice(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, x), m) in var.iter_mut().zip(v.row_slice(r)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let node = self.push(Op::BatchNorm(x, inv_std), out);
        Ok((node, mean, var))
    }

    /// Single entry of a tensor (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::Tensor(format!("pick index {index} out of range for {:?}", v.shape())));
        }
        let out = Tensor::scalar(v.data()[index]);
        Ok(self.push(Op::Pick(x, index), out))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d root / d node` into every node that requires a gradient.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pass: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        pass[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pass);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, pass: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, grad: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut pass[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * unary_derivative(*kind, xi, yi))
                    .collect();
                send(*x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => elementwise_times(g, vb),
                };
                let gb = match kind {
                    BinaryKind::Add => g.clone(),
                    BinaryKind::Sub => g.scale(-1.0),
                    BinaryKind::Mul => elementwise_times(g, va),
                };
                send(*a, reduce_to(ga, va.shape()));
                send(*b, reduce_to(gb, vb.shape()));
            }
            Op::Scale(x, c) => send(*x, g.scale(*c)),
            Op::Shift(x) => send(*x, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), vb.data(), &mut da, m, n, k);
                    send(*a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(va.data(), g.data(), &mut db, m, k, n);
                    send(*b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Transpose(x) => send(*x, transposed(g)),
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for &x in xs {
                    let s = self.value(x).shape();
                    let (r, c) = (s[0], s[1]);
                    let data = if *axis == 0 {
                        g.data()[offset * c..(offset + r) * c].to_vec()
                    } else {
                        (0..r)
                            .flat_map(|row| g.row_slice(row)[offset..offset + c].iter().copied())
                            .collect()
                    };
                    offset += if *axis == 0 { r } else { c };
                    send(x, Tensor::new(vec![r, c], data).expect("shape"));
                }
            }
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (k, &r) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g.row_slice(k)) {
                        *d += s;
                    }
                }
                send(*x, dx);
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                send(*x, g.clone().reshaped(s));
            }
            Op::Softmax(x) => {
                let dot: f64 = g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gi)| y * (gi - dot))
                    .collect();
                send(*x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::SumAll(x) => {
                send(*x, Tensor::full(self.value(*x).shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                send(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let data = (0..xv.len()).map(|i| g.data()[i / c]).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let data = (0..xv.len()).map(|i| g.data()[i % c]).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                send(*row, column_sums(g));
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let c = xv.cols();
                let dx = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * rv.data()[i % c])
                    .collect();
                send(*x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                let prod = elementwise_times(g, xv);
                send(*row, column_sums(&prod));
            }
            Op::BatchNorm(x, inv_std) => {
                // dx = inv_std / n * (n*g - sum(g) - y * sum(g*y)), per column
                let (n, c) = (out.rows(), out.cols());
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for (i, (&gi, &yi)) in g.data().iter().zip(out.data()).enumerate() {
                    sum_g[i % c] += gi;
                    sum_gy[i % c] += gi * yi;
                }
                let nf = n as f64;
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .enumerate()
                    .map(|(i, (&gi, &yi))| {
                        let j = i % c;
                        inv_std[j] / nf * (nf * gi - sum_g[j] - yi * sum_gy[j])
                    })
                    .collect();
                send(*x, Tensor::new(vec![n, c], data).expect("shape"));
            }
            Op::Pick(x, index) => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                dx.data_mut()[*index] = g.item();
                send(*x, dx);
            }
        }
    }
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        UnaryKind::Neg => -x,
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt(eps) => (x + eps).sqrt(),
        UnaryKind::LnClamped(floor) => x.max(floor).ln(),
        UnaryKind::Exp => x.exp(),
    }
}

/// Derivative of a unary op given its input `x` and output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        UnaryKind::Neg => -1.0,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt(_) => 0.5 / y,
        UnaryKind::LnClamped(floor) => {
            if x > floor {
                1.0 / x
            } else {
                0.0
            }
        }
        UnaryKind::Exp => y,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn elementwise_times(g: &Tensor, other: &Tensor) -> Tensor {
    if other.is_scalar() && !g.is_scalar() {
        return g.scale(other.item());
    }
    let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape")
}

/// Sums a broadcast gradient back down to a scalar operand when needed.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::full(shape, g.sum())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut data = vec![0.0; c];
    for (i, v) in g.data().iter().enumerate() {
        data[i % c] += v;
    }
    Tensor::new(vec![1, c], data).expect("shape")
}

fn transposed(v: &Tensor) -> Tensor {
    let (r, c) = (v.rows(), v.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = v.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("shape")
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}
