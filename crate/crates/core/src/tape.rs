//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.
//! A tape is rebuilt for every forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowVector(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Square(usize),
    PowScalar(usize, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Reshape(usize),
    ConcatCols(usize, usize),
    Gather(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// An ordered record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` did not participate.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches node"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient flowed into `v`.
    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn rank2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Rank { op, expected: 2, got: shape.len() }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records `t` as a leaf. Gradients are tracked when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records `t` as a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::Shape(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let value: Vec<f64> = n.value.iter().map(|&x| f(x)).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value: Vec<f64> = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (shape, needs) = (na.shape.clone(), na.needs_grad || nb.needs_grad);
        Ok(self.push(shape, value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2(self.shape(a), "matmul")?;
        let (k2, n) = rank2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ for [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], value, Op::MatMul(a.0, b.0), needs))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2(self.shape(a), "transpose2d")?;
        let value = transpose_raw(self.value(a), m, n);
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![n, m], value, Op::Transpose(a.0), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, Op::Div(a.0, b.0), "div", |x, y| x / y)?;
        if !self.value(out).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("div produced a non-finite value".into()));
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + c)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_vector(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = rank2(self.shape(a), "add_row_vector")?;
        let bs = self.shape(bias);
        if bs.iter().product::<usize>() != n {
            return Err(Error::Shape(format!(
                "add_row_vector: bias of shape {bs:?} does not match [{m}, {n}]"
            )));
        }
        let (av, bv) = (self.value(a), self.value(bias));
        let value: Vec<f64> = av.iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect();
        let needs = self.node(a).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(vec![m, n], value, Op::AddRowVector(a.0, bias.0), needs))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), libm::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + libm::exp(-x))
            } else {
                let e = libm::exp(x);
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), libm::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Numeric(format!("ln of non-positive or non-finite value {bad}")));
        }
        Ok(self.unary(a, Op::Ln(a.0), libm::log))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Numeric(format!("sqrt of non-positive or non-finite value {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt(a.0), libm::sqrt))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// Elementwise `a^e` for non-negative `a`.
    pub fn pow_scalar(&mut self, a: Var, e: f64) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Numeric(format!("pow of negative or non-finite value {bad}")));
        }
        if e < 1.0 && e != 0.0 && self.value(a).contains(&0.0) {
            return Err(Error::Numeric(format!("pow with exponent {e} is not differentiable at 0")));
        }
        Ok(self.unary(a, Op::PowScalar(a.0, e), |x| libm::pow(x, e)))
    }

    fn check_finite(&self, a: Var, op: &str) -> Result<()> {
        if self.value(a).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op}: non-finite input")))
        }
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2(self.shape(a), "softmax_rows")?;
        self.check_finite(a, "softmax_rows")?;
        let x = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = libm::exp(v - mx);
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![m, n], value, Op::SoftmaxRows(a.0), needs))
    }

    /// Row-wise log-softmax, `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2(self.shape(a), "log_softmax_rows")?;
        self.check_finite(a, "log_softmax_rows")?;
        let x = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
            for (o, &v) in value[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![m, n], value, Op::LogSoftmaxRows(a.0), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s: f64 = n.value.iter().sum();
        let needs = n.needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a.0), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s: f64 = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let needs = n.needs_grad;
        self.push(vec![1], vec![s], Op::Mean(a.0), needs)
    }

    /// Sums each row of an `m x n` matrix, producing a length-`m` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2(self.shape(a), "sum_rows")?;
        let x = self.value(a);
        let value: Vec<f64> = (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect();
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![m], value, Op::SumRows(a.0), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(Error::Shape(format!("reshape: {:?} cannot become {shape:?}", n.shape)));
        }
        let (value, needs) = (n.value.clone(), n.needs_grad);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a.0), needs))
    }

    /// Concatenates two matrices with equal row counts along the columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = rank2(self.shape(a), "concat_cols")?;
        let (m2, nb) = rank2(self.shape(b), "concat_cols")?;
        if m != m2 {
            return Err(Error::Shape(format!(
                "concat_cols: row counts differ for [{m}, {na}] and [{m2}, {nb}]"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            value.extend_from_slice(&av[i * na..(i + 1) * na]);
            value.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, na + nb], value, Op::ConcatCols(a.0, b.0), needs))
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`. Covers
    /// row selection, element picking and patch reordering.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != indices.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "gather: {} indices cannot fill shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n.value.len()) {
            return Err(Error::Shape(format!(
                "gather: index {bad} out of bounds for shape {:?}",
                n.shape
            )));
        }
        let value: Vec<f64> = indices.iter().map(|&i| n.value[i]).collect();
        let needs = n.needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Gather(a.0, indices), needs))
    }

    /// Rows `rows` of an `m x n` matrix, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (_, n) = rank2(self.shape(a), "select_rows")?;
        let indices = rows.iter().flat_map(|&r| (r * n)..(r * n + n)).collect();
        self.gather(a, indices, &[rows.len(), n])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!("backward: loss must be a scalar, got shape {shape:?}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.shape.clone()).collect() })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |j: usize| self.nodes[j].needs_grad;
        let val = |j: usize| self.nodes[j].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if wants(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    accumulate(&mut grads[*a], matmul_raw(g, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    accumulate(&mut grads[*b], matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                accumulate(&mut grads[*a], transpose_raw(g, n, m));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(&mut grads[*a], g.iter().zip(bv).map(|(x, y)| x / y).collect());
                }
                if wants(*b) {
                    let d = g.iter().zip(av.iter().zip(bv)).map(|(x, (p, q))| -x * p / (q * q));
                    accumulate(&mut grads[*b], d.collect());
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[*a], g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => accumulate(&mut grads[*a], g.to_vec()),
            Op::AddRowVector(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    let n = self.nodes[*b].value.len();
                    let mut db = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        db[i % n] += x;
                    }
                    accumulate(&mut grads[*b], db);
                }
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y));
                accumulate(&mut grads[*a], d.collect());
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y));
                accumulate(&mut grads[*a], d.collect());
            }
            Op::Exp(a) => {
                accumulate(&mut grads[*a], g.iter().zip(&node.value).map(|(x, y)| x * y).collect())
            }
            Op::Ln(a) => {
                accumulate(&mut grads[*a], g.iter().zip(val(*a)).map(|(x, y)| x / y).collect())
            }
            Op::Sqrt(a) => {
                let d = g.iter().zip(&node.value).map(|(x, y)| x * 0.5 / y);
                accumulate(&mut grads[*a], d.collect());
            }
            Op::Abs(a) => {
                let d = g.iter().zip(val(*a)).map(|(x, y)| {
                    if *y > 0.0 {
                        *x
                    } else if *y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[*a], d.collect());
            }
            Op::Square(a) => {
                accumulate(&mut grads[*a], g.iter().zip(val(*a)).map(|(x, y)| 2.0 * x * y).collect())
            }
            Op::PowScalar(a, e) => {
                let d = g.iter().zip(val(*a)).map(|(x, y)| {
                    if *e == 0.0 {
                        0.0
                    } else {
                        x * e * libm::pow(*y, e - 1.0)
                    }
                });
                accumulate(&mut grads[*a], d.collect());
            }
            Op::SoftmaxRows(a) => {
                let n = node.shape[1];
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.shape[1];
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gr[j] - libm::exp(yr[j]) * total;
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::Sum(a) => accumulate(&mut grads[*a], vec![g[0]; self.nodes[*a].value.len()]),
            Op::Mean(a) => {
                let len = self.nodes[*a].value.len();
                accumulate(&mut grads[*a], vec![g[0] / len as f64; len]);
            }
            Op::SumRows(a) => {
                let n = self.nodes[*a].shape[1];
                let d = (0..self.nodes[*a].value.len()).map(|i| g[i / n]).collect();
                accumulate(&mut grads[*a], d);
            }
            Op::Reshape(a) => accumulate(&mut grads[*a], g.to_vec()),
            Op::ConcatCols(a, b) => {
                let na = self.nodes[*a].shape[1];
                let nb = self.nodes[*b].shape[1];
                let w = na + nb;
                if wants(*a) {
                    let d = g.chunks(w).flat_map(|r| r[..na].iter().copied()).collect();
                    accumulate(&mut grads[*a], d);
                }
                if wants(*b) {
                    let d = g.chunks(w).flat_map(|r| r[na..].iter().copied()).collect();
                    accumulate(&mut grads[*b], d);
                }
            }
            Op::Gather(a, indices) => {
                let mut d = vec![0.0; self.nodes[*a].value.len()];
                for (x, &i) in g.iter().zip(indices) {
                    d[i] += x;
                }
                accumulate(&mut grads[*a], d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(&Tensor::eye(2));
        let out = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(out), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn transpose_row_vector() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let out = tape.transpose2d(a).unwrap();
        assert_eq!(tape.shape(out), &[3, 1]);
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0]);
        let r3 = tape.constant(&Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(tape.transpose2d(r3), Err(Error::Rank { expected: 2, got: 3, .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let col = tape.constant(&t(&[3, 1], &[-5.0, 0.0, 12.0]));
        let out = tape.softmax_rows(col).unwrap();
        assert_eq!(tape.value(out), &[1.0, 1.0, 1.0]);

        let a = tape.constant(&t(&[2, 2], &[0.0, 0.0, 0.0, libm::log(3.0)]));
        let out = tape.softmax_rows(a).unwrap();
        let v = tape.value(out);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[2, 3, 2], 0.7).with_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_convention_is_mean_of_squares() {
        // mse(x, 0) = mean(x^2); at x = [2] the value is 4 and the gradient 2x = 4.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_grad());
        let zero = tape.constant(&Tensor::zeros(&[1]));
        let loss = crate::losses::mse(&mut tape, x, zero).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 4.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_participating_and_constant_leaves_get_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[2], 3.0).with_grad());
        let unused = tape.leaf(&Tensor::full(&[2], 1.0).with_grad());
        let c = tape.constant(&Tensor::full(&[2], 5.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[5.0, 5.0]);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
        assert_eq!(g.get(c).data(), &[0.0, 0.0]);
        assert!(!g.touched(unused));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1], 3.0).with_grad());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[3.0]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let picked = tape.gather(x, alloc::vec![3, 3, 0], &[3]).unwrap();
        assert_eq!(tape.value(picked), &[4.0, 4.0, 1.0]);
        let s = tape.sum(picked);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 0.0, 0.0, 2.0]);
    }
}
