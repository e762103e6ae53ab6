//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once in reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: `(inputs, output, output_grad) -> input grads`.
pub type CustomBackward<'p> = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + 'p>;

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<'p> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Row {
        input: Var,
        row: usize,
    },
    Pick {
        input: Var,
        index: usize,
    },
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSumExp(Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<'p>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op<'p>,
    requires_grad: bool,
}

/// A recorded computation. Single-threaded; build one per example or batch.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(x)` with the max-shift trick.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn matmul_values(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    match b.rank() {
        1 if b.shape()[0] == k => {
            let bd = b.data();
            let out = (0..m)
                .map(|i| a.row(i).iter().zip(bd).map(|(x, y)| x * y).sum())
                .collect();
            Ok(Tensor::vector(out))
        }
        2 if b.shape()[0] == k => {
            let n = b.shape()[1];
            let mut out = vec![0.0; m * n];
            let bd = b.data();
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in a.row(i).iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        _ => Err(Error::shape(op, a.shape(), b.shape())),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'p>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.nodes[var.0].value.get()
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).item()
    }

    /// Differentiable leaf borrowing an existing tensor (a model parameter).
    pub fn leaf(&mut self, tensor: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(tensor),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf owning its value.
    pub fn leaf_owned(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Constant, false)
    }

    /// Non-differentiable input borrowing an existing tensor.
    pub fn constant_ref(&mut self, tensor: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(tensor),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product; the right operand may be a vector (matrix-vector product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_values("matmul", self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same element count")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.map_value(a, |x| x * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Flattens every input and concatenates them into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", &[], &[]));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Gathers rows of a rank-2 table into an `[rows.len(), cols]` matrix.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::shape("gather", t.shape(), &[rows.len()]));
        }
        let cols = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row `row` of a rank-2 tensor, as a vector.
    pub fn row(&mut self, input: Var, row: usize) -> Result<Var> {
        let t = self.value(input);
        if t.rank() != 2 || row >= t.shape()[0] {
            return Err(Error::shape("row", t.shape(), &[row]));
        }
        let value = Tensor::vector(t.row(row).to_vec());
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Row { input, row }, rg))
    }

    /// Single element (flat row-major index) as a scalar.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var> {
        let t = self.value(input);
        if index >= t.len() {
            return Err(Error::shape("pick", t.shape(), &[index]));
        }
        let value = Tensor::scalar(t.data()[index]);
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Pick { input, index }, rg))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.at(i, j);
            }
        }
        let value = Tensor::matrix(c, r, data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Transpose(input), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_value(a, sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map_value(a, f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.is_empty() {
            return Err(Error::shape("softmax", t.shape(), &[]));
        }
        let value = Tensor::vector(softmax(t.data()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// `ln Σ exp` over all elements, as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("log_sum_exp", t.shape(), &[]));
        }
        let value = Tensor::scalar(log_sum_exp(t.data()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::LogSumExp(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", t.shape(), &[]));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Records an op whose forward value was computed by the caller and whose
    /// backward is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward<'p>) -> Var {
        let rg = self.needs(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Elementwise map with a caller-supplied derivative `d(x, y)` where `y = f(x)`.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64, f64) -> f64 + 'p,
    ) -> Var {
        let value = self.map_value(a, f);
        self.custom(
            &[a],
            value,
            Box::new(move |inputs, out, go| {
                let data = inputs[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(go.data())
                    .map(|((&x, &y), &g)| derivative(x, y) * g)
                    .collect();
                vec![Tensor::new(out.shape().to_vec(), data).expect("same shape")]
            }),
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &go, &mut grads);
            grads[idx] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(node.value.get().shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node<'p>, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = go.data();
        let out = node.value.get();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                if tb.rank() == 1 {
                    self.accumulate(grads, *a, |da| {
                        for i in 0..m {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (d, &bv) in da[i * k..(i + 1) * k].iter_mut().zip(tb.data()) {
                                *d += gi * bv;
                            }
                        }
                    });
                    self.accumulate(grads, *b, |db| {
                        for (i, &gi) in g.iter().enumerate().take(m) {
                            for (d, &av) in db.iter_mut().zip(ta.row(i)) {
                                *d += gi * av;
                            }
                        }
                    });
                } else {
                    let n = tb.shape()[1];
                    self.accumulate(grads, *a, |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                da[i * k + p] += g[i * n..(i + 1) * n]
                                    .iter()
                                    .zip(brow)
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            }
                        }
                    });
                    self.accumulate(grads, *b, |db| {
                        for i in 0..m {
                            for p in 0..k {
                                let av = ta.at(i, p);
                                for j in 0..n {
                                    db[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((x, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                        *x += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| {
                    for (x, gv) in d.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { table, rows } => {
                let cols = self.value(*table).shape()[1];
                self.accumulate(grads, *table, |d| {
                    for (r, &row) in rows.iter().enumerate() {
                        add_into(
                            &mut d[row * cols..(row + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                });
            }
            Op::Row { input, row } => {
                let cols = self.value(*input).shape()[1];
                self.accumulate(grads, *input, |d| {
                    add_into(&mut d[row * cols..(row + 1) * cols], g)
                });
            }
            Op::Pick { input, index } => {
                self.accumulate(grads, *input, |d| d[*index] += g[0]);
            }
            Op::Transpose(input) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                self.accumulate(grads, *input, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |d| {
                    for ((x, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *x += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |d| {
                    for ((x, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *x += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *a, |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *x += yv * (gv - dot);
                    }
                });
            }
            Op::LogSumExp(a) => {
                let lse = out.item();
                let xs = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for (x, &v) in d.iter_mut().zip(xs) {
                        *x += g[0] * (v - lse).exp();
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |d| {
                    for x in d.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |d| {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = backward(&values, out, go);
                for (&v, ig) in inputs.iter().zip(&input_grads) {
                    self.accumulate(grads, v, |d| add_into(d, ig.data()));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
