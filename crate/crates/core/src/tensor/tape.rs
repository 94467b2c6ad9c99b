use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::{shape_err, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    VStack(Vec<usize>),
    Mean { input: usize, axis: usize },
    Sum(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: usize, indices: Vec<usize> },
    Transpose(usize),
    SliceCols { input: usize, start: usize },
    Row { input: usize, index: usize },
    SoftMargin { logits: usize, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic gradient tape. Operations append nodes; [`Tape::backward`] walks
/// them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `[m,k] x [k,n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g [m,n] x b^T` where `b` is `[k,n]`.
fn mm_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T x g` where `a` is `[m,k]` and `g` is `[m,n]`.
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let t = self.value(v);
        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.value(v).data().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Records a leaf. `requires_grad` leaves receive gradients.
    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Pulls a named parameter onto the tape. Repeated calls return the same
    /// leaf so that all uses accumulate into one gradient.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))?;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let v = self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
            true,
        );
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Matrix product. A vector left operand is treated as a single row and
    /// yields a vector.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let (ta, tb) = (self.value(a), self.value(b));
            if tb.shape().len() != 2 {
                return shape_err("matmul", format!("rhs must be a matrix, got {:?}", tb.shape()));
            }
            let (m, k) = (ta.rows(), ta.cols());
            let (k2, n) = (tb.shape()[0], tb.shape()[1]);
            if k != k2 {
                return shape_err(
                    "matmul",
                    format!("inner dimensions differ: {:?} x {:?}", ta.shape(), tb.shape()),
                );
            }
            let data = mm(ta.data(), tb.data(), m, k, n);
            let shape = if ta.shape().len() == 1 { vec![n] } else { vec![m, n] };
            (Tensor::new(shape, data)?, false)
        };
        let rg = rg || self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// Elementwise sum of equal shapes, or a matrix plus a row vector
    /// broadcast over rows.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (value, op) = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                (Tensor::new(ta.shape().to_vec(), data)?, Op::Add(a.0, b.0))
            } else if ta.shape().len() == 2 && tb.shape().len() == 1 && tb.len() == ta.cols() {
                let c = ta.cols();
                let data = ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + tb.data()[i % c])
                    .collect();
                (Tensor::new(ta.shape().to_vec(), data)?, Op::AddRow(a.0, b.0))
            } else {
                return shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape()));
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.map_value(a, |x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a.0, factor), rg)
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// Concatenation along the last axis. Inputs share rank and row count.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let ts: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
            let Some(first) = ts.first() else {
                return shape_err("concat", "no inputs");
            };
            let (rank, rows) = (first.shape().len(), first.rows());
            if ts.iter().any(|t| t.shape().len() != rank || t.rows() != rows) {
                let shapes: Vec<_> = ts.iter().map(|t| t.shape().to_vec()).collect();
                return shape_err("concat", format!("incompatible shapes {shapes:?}"));
            }
            let cols: usize = ts.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &ts {
                    data.extend_from_slice(t.row(r));
                }
            }
            let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
            Tensor::new(shape, data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.iter().map(|v| v.0).collect()), rg))
    }

    /// Stacks rows. Vectors count as one row each.
    pub fn vstack(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let ts: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
            let Some(first) = ts.first() else {
                return shape_err("vstack", "no inputs");
            };
            let cols = first.cols();
            if ts.iter().any(|t| t.cols() != cols) {
                let shapes: Vec<_> = ts.iter().map(|t| t.shape().to_vec()).collect();
                return shape_err("vstack", format!("column counts differ {shapes:?}"));
            }
            let rows: usize = ts.iter().map(|t| t.rows()).sum();
            let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::matrix(rows, cols, data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::VStack(parts.iter().map(|v| v.0).collect()), rg))
    }

    /// Mean over `axis`. For a matrix, axis 0 averages rows into a vector of
    /// length `cols`, axis 1 averages columns. For a vector, axis 0 gives a scalar.
    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            match (ta.shape().len(), axis) {
                (1, 0) => Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64),
                (2, 0) => {
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        out.iter_mut().zip(ta.row(i)).for_each(|(o, x)| *o += x);
                    }
                    out.iter_mut().for_each(|o| *o /= r as f64);
                    Tensor::vector(out)?
                }
                (2, 1) => {
                    let c = ta.cols() as f64;
                    let out = (0..ta.rows()).map(|i| ta.row(i).iter().sum::<f64>() / c).collect();
                    Tensor::vector(out)?
                }
                _ => {
                    return shape_err("mean", format!("axis {axis} invalid for {:?}", ta.shape()))
                }
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mean { input: a.0, axis }, rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a.0), rg)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.map_value(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.map_value(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let value = self.map_value(a, gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a.0), rg)
    }

    /// Softmax over the last axis of each row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let ta = self.value(a);
            let c = ta.cols();
            let mut data = Vec::with_capacity(ta.len());
            for r in 0..ta.rows() {
                let row = ta.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                data.extend(exps.iter().map(|e| e / z));
            }
            debug_assert_eq!(data.len(), ta.rows() * c);
            Tensor::new(ta.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a.0), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, rstd) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let c = tx.cols();
            if tg.shape() != [c] || tb.shape() != [c] {
                return shape_err(
                    "layer_norm",
                    format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
                );
            }
            let mut xhat = Vec::with_capacity(tx.len());
            let mut rstd = Vec::with_capacity(tx.rows());
            let mut out = Vec::with_capacity(tx.len());
            for r in 0..tx.rows() {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * rs;
                    xhat.push(h);
                    out.push(h * tg.data()[j] + tb.data()[j]);
                }
            }
            (Tensor::new(tx.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = {
            let tt = self.value(table);
            if tt.shape().len() != 2 {
                return shape_err("embedding", format!("table must be a matrix, got {:?}", tt.shape()));
            }
            if indices.is_empty() {
                return shape_err("embedding", "empty index list");
            }
            let vocab = tt.rows();
            let mut data = Vec::with_capacity(indices.len() * tt.cols());
            for &i in indices {
                if i >= vocab {
                    return Err(TensorError::Index {
                        what: "embedding table",
                        index: i,
                        len: vocab,
                    });
                }
                data.extend_from_slice(tt.row(i));
            }
            Tensor::matrix(indices.len(), tt.cols(), data)?
        };
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            if ta.shape().len() != 2 {
                return shape_err("transpose", format!("needs a matrix, got {:?}", ta.shape()));
            }
            let (r, c) = (ta.rows(), ta.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ta.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    /// Columns `start..start + len` along the last axis.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            let c = ta.cols();
            if len == 0 || start + len > c {
                return shape_err("slice_cols", format!("{start}..{} of {c} columns", start + len));
            }
            let data: Vec<f64> = (0..ta.rows())
                .flat_map(|r| ta.row(r)[start..start + len].iter().copied())
                .collect();
            let shape = if ta.shape().len() == 1 { vec![len] } else { vec![ta.rows(), len] };
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols { input: a.0, start }, rg))
    }

    /// One row of a matrix as a vector.
    pub fn row(&self, a: Var, index: usize) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            if ta.shape().len() != 2 {
                return shape_err("row", format!("needs a matrix, got {:?}", ta.shape()));
            }
            if index >= ta.rows() {
                return Err(TensorError::Index {
                    what: "matrix rows",
                    index,
                    len: ta.rows(),
                });
            }
            Tensor::vector(ta.row(index).to_vec())?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Row { input: a.0, index }, rg))
    }

    /// Multi-label soft margin loss on raw logits:
    /// `-(1/C) * sum_i [y_i ln s(x_i) + (1 - y_i) ln(1 - s(x_i))]`, computed via
    /// softplus so saturated logits stay finite.
    pub fn soft_margin_loss(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        let value = {
            let tl = self.value(logits);
            if tl.shape().len() != 1 || tl.len() != targets.len() {
                return shape_err(
                    "soft_margin_loss",
                    format!("logits {:?} vs {} targets", tl.shape(), targets.len()),
                );
            }
            let c = targets.len() as f64;
            let total: f64 = tl
                .data()
                .iter()
                .zip(targets)
                .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
                .sum();
            Tensor::scalar(total / c)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftMargin {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every node
    /// that requires them.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop_node(&nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::gradients`] and adds each parameter leaf's gradient into
    /// the matching entry of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &grads.grads[i] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if needs(*a) {
                accumulate(grads, *a, mm_bt(g, tb.data(), m, k, n));
            }
            if needs(*b) {
                accumulate(grads, *b, mm_at(ta.data(), g, m, k, n));
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::AddRow(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                let c = val(*b).len();
                let mut gb = vec![0.0; c];
                for (idx, gv) in g.iter().enumerate() {
                    gb[idx % c] += gv;
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
            }
        }
        Op::Scale(a, f) => {
            if needs(*a) {
                accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
        }
        Op::Concat(parts) => {
            let out = &nodes[i].value;
            let (rows, total) = (out.rows(), out.cols());
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if needs(p) {
                    let gp = (0..rows)
                        .flat_map(|r| g[r * total + offset..r * total + offset + c].iter().copied())
                        .collect();
                    accumulate(grads, p, gp);
                }
                offset += c;
            }
        }
        Op::VStack(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    accumulate(grads, p, g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::Mean { input, axis } => {
            if needs(*input) {
                let t = val(*input);
                let (r, c) = (t.rows(), t.cols());
                let gi = match (t.shape().len(), axis) {
                    (1, _) => vec![g[0] / c as f64; c],
                    (_, 0) => (0..r * c).map(|idx| g[idx % c] / r as f64).collect(),
                    _ => (0..r * c).map(|idx| g[idx / c] / c as f64).collect(),
                };
                accumulate(grads, *input, gi);
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
        }
        Op::Tanh(a) => {
            if needs(*a) {
                let y = nodes[i].value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = nodes[i].value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let x = val(*a).data();
                accumulate(grads, *a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
        }
        Op::Softmax(a) => {
            if needs(*a) {
                let y = &nodes[i].value;
                let c = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *a, ga);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let tg = val(*gamma);
            let c = tg.len();
            let rows = rstd.len();
            if needs(*gamma) {
                let mut gg = vec![0.0; c];
                for (idx, gv) in g.iter().enumerate() {
                    gg[idx % c] += gv * xhat[idx];
                }
                accumulate(grads, *gamma, gg);
            }
            if needs(*beta) {
                let mut gb = vec![0.0; c];
                for (idx, gv) in g.iter().enumerate() {
                    gb[idx % c] += gv;
                }
                accumulate(grads, *beta, gb);
            }
            if needs(*x) {
                let mut gx = Vec::with_capacity(rows * c);
                for (r, rs) in rstd.iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    let dxhat: Vec<f64> =
                        g[span.clone()].iter().zip(tg.data()).map(|(g, w)| g * w).collect();
                    let xh = &xhat[span];
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum();
                    let n = c as f64;
                    gx.extend(
                        dxhat
                            .iter()
                            .zip(xh)
                            .map(|(d, h)| rs / n * (n * d - sum_d - h * sum_dx)),
                    );
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Embedding { table, indices } => {
            if needs(*table) {
                let t = val(*table);
                let c = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        gt[idx * c + j] += g[r * c + j];
                    }
                }
                accumulate(grads, *table, gt);
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                let t = val(*a);
                let (r, c) = (t.rows(), t.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
        Op::SliceCols { input, start } => {
            if needs(*input) {
                let t = val(*input);
                let c = t.cols();
                let len = nodes[i].value.cols();
                let mut ga = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    ga[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, *input, ga);
            }
        }
        Op::Row { input, index } => {
            if needs(*input) {
                let t = val(*input);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                ga[index * c..(index + 1) * c].copy_from_slice(g);
                accumulate(grads, *input, ga);
            }
        }
        Op::SoftMargin { logits, targets } => {
            if needs(*logits) {
                let c = targets.len() as f64;
                let x = val(*logits).data();
                let gl = x
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / c)
                    .collect();
                accumulate(grads, *logits, gl);
            }
        }
    }
}
