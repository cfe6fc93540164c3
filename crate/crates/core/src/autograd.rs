//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix. Backward rules are written in terms of the
//! same differentiable operations, so gradients computed with
//! `create_graph = true` carry their own history and can be differentiated
//! again. Second-order meta-gradients rely on this.
//!
//! Nodes are reference counted and single-threaded; build one graph per
//! thread and share plain `Array2` parameters across threads instead.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

fn with_grad_enabled() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(true));
    NoGradGuard { prev }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Relu(Var),
    Powf(Var, f64),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PadRows(Var, usize),
    PadCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
}

struct Node {
    id: usize,
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn from_op(value: Array2<f64>, op: Op, parents_need_grad: bool) -> Var {
        let record = parents_need_grad && grad_enabled();
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: if record { op } else { Op::Leaf },
            requires_grad: record,
        }))
    }

    /// A leaf that gradients flow into.
    pub fn param(value: Array2<f64>) -> Var {
        Var(Rc::new(Node { id: next_id(), value, op: Op::Leaf, requires_grad: true }))
    }

    pub fn constant(value: Array2<f64>) -> Var {
        Var(Rc::new(Node { id: next_id(), value, op: Op::Leaf, requires_grad: false }))
    }

    pub fn scalar(x: f64) -> Var {
        Var::constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.dim()
    }

    pub fn rows(&self) -> usize {
        self.0.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.ncols()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single entry of a 1x1 value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar");
        self.0.value[[0, 0]]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn parents(&self) -> Vec<&Var> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Powf(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::PadRows(a, _)
            | Op::PadCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a) => vec![a],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.iter().collect(),
        }
    }

    pub fn add(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let v = &self.0.value + &other.0.value;
        Var::from_op(v, Op::Add(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn sub(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let v = &self.0.value - &other.0.value;
        Var::from_op(v, Op::Sub(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let v = &self.0.value * &other.0.value;
        Var::from_op(v, Op::Mul(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn scale(&self, k: f64) -> Var {
        let v = &self.0.value * k;
        Var::from_op(v, Op::Scale(self.clone(), k), self.requires_grad())
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        let v = &self.0.value + k;
        Var::from_op(v, Op::AddScalar(self.clone()), self.requires_grad())
    }

    pub fn matmul(&self, other: &Var) -> Var {
        assert_eq!(self.cols(), other.rows(), "matmul: inner dimension mismatch");
        let v = self.0.value.dot(&other.0.value);
        Var::from_op(v, Op::MatMul(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn t(&self) -> Var {
        let v = self.0.value.t().to_owned();
        Var::from_op(v, Op::Transpose(self.clone()), self.requires_grad())
    }

    pub fn exp(&self) -> Var {
        let v = self.0.value.mapv(f64::exp);
        Var::from_op(v, Op::Exp(self.clone()), self.requires_grad())
    }

    pub fn ln(&self) -> Var {
        let v = self.0.value.mapv(f64::ln);
        Var::from_op(v, Op::Ln(self.clone()), self.requires_grad())
    }

    pub fn tanh(&self) -> Var {
        let v = self.0.value.mapv(f64::tanh);
        Var::from_op(v, Op::Tanh(self.clone()), self.requires_grad())
    }

    pub fn relu(&self) -> Var {
        let v = self.0.value.mapv(|x| x.max(0.0));
        Var::from_op(v, Op::Relu(self.clone()), self.requires_grad())
    }

    pub fn powf(&self, p: f64) -> Var {
        let v = self.0.value.mapv(|x| x.powf(p));
        Var::from_op(v, Op::Powf(self.clone(), p), self.requires_grad())
    }

    /// Column sums as a `1 x n` row.
    pub fn sum_rows(&self) -> Var {
        let v = self.0.value.sum_axis(Axis(0)).insert_axis(Axis(0));
        Var::from_op(v, Op::SumRows(self.clone()), self.requires_grad())
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_cols(&self) -> Var {
        let v = self.0.value.sum_axis(Axis(1)).insert_axis(Axis(1));
        Var::from_op(v, Op::SumCols(self.clone()), self.requires_grad())
    }

    pub fn sum_all(&self) -> Var {
        self.sum_rows().sum_cols()
    }

    pub fn mean_all(&self) -> Var {
        let n = (self.rows() * self.cols()) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn broadcast_rows(&self, m: usize) -> Var {
        assert_eq!(self.rows(), 1, "broadcast_rows expects a single row");
        let v = self.0.value.broadcast((m, self.cols())).expect("broadcast").to_owned();
        Var::from_op(v, Op::BroadcastRows(self.clone()), self.requires_grad())
    }

    /// Repeats an `m x 1` column `n` times.
    pub fn broadcast_cols(&self, n: usize) -> Var {
        assert_eq!(self.cols(), 1, "broadcast_cols expects a single column");
        let v = self.0.value.broadcast((self.rows(), n)).expect("broadcast").to_owned();
        Var::from_op(v, Op::BroadcastCols(self.clone()), self.requires_grad())
    }

    /// Adds a `1 x n` row vector to every row.
    pub fn add_row(&self, row: &Var) -> Var {
        self.add(&row.broadcast_rows(self.rows()))
    }

    /// Multiplies every row elementwise by a `1 x n` row vector.
    pub fn mul_row(&self, row: &Var) -> Var {
        self.mul(&row.broadcast_rows(self.rows()))
    }

    pub fn concat_rows(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.0.value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(Var::requires_grad);
        Var::from_op(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.0.value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(Var::requires_grad);
        Var::from_op(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        let v = self.0.value.slice(s![start..start + len, ..]).to_owned();
        Var::from_op(v, Op::SliceRows(self.clone(), start), self.requires_grad())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let v = self.0.value.slice(s![.., start..start + len]).to_owned();
        Var::from_op(v, Op::SliceCols(self.clone(), start), self.requires_grad())
    }

    /// Places `self` at row offset `start` inside a zero matrix with `total` rows.
    fn pad_rows(&self, start: usize, total: usize) -> Var {
        let mut v = Array2::zeros((total, self.cols()));
        v.slice_mut(s![start..start + self.rows(), ..]).assign(&self.0.value);
        Var::from_op(v, Op::PadRows(self.clone(), start), self.requires_grad())
    }

    fn pad_cols(&self, start: usize, total: usize) -> Var {
        let mut v = Array2::zeros((self.rows(), total));
        v.slice_mut(s![.., start..start + self.cols()]).assign(&self.0.value);
        Var::from_op(v, Op::PadCols(self.clone(), start), self.requires_grad())
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let mut v = Array2::zeros((idx.len(), self.cols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&self.0.value.row(i));
        }
        Var::from_op(v, Op::GatherRows(self.clone(), Rc::new(idx.to_vec())), self.requires_grad())
    }

    fn scatter_add_rows(&self, idx: Rc<Vec<usize>>, total: usize) -> Var {
        let mut v = Array2::zeros((total, self.cols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = v.row_mut(i);
            row += &self.0.value.row(r);
        }
        Var::from_op(v, Op::ScatterAddRows(self.clone(), idx), self.requires_grad())
    }

    pub fn softmax_rows(&self) -> Var {
        let v = softmax_rows_value(&self.0.value);
        Var::from_op(v, Op::SoftmaxRows(self.clone()), self.requires_grad())
    }

    pub fn log_softmax_rows(&self) -> Var {
        let mut v = self.0.value.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        Var::from_op(v, Op::LogSoftmaxRows(self.clone()), self.requires_grad())
    }

    /// Vector-Jacobian products for each parent, in `parents()` order.
    fn vjp(&self, g: &Var) -> Vec<Var> {
        let out = self;
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(_, _) => vec![g.clone(), g.clone()],
            Op::Sub(_, _) => vec![g.clone(), g.neg()],
            Op::Mul(a, b) => vec![g.mul(b), g.mul(a)],
            Op::Scale(_, k) => vec![g.scale(*k)],
            Op::AddScalar(_) => vec![g.clone()],
            Op::MatMul(a, b) => vec![g.matmul(&b.t()), a.t().matmul(g)],
            Op::Transpose(_) => vec![g.t()],
            Op::Exp(_) => vec![g.mul(out)],
            Op::Ln(a) => vec![g.mul(&a.powf(-1.0))],
            Op::Tanh(_) => {
                let one_minus_sq = out.mul(out).neg().add_scalar(1.0);
                vec![g.mul(&one_minus_sq)]
            }
            Op::Relu(a) => {
                let mask = a.0.value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![g.mul(&Var::constant(mask))]
            }
            Op::Powf(a, p) => {
                let d = if *p == 1.0 {
                    Var::constant(Array2::ones(a.shape()))
                } else {
                    a.powf(p - 1.0).scale(*p)
                };
                vec![g.mul(&d)]
            }
            Op::SumRows(a) => vec![g.broadcast_rows(a.rows())],
            Op::SumCols(a) => vec![g.broadcast_cols(a.cols())],
            Op::BroadcastRows(_) => vec![g.sum_rows()],
            Op::BroadcastCols(_) => vec![g.sum_cols()],
            Op::ConcatRows(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|x| {
                        let part = g.slice_rows(off, x.rows());
                        off += x.rows();
                        part
                    })
                    .collect()
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|x| {
                        let part = g.slice_cols(off, x.cols());
                        off += x.cols();
                        part
                    })
                    .collect()
            }
            Op::SliceRows(a, start) => vec![g.pad_rows(*start, a.rows())],
            Op::SliceCols(a, start) => vec![g.pad_cols(*start, a.cols())],
            Op::PadRows(a, start) => vec![g.slice_rows(*start, a.rows())],
            Op::PadCols(a, start) => vec![g.slice_cols(*start, a.cols())],
            Op::GatherRows(a, idx) => vec![g.scatter_add_rows(idx.clone(), a.rows())],
            Op::ScatterAddRows(_, idx) => vec![g.gather_rows(idx)],
            Op::SoftmaxRows(_) => {
                let dot = g.mul(out).sum_cols().broadcast_cols(out.cols());
                vec![out.mul(&g.sub(&dot))]
            }
            Op::LogSoftmaxRows(_) => {
                let gsum = g.sum_cols().broadcast_cols(out.cols());
                vec![g.sub(&out.exp().mul(&gsum))]
            }
        }
    }
}

pub(crate) fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    v
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable
/// functions of the graph's leaves. Inputs that `output` does not depend on
/// get zero gradients.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.shape(), (1, 1), "grad: output must be a scalar");
    let zeros = |v: &Var| Var::constant(Array2::zeros(v.shape()));
    if !output.requires_grad() {
        return wrt.iter().map(zeros).collect();
    }

    // Ids increase with creation, so descending id order is a valid
    // reverse topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        for p in v.parents() {
            stack.push(p.clone());
        }
        order.push(v);
    }
    order.sort_by_key(|n| std::cmp::Reverse(n.0.id));

    let _mode = if create_graph { with_grad_enabled() } else { no_grad() };
    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.0.id, Var::scalar(1.0));
    for node in &order {
        let Some(g) = grads.get(&node.0.id).cloned() else { continue };
        let parents = node.parents();
        if parents.is_empty() {
            continue;
        }
        for (p, pg) in parents.into_iter().zip(node.vjp(&g)) {
            if !p.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&p.0.id) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(p.0.id, acc);
        }
    }
    wrt.iter()
        .map(|w| grads.get(&w.0.id).cloned().unwrap_or_else(|| zeros(w)))
        .collect()
}
