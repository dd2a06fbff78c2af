//! Graph-recorded reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. Node ids
//! grow monotonically, so id order is a topological order. The backward
//! pass expresses every local derivative with the same recorded
//! operations, which means a gradient can itself be recorded
//! (`create_graph = true`) and differentiated again.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Pow(usize, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastAll(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    /// `hard` marks a selection whose indices were chosen from values (a max),
    /// which is not twice differentiable.
    PickCols(usize, Rc<[usize]>, bool),
    ScatterCols(usize, Rc<[usize]>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
    first_non_finite: Cell<Option<usize>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [r, c] = self.shape();
        write!(f, "Var#{}[{r}x{c}]", self.id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            no_grad: Cell::new(false),
            first_non_finite: Cell::new(None),
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Id of the first node whose value contained NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite.get()
    }

    /// Runs `f` with recording disabled: every node created inside is a
    /// constant leaf.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.no_grad.replace(true);
        let out = f();
        self.no_grad.set(prev);
        out
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(id));
        }
        let (op, requires_grad) = if self.no_grad.get() && !matches!(op, Op::Leaf) {
            (Op::Leaf, false)
        } else {
            (op, requires_grad)
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, op: Op, value: Tensor) -> Var<'_> {
        let rg = self.requires(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, op: Op, value: Tensor) -> Var<'_> {
        let rg = self.requires(&[a, b]);
        self.push(value, op, rg)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// Tensors that `loss` does not depend on receive an exact zero
    /// tensor. With `create_graph` the returned gradients are recorded
    /// nodes that can be differentiated again.
    pub fn grad<'g>(
        &'g self,
        loss: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        if loss.shape() != [1, 1] {
            let [r, c] = loss.shape();
            return Err(NumError::Contract(format!(
                "gradient requested of a non-scalar {r}x{c} node"
            )));
        }
        let end = loss.id + 1;
        let mut needs = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end {
                    needs[w.id] = true;
                }
            }
            for i in 0..end {
                if needs[i] || !nodes[i].requires_grad {
                    continue;
                }
                needs[i] = parents(&nodes[i].op).iter().any(|&p| needs[p]);
            }
        }

        let prev = self.no_grad.replace(!create_graph);
        let result = self.backward(loss, &needs, create_graph);
        self.no_grad.set(prev);
        let adjoint = result?;

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(id) => Var { graph: self, id },
                None => {
                    let [r, c] = w.shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn backward<'g>(
        &'g self,
        loss: Var<'g>,
        needs: &[bool],
        create_graph: bool,
    ) -> Result<Vec<Option<usize>>> {
        let end = loss.id + 1;
        let mut adjoint: Vec<Option<usize>> = vec![None; end];
        if !needs[loss.id] {
            return Ok(adjoint);
        }
        adjoint[loss.id] = Some(self.constant(Tensor::scalar(1.0)).id);

        for i in (0..end).rev() {
            if !needs[i] {
                continue;
            }
            let Some(gid) = adjoint[i] else { continue };
            let g = Var { graph: self, id: gid };
            let op = self.nodes.borrow()[i].op.clone();
            let out = Var { graph: self, id: i };
            let mut acc = |p: usize, contrib: Var<'g>| {
                if !needs[p] {
                    return;
                }
                adjoint[p] = Some(match adjoint[p] {
                    Some(prev) => Var { graph: self, id: prev }.add(contrib).id,
                    None => contrib.id,
                });
            };
            let v = |id: usize| Var { graph: self, id };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g);
                    if needs[b] {
                        acc(b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a] {
                        acc(a, g.mul(v(b)));
                    }
                    if needs[b] {
                        acc(b, g.mul(v(a)));
                    }
                }
                Op::Scale(a, c) => acc(a, g.scale(c)),
                Op::MatMul(a, b) => {
                    if needs[a] {
                        acc(a, g.matmul(v(b).t()));
                    }
                    if needs[b] {
                        acc(b, v(a).t().matmul(g));
                    }
                }
                Op::Transpose(a) => acc(a, g.t()),
                Op::Exp(a) => acc(a, g.mul(out)),
                Op::Log(a) => acc(a, g.mul(v(a).powf(-1.0))),
                Op::Tanh(a) => acc(a, g.sub(g.mul(out).mul(out))),
                Op::Pow(a, p) => {
                    let d = if p == 1.0 {
                        g
                    } else if p == 2.0 {
                        g.mul(v(a)).scale(2.0)
                    } else {
                        g.mul(v(a).powf(p - 1.0)).scale(p)
                    };
                    acc(a, d);
                }
                Op::SumAll(a) => {
                    let [r, c] = v(a).shape();
                    acc(a, g.broadcast_all(r, c));
                }
                Op::SumRows(a) => {
                    let c = v(a).shape()[1];
                    acc(a, g.broadcast_cols(c));
                }
                Op::SumCols(a) => {
                    let r = v(a).shape()[0];
                    acc(a, g.broadcast_rows(r));
                }
                Op::BroadcastAll(a) => acc(a, g.sum()),
                Op::BroadcastRow(a) => acc(a, g.sum_cols()),
                Op::BroadcastCol(a) => acc(a, g.sum_rows()),
                Op::SliceCols(a, start) => {
                    let total = v(a).shape()[1];
                    acc(a, g.pad_cols(start, total));
                }
                Op::PadCols(a, start) => {
                    let len = v(a).shape()[1];
                    acc(a, g.slice_cols(start, len));
                }
                Op::GatherRows(a, ref ids) => {
                    let rows = v(a).shape()[0];
                    acc(a, g.scatter_rows_rc(Rc::clone(ids), rows));
                }
                Op::ScatterRows(a, ref ids) => acc(a, g.gather_rows_rc(Rc::clone(ids))),
                Op::PickCols(a, ref idx, hard) => {
                    if hard && create_graph {
                        return Err(NumError::Contract(
                            "second-order gradient through a max selection".into(),
                        ));
                    }
                    let cols = v(a).shape()[1];
                    acc(a, g.scatter_cols_rc(Rc::clone(idx), cols));
                }
                Op::ScatterCols(a, ref idx) => acc(a, g.pick_cols_rc(Rc::clone(idx), false)),
            }
        }
        Ok(adjoint)
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Pow(a, _)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::BroadcastAll(a)
        | Op::BroadcastRow(a)
        | Op::BroadcastCol(a)
        | Op::SliceCols(a, _)
        | Op::PadCols(a, _)
        | Op::GatherRows(a, _)
        | Op::ScatterRows(a, _)
        | Op::PickCols(a, _, _)
        | Op::ScatterCols(a, _) => vec![a],
    }
}

fn expect_shape<T>(r: Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => panic!("{e}"),
    }
}

/// Recorded operations. Shape mismatches panic with the same message the
/// fallible [`Tensor`] kernels return; the graph is a programming surface
/// and a mismatch there is a bug in the caller.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// A constant copy of this node's value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        let v = expect_shape(self.value().add(&other.value()));
        self.graph.binary(self.id, other.id, Op::Add(self.id, other.id), v)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        let v = expect_shape(self.value().sub(&other.value()));
        self.graph.binary(self.id, other.id, Op::Sub(self.id, other.id), v)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        let v = expect_shape(self.value().zip_map(&other.value(), "mul", |a, b| a * b));
        self.graph.binary(self.id, other.id, Op::Mul(self.id, other.id), v)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.graph.unary(self.id, Op::Scale(self.id, c), v)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        let v = expect_shape(self.value().matmul(&other.value()));
        self.graph.binary(self.id, other.id, Op::MatMul(self.id, other.id), v)
    }

    pub fn t(self) -> Var<'g> {
        let v = self.value().transpose();
        self.graph.unary(self.id, Op::Transpose(self.id), v)
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.graph.unary(self.id, Op::Exp(self.id), v)
    }

    pub fn ln(self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.graph.unary(self.id, Op::Log(self.id), v)
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.graph.unary(self.id, Op::Tanh(self.id), v)
    }

    /// Elementwise power. Non-integer exponents need a positive base.
    pub fn powf(self, p: f64) -> Var<'g> {
        let v = self.value().map(|x| x.powf(p));
        self.graph.unary(self.id, Op::Pow(self.id, p), v)
    }

    /// Sum of every element, as a `1×1` node.
    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.unary(self.id, Op::SumAll(self.id), v)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along each row: `m×n → m×1`.
    pub fn sum_rows(self) -> Var<'g> {
        let x = self.value();
        let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let v = Tensor::column_vector(&sums);
        self.graph.unary(self.id, Op::SumRows(self.id), v)
    }

    /// Sum down each column: `m×n → 1×n`.
    pub fn sum_cols(self) -> Var<'g> {
        let x = self.value();
        let mut sums = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (s, &v) in sums.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        let v = Tensor::row_vector(&sums);
        self.graph.unary(self.id, Op::SumCols(self.id), v)
    }

    /// `1×1 → rows×cols`.
    pub fn broadcast_all(self, rows: usize, cols: usize) -> Var<'g> {
        let x = expect_shape(self.value().scalar_value());
        self.graph
            .unary(self.id, Op::BroadcastAll(self.id), Tensor::full(rows, cols, x))
    }

    /// `1×n → rows×n`.
    pub fn broadcast_rows(self, rows: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rows(), 1, "broadcast_rows needs a single row");
        let mut data = Vec::with_capacity(rows * x.cols());
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        let v = expect_shape(Tensor::new(rows, x.cols(), data));
        self.graph.unary(self.id, Op::BroadcastRow(self.id), v)
    }

    /// `m×1 → m×cols`.
    pub fn broadcast_cols(self, cols: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.cols(), 1, "broadcast_cols needs a single column");
        let mut data = Vec::with_capacity(x.rows() * cols);
        for &v in x.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        let v = expect_shape(Tensor::new(x.rows(), cols, data));
        self.graph.unary(self.id, Op::BroadcastCol(self.id), v)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = expect_shape(Tensor::new(x.rows(), len, data));
        self.graph.unary(self.id, Op::SliceCols(self.id, start), v)
    }

    /// Places this node's columns at `start` inside a zero matrix `total` wide.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'g> {
        let x = self.value();
        assert!(start + x.cols() <= total, "pad_cols out of range");
        let mut out = Tensor::zeros(x.rows(), total);
        for r in 0..x.rows() {
            for (c, &val) in x.row(r).iter().enumerate() {
                out.set(r, start + c, val);
            }
        }
        self.graph.unary(self.id, Op::PadCols(self.id, start), out)
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather_rows(self, ids: &[usize]) -> Var<'g> {
        self.gather_rows_rc(ids.into())
    }

    fn gather_rows_rc(self, ids: Rc<[usize]>) -> Var<'g> {
        let x = self.value();
        let mut data = Vec::with_capacity(ids.len() * x.cols());
        for &i in ids.iter() {
            assert!(i < x.rows(), "gather_rows index {i} out of range");
            data.extend_from_slice(x.row(i));
        }
        let v = expect_shape(Tensor::new(ids.len(), x.cols(), data));
        self.graph.unary(self.id, Op::GatherRows(self.id, ids), v)
    }

    fn scatter_rows_rc(self, ids: Rc<[usize]>, rows: usize) -> Var<'g> {
        let x = self.value();
        let mut out = Tensor::zeros(rows, x.cols());
        for (src, &dst) in ids.iter().enumerate() {
            for c in 0..x.cols() {
                let cur = out.get(dst, c);
                out.set(dst, c, cur + x.get(src, c));
            }
        }
        self.graph.unary(self.id, Op::ScatterRows(self.id, ids), out)
    }

    /// One element per row: `out[r] = self[r, idx[r]]`, shaped `m×1`.
    pub fn pick_cols(self, idx: &[usize]) -> Var<'g> {
        self.pick_cols_rc(idx.into(), false)
    }

    /// Like [`Var::pick_cols`] but for indices chosen from the values
    /// themselves (for instance a row maximum). Such a node refuses
    /// second-order differentiation.
    pub fn pick_cols_selected(self, idx: &[usize]) -> Var<'g> {
        self.pick_cols_rc(idx.into(), true)
    }

    fn pick_cols_rc(self, idx: Rc<[usize]>, hard: bool) -> Var<'g> {
        let x = self.value();
        assert_eq!(idx.len(), x.rows(), "pick_cols needs one index per row");
        let vals: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < x.cols(), "pick_cols index {c} out of range");
                x.get(r, c)
            })
            .collect();
        let v = Tensor::column_vector(&vals);
        self.graph.unary(self.id, Op::PickCols(self.id, idx, hard), v)
    }

    fn scatter_cols_rc(self, idx: Rc<[usize]>, cols: usize) -> Var<'g> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows(), cols);
        for (r, &c) in idx.iter().enumerate() {
            out.set(r, c, x.get(r, 0));
        }
        self.graph.unary(self.id, Op::ScatterCols(self.id, idx), out)
    }
}

pub(crate) fn check_same_rows(op: &'static str, a: [usize; 2], n: usize) -> Result<()> {
    if a[0] != n {
        return Err(shape_err(op, format!("{} rows vs {n} entries", a[0])));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]]).unwrap());
        let dx = g.grad(x.sum(), &[x], false).unwrap();
        assert_eq!(*dx[0].value(), Tensor::ones(2, 3));
    }

    #[test]
    fn square_power_rule() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let dx = g.grad(x.mul(x), &[x], false).unwrap();
        assert_eq!(dx[0].value().scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn unreachable_gets_exact_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::full(2, 2, 1.5));
        let y = g.param(Tensor::full(3, 1, 2.0));
        let dy = g.grad(x.sum(), &[y], false).unwrap();
        assert_eq!(*dy[0].value(), Tensor::zeros(3, 1));
        assert!(dy[0].value().data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.grad(x, &[x], false), Err(NumError::Contract(_))));
    }

    #[test]
    fn no_grad_records_constants() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.no_grad(|| x.mul(x));
        assert!(!y.requires_grad());
        let d = g.grad(y, &[x], false).unwrap();
        assert_eq!(d[0].value().scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn second_order_through_max_selection_is_refused() {
        let g = Graph::new();
        let x = g.param(Tensor::row_vector(&[1.0, 4.0]));
        let y = x.pick_cols_selected(&[1]).mul(x.pick_cols(&[0])).sum();
        assert!(g.grad(y, &[x], false).is_ok());
        assert!(matches!(g.grad(y, &[x], true), Err(NumError::Contract(_))));
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x.mul(x).mul(x);
        let dy = g.grad(y, &[x], true).unwrap()[0];
        assert_eq!(dy.value().scalar_value().unwrap(), 12.0);
        let d2 = g.grad(dy, &[x], false).unwrap()[0];
        assert_eq!(d2.value().scalar_value().unwrap(), 12.0);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        assert!(g.first_non_finite().is_none());
        let _ = x.ln();
        assert_eq!(g.first_non_finite(), Some(1));
    }
}
