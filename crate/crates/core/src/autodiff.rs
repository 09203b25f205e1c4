//! Reverse-mode automatic differentiation with higher-order support.
//!
//! Every backward rule is written in terms of differentiable [`Var`] operations,
//! so calling [`grad`] with `create_graph = true` yields gradients that are
//! themselves nodes of the graph. Differentiating a function of those
//! gradients (a gradient penalty) then back-propagates through the first
//! backward pass.
//!
//! Graphs are thread-local (`Rc`); tensors are `Arc`-shared and cross threads
//! freely. Node ids grow monotonically, so sorting by id gives a topological
//! order.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::{Conv1dGeometry, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording any graph edges.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|c| c.replace(true)));
    f()
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

#[derive(Clone)]
enum Op {
    Constant,
    Leaf,
    MatMul,
    MatMulNT,
    MatMulTN,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    MulCol,
    SumRows,
    SumCols,
    SumAll,
    BroadcastRows,
    BroadcastCols,
    BroadcastAll,
    Scale(f64),
    AddScalar,
    Recip,
    Sqrt,
    Sigmoid,
    Tanh,
    Atan,
    MaskMul(Tensor),
    SliceCols { start: usize },
    PadCols { start: usize },
    SliceRows { start: usize },
    PadRows { start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape,
    Unfold(Conv1dGeometry),
    Fold(Conv1dGeometry),
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

impl Drop for Node {
    // Unlink iteratively; long recurrent chains would otherwise recurse once per node.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    fn make(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Constant, Vec::new())
        };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            parents,
            requires_grad,
        }))
    }

    /// A value that gradients never flow into.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Constant,
            parents: Vec::new(),
            requires_grad: false,
        }))
    }

    /// A differentiable input (parameter or noise).
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        Var::make(
            self.value().matmul(rhs.value()),
            Op::MatMul,
            vec![self.clone(), rhs.clone()],
        )
    }

    /// `self * rhs^T`
    pub fn matmul_nt(&self, rhs: &Var) -> Var {
        Var::make(
            self.value().matmul_nt(rhs.value()),
            Op::MatMulNT,
            vec![self.clone(), rhs.clone()],
        )
    }

    /// `self^T * rhs`
    pub fn matmul_tn(&self, rhs: &Var) -> Var {
        Var::make(
            self.value().matmul_tn(rhs.value()),
            Op::MatMulTN,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn add(&self, rhs: &Var) -> Var {
        Var::make(
            self.value().zip(rhs.value(), |a, b| a + b),
            Op::Add,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        Var::make(
            self.value().zip(rhs.value(), |a, b| a - b),
            Op::Sub,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        Var::make(
            self.value().zip(rhs.value(), |a, b| a * b),
            Op::Mul,
            vec![self.clone(), rhs.clone()],
        )
    }

    /// Add a 1 x n row to every row.
    pub fn add_row(&self, row: &Var) -> Var {
        Var::make(
            self.value().row_op(row.value(), |a, b| a + b),
            Op::AddRow,
            vec![self.clone(), row.clone()],
        )
    }

    /// Multiply every row elementwise by a 1 x n row.
    pub fn mul_row(&self, row: &Var) -> Var {
        Var::make(
            self.value().row_op(row.value(), |a, b| a * b),
            Op::MulRow,
            vec![self.clone(), row.clone()],
        )
    }

    /// Scale row r by entry r of an m x 1 column.
    pub fn mul_col(&self, col: &Var) -> Var {
        Var::make(
            self.value().col_op(col.value(), |a, b| a * b),
            Op::MulCol,
            vec![self.clone(), col.clone()],
        )
    }

    pub fn sum_rows(&self) -> Var {
        Var::make(self.value().sum_rows(), Op::SumRows, vec![self.clone()])
    }

    pub fn sum_cols(&self) -> Var {
        Var::make(self.value().sum_cols(), Op::SumCols, vec![self.clone()])
    }

    pub fn sum_all(&self) -> Var {
        Var::make(Tensor::scalar(self.value().sum()), Op::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn broadcast_rows(&self, rows: usize) -> Var {
        Var::make(self.value().broadcast_rows(rows), Op::BroadcastRows, vec![self.clone()])
    }

    pub fn broadcast_cols(&self, cols: usize) -> Var {
        Var::make(self.value().broadcast_cols(cols), Op::BroadcastCols, vec![self.clone()])
    }

    fn broadcast_all(&self, rows: usize, cols: usize) -> Var {
        let v = self.value().item();
        Var::make(Tensor::full(rows, cols, v), Op::BroadcastAll, vec![self.clone()])
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::make(self.value().map(|a| a * k), Op::Scale(k), vec![self.clone()])
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        Var::make(self.value().map(|a| a + k), Op::AddScalar, vec![self.clone()])
    }

    pub fn recip(&self) -> Var {
        Var::make(self.value().map(|a| 1.0 / a), Op::Recip, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::make(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::make(self.value().map(sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var {
        Var::make(self.value().map(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn atan(&self) -> Var {
        Var::make(self.value().map(f64::atan), Op::Atan, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&self, mask: Tensor) -> Var {
        let value = self.value().zip(&mask, |a, m| a * m);
        Var::make(value, Op::MaskMul(mask), vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().map(|a| if a > 0.0 { 1.0 } else { slope });
        self.mask_mul(mask)
    }

    /// `min(0, x)` elementwise.
    pub fn min_zero(&self) -> Var {
        let mask = self.value().map(|a| if a < 0.0 { 1.0 } else { 0.0 });
        self.mask_mul(mask)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        Var::make(
            self.value().slice_cols(start, len),
            Op::SliceCols { start },
            vec![self.clone()],
        )
    }

    fn pad_cols(&self, start: usize, total: usize) -> Var {
        Var::make(
            self.value().pad_cols(start, total),
            Op::PadCols { start },
            vec![self.clone()],
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        Var::make(
            self.value().slice_rows(start, len),
            Op::SliceRows { start },
            vec![self.clone()],
        )
    }

    fn pad_rows(&self, start: usize, total: usize) -> Var {
        Var::make(
            self.value().pad_rows(start, total),
            Op::PadRows { start },
            vec![self.clone()],
        )
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let widths = values.iter().map(|v| v.cols()).collect();
        Var::make(Tensor::concat_cols(&values), Op::ConcatCols(widths), parts.to_vec())
    }

    pub fn concat_rows(parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let heights = values.iter().map(|v| v.rows()).collect();
        Var::make(Tensor::concat_rows(&values), Op::ConcatRows(heights), parts.to_vec())
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        Var::make(self.value().reshape(rows, cols), Op::Reshape, vec![self.clone()])
    }

    pub fn unfold1d(&self, g: Conv1dGeometry) -> Var {
        Var::make(self.value().unfold1d(&g), Op::Unfold(g), vec![self.clone()])
    }

    fn fold1d(&self, g: Conv1dGeometry) -> Var {
        Var::make(self.value().fold1d(&g), Op::Fold(g), vec![self.clone()])
    }

    /// Euclidean norm of every row, as an m x 1 column. `floor` is added under
    /// the square root so the derivative stays finite at zero.
    pub fn row_norms(&self, floor: f64) -> Var {
        self.square().sum_cols().add_scalar(floor).sqrt()
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

/// Per-parent gradients of `node` given the gradient `g` of its output.
fn backward_rule(node: &Var, g: &Var, need: &[bool]) -> Vec<Option<Var>> {
    let p = &node.0.parents;
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let one = |i: usize, f: &dyn Fn() -> Var| if want(i) { Some(f()) } else { None };
    match &node.0.op {
        Op::Constant | Op::Leaf => Vec::new(),
        Op::MatMul => vec![one(0, &|| g.matmul_nt(&p[1])), one(1, &|| p[0].matmul_tn(g))],
        Op::MatMulNT => vec![one(0, &|| g.matmul(&p[1])), one(1, &|| g.matmul_tn(&p[0]))],
        Op::MatMulTN => vec![one(0, &|| p[1].matmul_nt(g)), one(1, &|| p[0].matmul(g))],
        Op::Add => vec![one(0, &|| g.clone()), one(1, &|| g.clone())],
        Op::Sub => vec![one(0, &|| g.clone()), one(1, &|| g.scale(-1.0))],
        Op::Mul => vec![one(0, &|| g.mul(&p[1])), one(1, &|| g.mul(&p[0]))],
        Op::AddRow => vec![one(0, &|| g.clone()), one(1, &|| g.sum_rows())],
        Op::MulRow => vec![one(0, &|| g.mul_row(&p[1])), one(1, &|| g.mul(&p[0]).sum_rows())],
        Op::MulCol => vec![one(0, &|| g.mul_col(&p[1])), one(1, &|| g.mul(&p[0]).sum_cols())],
        Op::SumRows => vec![one(0, &|| g.broadcast_rows(p[0].shape().0))],
        Op::SumCols => vec![one(0, &|| g.broadcast_cols(p[0].shape().1))],
        Op::SumAll => {
            let (r, c) = p[0].shape();
            vec![one(0, &|| g.broadcast_all(r, c))]
        }
        Op::BroadcastRows => vec![one(0, &|| g.sum_rows())],
        Op::BroadcastCols => vec![one(0, &|| g.sum_cols())],
        Op::BroadcastAll => vec![one(0, &|| g.sum_all())],
        Op::Scale(k) => vec![one(0, &|| g.scale(*k))],
        Op::AddScalar => vec![one(0, &|| g.clone())],
        Op::Recip => vec![one(0, &|| g.mul(&node.square()).scale(-1.0))],
        Op::Sqrt => vec![one(0, &|| g.mul(&node.recip()).scale(0.5))],
        Op::Sigmoid => vec![one(0, &|| {
            let one_minus = node.scale(-1.0).add_scalar(1.0);
            g.mul(&node.mul(&one_minus))
        })],
        Op::Tanh => vec![one(0, &|| g.mul(&node.square().scale(-1.0).add_scalar(1.0)))],
        Op::Atan => vec![one(0, &|| g.mul(&p[0].square().add_scalar(1.0).recip()))],
        Op::MaskMul(mask) => vec![one(0, &|| g.mask_mul(mask.clone()))],
        Op::SliceCols { start } => {
            let total = p[0].shape().1;
            vec![one(0, &|| g.pad_cols(*start, total))]
        }
        Op::PadCols { start } => {
            let len = p[0].shape().1;
            vec![one(0, &|| g.slice_cols(*start, len))]
        }
        Op::SliceRows { start } => {
            let total = p[0].shape().0;
            vec![one(0, &|| g.pad_rows(*start, total))]
        }
        Op::PadRows { start } => {
            let len = p[0].shape().0;
            vec![one(0, &|| g.slice_rows(*start, len))]
        }
        Op::ConcatCols(widths) => {
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let out = one(i, &|| g.slice_cols(offset, w));
                    offset += w;
                    out
                })
                .collect()
        }
        Op::ConcatRows(heights) => {
            let mut offset = 0;
            heights
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let out = one(i, &|| g.slice_rows(offset, h));
                    offset += h;
                    out
                })
                .collect()
        }
        Op::Reshape => {
            let (r, c) = p[0].shape();
            vec![one(0, &|| g.reshape(r, c))]
        }
        Op::Unfold(geom) => vec![one(0, &|| g.fold1d(*geom))],
        Op::Fold(geom) => vec![one(0, &|| g.unfold1d(*geom))],
    }
}

/// Gradient of the scalar `output` with respect to each of `wrt`.
///
/// Inputs the output does not depend on receive a zero gradient. With
/// `create_graph` the returned gradients are differentiable graph nodes;
/// otherwise they are constants.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.shape(), (1, 1), "grad() needs a scalar output");
    grad_seeded(output, &Var::constant(Tensor::scalar(1.0)), wrt, create_graph)
}

/// Vector-Jacobian product: gradient of `<seed, output>` with respect to `wrt`.
pub fn grad_seeded(output: &Var, seed: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let zeros = || {
        wrt.iter()
            .map(|w| Var::constant(Tensor::zeros(w.shape().0, w.shape().1)))
            .collect::<Vec<_>>()
    };
    if !output.requires_grad() {
        return zeros();
    }

    // Collect every node reachable through differentiable edges.
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        order.push(v);
    }
    order.sort_by_key(|v| v.0.id);

    // A node matters only if some requested input lies beneath it.
    let targets: HashSet<u64> = wrt.iter().map(|w| w.0.id).collect();
    let mut relevant = HashSet::new();
    for v in &order {
        if targets.contains(&v.0.id) || v.0.parents.iter().any(|p| relevant.contains(&p.0.id)) {
            relevant.insert(v.0.id);
        }
    }
    if !relevant.contains(&output.0.id) {
        return zeros();
    }

    let run = || {
        let mut grads: HashMap<u64, Var> = HashMap::new();
        grads.insert(output.0.id, if create_graph { seed.clone() } else { seed.detach() });
        for v in order.iter().rev() {
            if !relevant.contains(&v.0.id) || v.0.parents.is_empty() {
                continue;
            }
            let Some(g) = grads.get(&v.0.id).cloned() else {
                continue;
            };
            let need: Vec<bool> = v.0.parents.iter().map(|p| relevant.contains(&p.0.id)).collect();
            let node = if create_graph { v.clone() } else { detached_view(v) };
            let parent_grads = backward_rule(&node, &g, &need);
            for (parent, pg) in v.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                let entry = grads.remove(&parent.0.id);
                let merged = match entry {
                    Some(acc) => acc.add(&pg),
                    None => pg,
                };
                grads.insert(parent.0.id, merged);
            }
            if !targets.contains(&v.0.id) {
                grads.remove(&v.0.id);
            }
        }
        wrt.iter()
            .map(|w| {
                grads
                    .get(&w.0.id)
                    .cloned()
                    .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape().0, w.shape().1)))
            })
            .collect::<Vec<_>>()
    };

    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}

/// A constant copy of `v` whose parents are constant copies too, so backward
/// rules evaluated on it record nothing.
fn detached_view(v: &Var) -> Var {
    Var(Rc::new(Node {
        id: v.0.id,
        value: v.0.value.clone(),
        op: v.0.op.clone(),
        parents: v.0.parents.iter().map(|p| p.detach()).collect(),
        requires_grad: false,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Var {
        Var::leaf(Tensor::from_vec(rows, cols, (0..rows * cols).map(f).collect()))
    }

    /// Central differences of a scalar function of one tensor input.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    /// A scalar function touching every primitive at least once.
    fn kitchen_sink(x: &Var, w: &Var) -> Var {
        let g = Conv1dGeometry {
            batch: 1,
            len: 4,
            channels: 3,
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let h = x.matmul(w).add_row(&w.slice_rows(0, 1)).sigmoid();
        let h2 = h.matmul_nt(w).tanh().mul(x).leaky_relu(0.2);
        let h3 = x.matmul_tn(&h2).atan().reshape(1, 9).broadcast_rows(2).sum_rows();
        let u = h2.unfold1d(g).sum_rows().reshape(2, 3);
        let col = h.sum_cols().add_scalar(2.0).sqrt().recip();
        let v = h2.mul_col(&col).mul_row(&u.slice_rows(1, 1));
        let cat = Var::concat_cols(&[v.slice_cols(0, 2), h3.slice_cols(0, 2).broadcast_rows(4)]);
        let stacked = Var::concat_rows(&[cat.clone(), cat.scale(0.5)]);
        stacked
            .sub(&stacked.scale(0.3))
            .square()
            .sum_all()
            .add(&u.min_zero().sum_all())
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let x0 = leaf(4, 3, |i| (i as f64 * 0.7 + 0.3).sin());
        let w0 = leaf(3, 3, |i| (i as f64 * 1.3).cos() * 0.5);
        let out = kitchen_sink(&x0, &w0);
        let g = grad(&out, &[&x0, &w0], false);
        let fx = |x: &Tensor| kitchen_sink(&Var::constant(x.clone()), &w0.detach()).item();
        let fw = |w: &Tensor| kitchen_sink(&x0.detach(), &Var::constant(w.clone())).item();
        assert_close(g[0].value().data(), &numeric_grad(x0.value(), &fx, 1e-6), 1e-6);
        assert_close(g[1].value().data(), &numeric_grad(w0.value(), &fw, 1e-6), 1e-6);
    }

    #[test]
    fn second_order_matches_finite_differences() {
        // penalty(w) = || d f / d x ||^2, differentiated with respect to w
        let x0 = leaf(4, 3, |i| (i as f64 * 0.7 + 0.3).sin());
        let w0 = leaf(3, 3, |i| (i as f64 * 1.3).cos() * 0.5);
        let penalty = |x: &Var, w: &Var| {
            let out = kitchen_sink(x, w);
            let gx = grad(&out, &[x], true).remove(0);
            gx.square().sum_all()
        };
        let p = penalty(&x0, &w0);
        let gw = grad(&p, &[&w0], false).remove(0);
        let fw = |w: &Tensor| penalty(&Var::leaf(x0.value().clone()), &Var::constant(w.clone())).item();
        assert_close(gw.value().data(), &numeric_grad(w0.value(), &fw, 1e-5), 1e-5);
    }

    #[test]
    fn unrelated_inputs_get_zero_gradient() {
        let a = leaf(2, 2, |i| i as f64);
        let b = leaf(2, 2, |i| i as f64);
        let out = a.square().sum_all();
        let g = grad(&out, &[&b], false);
        assert!(g[0].value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn no_grad_records_nothing() {
        let a = leaf(2, 2, |i| i as f64);
        let out = no_grad(|| a.square().sum_all());
        assert!(!out.requires_grad());
        let inside = a.square();
        assert!(inside.requires_grad());
    }

    #[test]
    fn long_chains_drop_without_recursion() {
        let mut v = leaf(1, 1, |_| 1.0);
        for _ in 0..200_000 {
            v = v.scale(1.0);
        }
        drop(v);
    }
}
