//! Reverse-mode differentiation over a recorded computation.
//!
//! Every node holds a dense [`Matrix`] value; scalars are `1x1`. The
//! backward pass records the adjoint computation as new nodes in the same
//! graph, so a gradient is itself a differentiable expression and
//! [`Graph::grad`] can be applied to it again (double backprop).
//!
//! Nodes are appended in creation order, which is a topological order.
//! Adjoints are accumulated by summation in reverse node order, so results
//! are deterministic.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied elementwise function with its first derivative.
///
/// The derivative node created during backward has no derivative rule of its
/// own, so differentiating through it twice fails with
/// [`Error::UnsupportedOp`].
#[derive(Clone)]
pub struct ElementwiseFn {
    pub name: &'static str,
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub derivative: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for ElementwiseFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ElementwiseFn({})", self.name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// `x·W + b` with `b` a row broadcast over the rows of `x·W`.
    Affine(Var, Var, Var),
    /// Matrix plus a `1 x cols` row broadcast over rows.
    AddRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    /// `1` where the input is positive, else `0`; zero derivative.
    Step(Var),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Recip(Var),
    Square(Var),
    Sum(Var),
    /// Column sums, `rows x cols -> 1 x cols`.
    SumRows(Var),
    /// Row sums, `rows x cols -> rows x 1`.
    SumCols(Var),
    Broadcast(Var, usize, usize),
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    /// Frobenius inner product, a scalar.
    Inner(Var, Var),
    Clamp(Var, f64, f64),
    /// `1` where `lo <= x <= hi`, else `0`; zero derivative.
    ClampMask(Var, f64, f64),
    /// Row maxima as a `rows x 1` column; treated as a constant in backward.
    RowMaxDetached(Var),
    Detach(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    PadCols(Var, usize, usize),
    /// Row `i` of the output is row `perm[i]` of the input.
    PermuteRows(Var, Arc<[usize]>),
    Custom(Var, ElementwiseFn),
    CustomDerivative(Var, ElementwiseFn),
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Input => "input".into(),
            Op::Constant => "constant".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Neg(..) => "neg".into(),
            Op::Scale(..) => "scale".into(),
            Op::AddScalar(..) => "add_scalar".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::Transpose(..) => "transpose".into(),
            Op::Affine(..) => "affine".into(),
            Op::AddRow(..) => "add_row".into(),
            Op::Tanh(..) => "tanh".into(),
            Op::Relu(..) => "relu".into(),
            Op::Step(..) => "step".into(),
            Op::Softplus(..) => "softplus".into(),
            Op::Sigmoid(..) => "sigmoid".into(),
            Op::Log(..) => "log".into(),
            Op::Exp(..) => "exp".into(),
            Op::Recip(..) => "recip".into(),
            Op::Square(..) => "square".into(),
            Op::Sum(..) => "sum".into(),
            Op::SumRows(..) => "sum_rows".into(),
            Op::SumCols(..) => "sum_cols".into(),
            Op::Broadcast(..) => "broadcast".into(),
            Op::BroadcastRows(..) => "broadcast_rows".into(),
            Op::BroadcastCols(..) => "broadcast_cols".into(),
            Op::Inner(..) => "inner".into(),
            Op::Clamp(..) => "clamp".into(),
            Op::ClampMask(..) => "clamp_mask".into(),
            Op::RowMaxDetached(..) => "row_max".into(),
            Op::Detach(..) => "detach".into(),
            Op::ConcatCols(..) => "concat_cols".into(),
            Op::SliceCols(..) => "slice_cols".into(),
            Op::PadCols(..) => "pad_cols".into(),
            Op::PermuteRows(..) => "permute_rows".into(),
            Op::Custom(_, f) => f.name.to_string(),
            Op::CustomDerivative(_, f) => format!("d{}", f.name),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => vec![a, b],
            Op::Inner(a, b) | Op::ConcatCols(a, b) => vec![a, b],
            Op::Affine(x, w, b) => vec![x, w, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Recip(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Broadcast(a, ..)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::Clamp(a, ..)
            | Op::ClampMask(a, ..)
            | Op::RowMaxDetached(a)
            | Op::Detach(a)
            | Op::SliceCols(a, ..)
            | Op::PadCols(a, ..)
            | Op::PermuteRows(a, _)
            | Op::Custom(a, _)
            | Op::CustomDerivative(a, _) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// A recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> String {
        self.nodes[v.0].op.name()
    }

    /// Input nodes in creation order; these are the slots [`Graph::replay_forward`] fills.
    pub fn inputs(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, op: Op) -> Var {
        let value = self.eval(&op, None);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn eval(&self, op: &Op, values: Option<&[Matrix]>) -> Matrix {
        let val = |v: Var| -> &Matrix {
            match values {
                Some(vals) => &vals[v.0],
                None => &self.nodes[v.0].value,
            }
        };
        match op {
            Op::Input | Op::Constant => unreachable!("leaf values are stored, not evaluated"),
            Op::Add(a, b) => val(*a).add(val(*b)),
            Op::Sub(a, b) => val(*a).sub(val(*b)),
            Op::Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y),
            Op::Neg(a) => val(*a).map(|x| -x),
            Op::Scale(a, c) => val(*a).scale(*c),
            Op::AddScalar(a, c) => val(*a).map(|x| x + c),
            Op::MatMul(a, b) => val(*a).matmul(val(*b)),
            Op::Transpose(a) => val(*a).transpose(),
            Op::Affine(x, w, b) => val(*x).matmul(val(*w)).add_row(val(*b)),
            Op::AddRow(a, b) => val(*a).add_row(val(*b)),
            Op::Tanh(a) => val(*a).map(f64::tanh),
            Op::Relu(a) => val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus(a) => val(*a).map(softplus),
            Op::Sigmoid(a) => val(*a).map(sigmoid),
            Op::Log(a) => val(*a).map(f64::ln),
            Op::Exp(a) => val(*a).map(f64::exp),
            Op::Recip(a) => val(*a).map(|x| 1.0 / x),
            Op::Square(a) => val(*a).map(|x| x * x),
            Op::Sum(a) => Matrix::scalar(val(*a).sum()),
            Op::SumRows(a) => {
                let m = val(*a);
                let mut out = Matrix::zeros(1, m.cols());
                for r in 0..m.rows() {
                    for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
                        *o += v;
                    }
                }
                out
            }
            Op::SumCols(a) => {
                let m = val(*a);
                let sums: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
                Matrix::column(&sums)
            }
            Op::Broadcast(a, r, c) => Matrix::filled(*r, *c, val(*a).item()),
            Op::BroadcastRows(a, r) => {
                let v = val(*a);
                let mut out = Matrix::zeros(*r, v.cols());
                for i in 0..*r {
                    out.row_mut(i).copy_from_slice(v.as_slice());
                }
                out
            }
            Op::BroadcastCols(a, c) => {
                let v = val(*a);
                let mut out = Matrix::zeros(v.rows(), *c);
                for i in 0..v.rows() {
                    let x = v.as_slice()[i];
                    out.row_mut(i).iter_mut().for_each(|o| *o = x);
                }
                out
            }
            Op::Inner(a, b) => {
                let (x, y) = (val(*a), val(*b));
                Matrix::scalar(x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum())
            }
            Op::Clamp(a, lo, hi) => val(*a).map(|x| x.clamp(*lo, *hi)),
            Op::ClampMask(a, lo, hi) => val(*a).map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
            Op::RowMaxDetached(a) => {
                let m = val(*a);
                let maxes: Vec<f64> =
                    (0..m.rows()).map(|r| m.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
                Matrix::column(&maxes)
            }
            Op::Detach(a) => val(*a).clone(),
            Op::ConcatCols(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut out = Matrix::zeros(x.rows(), x.cols() + y.cols());
                for r in 0..x.rows() {
                    let row = out.row_mut(r);
                    row[..x.cols()].copy_from_slice(x.row(r));
                    row[x.cols()..].copy_from_slice(y.row(r));
                }
                out
            }
            Op::SliceCols(a, s, e) => {
                let x = val(*a);
                let mut out = Matrix::zeros(x.rows(), e - s);
                for r in 0..x.rows() {
                    out.row_mut(r).copy_from_slice(&x.row(r)[*s..*e]);
                }
                out
            }
            Op::PadCols(a, s, total) => {
                let x = val(*a);
                let mut out = Matrix::zeros(x.rows(), *total);
                for r in 0..x.rows() {
                    out.row_mut(r)[*s..*s + x.cols()].copy_from_slice(x.row(r));
                }
                out
            }
            Op::PermuteRows(a, perm) => {
                let x = val(*a);
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for (i, &p) in perm.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(x.row(p));
                }
                out
            }
            Op::Custom(a, f) => val(*a).map(|x| (f.value)(x)),
            Op::CustomDerivative(a, f) => val(*a).map(|x| (f.derivative)(x)),
        }
    }

    fn expect_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    // ----- recording -----

    /// A differentiable leaf whose value can be replaced by [`Graph::replay_forward`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { op: Op::Input, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { op: Op::Constant, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.expect_same(a, b, "add");
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.expect_same(a, b, "sub");
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.expect_same(a, b, "mul");
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dimensions differ");
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    /// `x·W + b`, `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        assert_eq!(self.shape(x).1, self.shape(w).0, "affine: input width differs from weight rows");
        assert_eq!(self.shape(b), (1, self.shape(w).1), "affine: bias must be a 1 x out row");
        self.push(Op::Affine(x, w, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row: row shape");
        self.push(Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.push(Op::SumCols(a))
    }

    pub fn broadcast(&mut self, scalar: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(scalar), (1, 1), "broadcast: expects a scalar");
        self.push(Op::Broadcast(scalar, rows, cols))
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        assert_eq!(self.shape(row).0, 1, "broadcast_rows: expects a row");
        self.push(Op::BroadcastRows(row, rows))
    }

    pub fn broadcast_cols(&mut self, col: Var, cols: usize) -> Var {
        assert_eq!(self.shape(col).1, 1, "broadcast_cols: expects a column");
        self.push(Op::BroadcastCols(col, cols))
    }

    pub fn inner(&mut self, a: Var, b: Var) -> Var {
        self.expect_same(a, b, "inner");
        self.push(Op::Inner(a, b))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: lo > hi");
        self.push(Op::Clamp(a, lo, hi))
    }

    /// A copy of `a` that backward treats as a constant.
    pub fn detach(&mut self, a: Var) -> Var {
        self.push(Op::Detach(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat_cols: row counts differ");
        self.push(Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= self.shape(a).1, "slice_cols: bad range");
        self.push(Op::SliceCols(a, start, end))
    }

    /// Reorders rows: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Var {
        let rows = self.shape(a).0;
        assert_eq!(perm.len(), rows, "permute_rows: permutation length differs from row count");
        let mut seen = vec![false; rows];
        for &p in perm {
            assert!(p < rows && !std::mem::replace(&mut seen[p], true), "permute_rows: not a permutation");
        }
        self.push(Op::PermuteRows(a, perm.into()))
    }

    pub fn custom(&mut self, a: Var, f: ElementwiseFn) -> Var {
        self.push(Op::Custom(a, f))
    }

    /// Row-wise `log Σ_j exp(a_ij)` as a `rows x 1` column, shifted by the
    /// detached row maximum for stability.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        let m = self.push(Op::RowMaxDetached(a));
        let mb = self.broadcast_cols(m, cols);
        let shifted = self.sub(a, mb);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let l = self.log(s);
        self.add(l, m)
    }

    /// `log mean_i exp(a_i)` over all entries, as a scalar.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let vmax = self.value(a).as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = self.constant(Matrix::filled(r, c, vmax));
        let shifted = self.sub(a, shift);
        let e = self.exp(shifted);
        let s = self.sum(e);
        let l = self.log(s);
        self.add_scalar(l, vmax - ((r * c) as f64).ln())
    }

    // ----- differentiation -----

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        let slot = &mut adj[target.0];
        *slot = Some(match *slot {
            None => contribution,
            Some(prev) => self.push(Op::Add(prev, contribution)),
        });
    }

    /// Reverse-mode gradient of the scalar `output` with respect to each of
    /// `wrt`. The returned nodes are part of the graph and can be
    /// differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }
        let end = output.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] && self.nodes[i].op.parents().iter().any(|p| needs[p.0]) {
                needs[i] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if needs[output.0] {
            adj[output.0] = Some(self.constant_scalar(1.0));
        }
        for i in (0..end).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_node(&op, Var(i), g, &needs, &mut adj)?;
        }

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(v) => v,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect())
    }

    /// Gradient values, for when the gradient nodes themselves are not needed.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        let vars = self.grad(output, wrt)?;
        Ok(vars.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn backprop_node(
        &mut self,
        op: &Op,
        this: Var,
        g: Var,
        needs: &[bool],
        adj: &mut [Option<Var>],
    ) -> Result<()> {
        let need = |v: Var| needs[v.0];
        match *op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                if need(a) {
                    self.accumulate(adj, a, g);
                }
                if need(b) {
                    self.accumulate(adj, b, g);
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    self.accumulate(adj, a, g);
                }
                if need(b) {
                    let n = self.neg(g);
                    self.accumulate(adj, b, n);
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let d = self.mul(g, b);
                    self.accumulate(adj, a, d);
                }
                if need(b) {
                    let d = self.mul(g, a);
                    self.accumulate(adj, b, d);
                }
            }
            Op::Neg(a) => {
                let d = self.neg(g);
                self.accumulate(adj, a, d);
            }
            Op::Scale(a, c) => {
                let d = self.scale(g, c);
                self.accumulate(adj, a, d);
            }
            Op::AddScalar(a, _) => self.accumulate(adj, a, g),
            Op::MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b);
                    let d = self.matmul(g, bt);
                    self.accumulate(adj, a, d);
                }
                if need(b) {
                    let at = self.transpose(a);
                    let d = self.matmul(at, g);
                    self.accumulate(adj, b, d);
                }
            }
            Op::Transpose(a) => {
                let d = self.transpose(g);
                self.accumulate(adj, a, d);
            }
            Op::Affine(x, w, b) => {
                if need(x) {
                    let wt = self.transpose(w);
                    let d = self.matmul(g, wt);
                    self.accumulate(adj, x, d);
                }
                if need(w) {
                    let xt = self.transpose(x);
                    let d = self.matmul(xt, g);
                    self.accumulate(adj, w, d);
                }
                if need(b) {
                    let d = self.sum_rows(g);
                    self.accumulate(adj, b, d);
                }
            }
            Op::AddRow(a, row) => {
                if need(a) {
                    self.accumulate(adj, a, g);
                }
                if need(row) {
                    let d = self.sum_rows(g);
                    self.accumulate(adj, row, d);
                }
            }
            Op::Tanh(a) => {
                // 1 − tanh²
                let sq = self.square(this);
                let ns = self.neg(sq);
                let deriv = self.add_scalar(ns, 1.0);
                let d = self.mul(g, deriv);
                self.accumulate(adj, a, d);
            }
            Op::Relu(a) => {
                let mask = self.push(Op::Step(a));
                let d = self.mul(g, mask);
                self.accumulate(adj, a, d);
            }
            Op::Step(_) | Op::ClampMask(..) | Op::RowMaxDetached(_) | Op::Detach(_) => {}
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let d = self.mul(g, s);
                self.accumulate(adj, a, d);
            }
            Op::Sigmoid(a) => {
                let ny = self.neg(this);
                let one_minus = self.add_scalar(ny, 1.0);
                let deriv = self.mul(this, one_minus);
                let d = self.mul(g, deriv);
                self.accumulate(adj, a, d);
            }
            Op::Log(a) => {
                let r = self.recip(a);
                let d = self.mul(g, r);
                self.accumulate(adj, a, d);
            }
            Op::Exp(a) => {
                let d = self.mul(g, this);
                self.accumulate(adj, a, d);
            }
            Op::Recip(a) => {
                let sq = self.square(this);
                let gd = self.mul(g, sq);
                let d = self.neg(gd);
                self.accumulate(adj, a, d);
            }
            Op::Square(a) => {
                let ga = self.mul(g, a);
                let d = self.scale(ga, 2.0);
                self.accumulate(adj, a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                let d = self.broadcast(g, r, c);
                self.accumulate(adj, a, d);
            }
            Op::SumRows(a) => {
                let r = self.shape(a).0;
                let d = self.broadcast_rows(g, r);
                self.accumulate(adj, a, d);
            }
            Op::SumCols(a) => {
                let c = self.shape(a).1;
                let d = self.broadcast_cols(g, c);
                self.accumulate(adj, a, d);
            }
            Op::Broadcast(a, ..) => {
                let d = self.sum(g);
                self.accumulate(adj, a, d);
            }
            Op::BroadcastRows(a, _) => {
                let d = self.sum_rows(g);
                self.accumulate(adj, a, d);
            }
            Op::BroadcastCols(a, _) => {
                let d = self.sum_cols(g);
                self.accumulate(adj, a, d);
            }
            Op::Inner(a, b) => {
                let (r, c) = self.shape(a);
                let gb = self.broadcast(g, r, c);
                if need(a) {
                    let d = self.mul(gb, b);
                    self.accumulate(adj, a, d);
                }
                if need(b) {
                    let d = self.mul(gb, a);
                    self.accumulate(adj, b, d);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let mask = self.push(Op::ClampMask(a, lo, hi));
                let d = self.mul(g, mask);
                self.accumulate(adj, a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                let cb = self.shape(b).1;
                if need(a) {
                    let d = self.slice_cols(g, 0, ca);
                    self.accumulate(adj, a, d);
                }
                if need(b) {
                    let d = self.slice_cols(g, ca, ca + cb);
                    self.accumulate(adj, b, d);
                }
            }
            Op::SliceCols(a, s, _) => {
                let total = self.shape(a).1;
                let d = self.push(Op::PadCols(g, s, total));
                self.accumulate(adj, a, d);
            }
            Op::PadCols(a, s, _) => {
                let c = self.shape(a).1;
                let d = self.slice_cols(g, s, s + c);
                self.accumulate(adj, a, d);
            }
            Op::PermuteRows(a, ref perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let d = self.push(Op::PermuteRows(g, inverse.into()));
                self.accumulate(adj, a, d);
            }
            Op::Custom(a, ref f) => {
                let deriv = self.push(Op::CustomDerivative(a, f.clone()));
                let d = self.mul(g, deriv);
                self.accumulate(adj, a, d);
            }
            Op::CustomDerivative(..) => return Err(Error::UnsupportedOp { op: op.name() }),
        }
        Ok(())
    }

    /// Recomputes every node from new values for the [`Graph::inputs`], in order.
    pub fn replay_forward(&self, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
        let slots = self.inputs();
        if slots.len() != inputs.len() {
            return Err(Error::Shape(format!("graph has {} inputs, got {}", slots.len(), inputs.len())));
        }
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        let mut next_input = 0;
        for node in &self.nodes {
            let v = match node.op {
                Op::Input => {
                    let m = &inputs[next_input];
                    if m.shape() != node.value.shape() {
                        return Err(Error::Shape(format!(
                            "input {next_input} has shape {:?}, recorded {:?}",
                            m.shape(),
                            node.value.shape()
                        )));
                    }
                    next_input += 1;
                    m.clone()
                }
                Op::Constant => node.value.clone(),
                ref op => self.eval(op, Some(&values)),
            };
            values.push(v);
        }
        Ok(values)
    }
}

/// Gradient of `outer(∇_{inner_wrt} inner_output)` with respect to `outer_wrt`.
///
/// `outer` receives the graph and the inner gradient nodes and must return a
/// scalar node.
pub fn grad_of_grad<F>(
    graph: &mut Graph,
    inner_output: Var,
    inner_wrt: &[Var],
    outer: F,
    outer_wrt: &[Var],
) -> Result<Vec<Matrix>>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let inner = graph.grad(inner_output, inner_wrt)?;
    let h = outer(graph, &inner);
    graph.grad_values(h, outer_wrt)
}

/// Step used by [`finite_diff_check`].
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `max_i |fd_i − an_i| / max(1, |an_i|)` with central differences of step [`FD_STEP`].
pub fn finite_diff_check(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let fd = finite_diff_gradient(f, point, FD_STEP);
    fd.iter().zip(analytic).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
}
