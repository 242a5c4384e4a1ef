//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node in creation order, which is
//! also a topological order. [`Tape::backward`] walks the nodes once in
//! reverse and accumulates gradients into a [`Gradients`] table. Nodes that
//! do not depend on any trainable leaf are never visited, so constant
//! subgraphs (hidden inputs, masks) cost nothing on the way back.
//!
//! The graph is rebuilt for every training example; a tape is cheap to create
//! and is dropped once the gradients have been read out.

use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    Min(Var, Var),
    Sum(Var),
    RowSums(Var),
    PairAdd(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(tape.value(v).dim()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every node recorded after the first `len`, so a tape holding
    /// bound parameters can be reused for repeated forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + row`, broadcasting a `1 × C` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(DiffError::Invalid {
            op: "concat_cols",
            message: "no operands".into(),
        })?;
        let rows = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(*first),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(DiffError::Invalid {
            op: "concat_rows",
            message: "no operands".into(),
        })?;
        let cols = self.shape(*first).1;
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(*first),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start > end || end > sa.1 {
            return Err(DiffError::Invalid {
                op: "slice_cols",
                message: format!("range {start}..{end} out of bounds for shape {sa:?}"),
            });
        }
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Gathers rows of `a` by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if let Some(bad) = rows.iter().find(|&&r| r >= sa.0) {
            return Err(DiffError::Invalid {
                op: "select_rows",
                message: format!("row {bad} out of bounds for shape {sa:?}"),
            });
        }
        let out = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec()), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.view_mut());
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut col in out.columns_mut() {
            softmax_in_place(col.view_mut());
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxCols(a), rg)
    }

    /// Entrywise minimum. On ties the gradient goes to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("min", a, b)?;
        let mut out = self.value(a).clone();
        Zip::from(&mut out)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Min(a, b), rg))
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Per-row sums as an `R × 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::RowSums(a), rg)
    }

    /// All pairwise row sums: for `a` (R × H) and `b` (C × H) the output is
    /// `(R·C) × H` with row `r·C + c` equal to `a[r] + b[c]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(DiffError::ShapeMismatch {
                op: "pair_add",
                left: sa,
                right: sb,
            });
        }
        let (r, c, h) = (sa.0, sb.0, sa.1);
        let mut out = Matrix::zeros((r * c, h));
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..r {
                let ai = av.row(i);
                for j in 0..c {
                    let mut o = out.row_mut(i * c + j);
                    o.assign(&ai);
                    o += &bv.row(j);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::PairAdd(a, b), rg))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.0 * sa.1 != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: sa,
                right: (rows, cols),
            });
        }
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let out = Matrix::from_shape_vec((rows, cols), flat).expect("element count checked");
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(DiffError::Invalid {
                op: "backward",
                message: format!("root must be 1x1, got {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * val(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        let piece = g.slice(s![.., offset..offset + w]).to_owned();
                        self.accumulate(grads, *p, piece);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.rg(*p) {
                        let piece = g.slice(s![offset..offset + h, ..]).to_owned();
                        self.accumulate(grads, *p, piece);
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut full = Matrix::zeros(self.shape(*a));
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, full);
            }
            Op::SelectRows(a, rows) => {
                let mut full = Matrix::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = full.row_mut(r);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *a, full);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d /= x);
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.scaled_add(-dots[i], &y.row(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCols(a) => {
                let y = &node.value;
                let mut d = g * y;
                let dots = d.sum_axis(Axis(0));
                for (j, mut col) in d.columns_mut().into_iter().enumerate() {
                    col.scaled_add(-dots[j], &y.column(j));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                Zip::from(&mut da)
                    .and(&mut db)
                    .and(va)
                    .and(vb)
                    .for_each(|da, db, &x, &y| {
                        if x <= y {
                            *db = 0.0;
                        } else {
                            *da = 0.0;
                        }
                    });
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Sum(a) => {
                let d = Matrix::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::RowSums(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros((r, c));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.fill(g[[i, 0]]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::PairAdd(a, b) => {
                let (r, c) = (self.shape(*a).0, self.shape(*b).0);
                if self.rg(*a) {
                    let mut da = Matrix::zeros(self.shape(*a));
                    for i in 0..r {
                        let block = g.slice(s![i * c..(i + 1) * c, ..]);
                        da.row_mut(i).assign(&block.sum_axis(Axis(0)));
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(self.shape(*b));
                    for i in 0..r {
                        db += &g.slice(s![i * c..(i + 1) * c, ..]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let d = Matrix::from_shape_vec(self.shape(*a), flat).expect("same element count");
                self.accumulate(grads, *a, d);
            }
        }
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

fn softmax_in_place(mut v: ndarray::ArrayViewMut1<f64>) {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    v.mapv_inplace(|x| (x - max).exp());
    let total = v.sum();
    v.mapv_inplace(|x| x / total);
}

/// Row-wise softmax of a plain matrix, outside any tape.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        softmax_in_place(row.view_mut());
    }
    out
}

/// Column-wise softmax of a plain matrix, outside any tape.
pub fn softmax_cols(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut col in out.columns_mut() {
        softmax_in_place(col.view_mut());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a tape-built `f`.
    fn check_grad(
        inputs: &[Matrix],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        rng: &mut ChaCha8Rng,
    ) {
        let probe = {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|m| t.param(m.clone())).collect();
            let out = build(&mut t, &vs);
            t.shape(out)
        };
        let weights = Matrix::from_shape_fn(probe, |_| rng.random_range(-1.0..1.0));
        let eval = |ins: &[Matrix]| -> (f64, Vec<Matrix>) {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.param(m.clone())).collect();
            let out = build(&mut t, &vs);
            let w = t.constant(weights.clone());
            let p = t.mul(out, w).unwrap();
            let loss = t.sum(p);
            let g = t.backward(loss).unwrap();
            let grads = vs.iter().map(|v| g.get_or_zeros(&t, *v)).collect();
            (t.value(loss)[[0, 0]], grads)
        };
        let (_, analytic) = eval(inputs);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.to_vec();
                plus[k][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[k][[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "input {k} entry ({r},{c}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn matmul_forward() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.constant(array![[3.0], [4.0]]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &array![[11.0]]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros((2, 3)));
        let b = t.constant(Matrix::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let a = t.constant(array![[-1.0, 2.0]]);
        let r = t.relu(a);
        assert_eq!(t.value(r), &array![[0.0, 2.0]]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0, 0.0]]);
        let s = t.softmax_rows(a);
        assert_abs_diff_eq!(t.value(s), &array![[0.5, 0.5]], epsilon = 1e-15);

        let b = t.constant(array![[3f64.ln(), 0.0]]);
        let s = t.softmax_rows(b);
        assert_abs_diff_eq!(t.value(s), &array![[0.75, 0.25]], epsilon = 1e-15);

        let c = t.constant(array![[0.0], [0.0], [0.0]]);
        let s = t.softmax_cols(c);
        assert_abs_diff_eq!(
            t.value(s),
            &array![[1.0 / 3.0], [1.0 / 3.0], [1.0 / 3.0]],
            epsilon = 1e-15
        );
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let mut t = Tape::new();
        let a = t.constant(array![[1000.0, -1000.0, 999.0]]);
        let s = t.softmax_rows(a);
        assert!(t.value(s).iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(t.value(s).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn min_forward_and_tie_goes_to_first() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 3.0]]);
        let b = t.param(array![[2.0, 2.0]]);
        let m = t.min(a, b).unwrap();
        assert_eq!(t.value(m), &array![[1.0, 2.0]]);

        let mut t = Tape::new();
        let a = t.param(array![[1.5, -0.5]]);
        let b = t.param(array![[1.5, -0.5]]);
        let m = t.min(a, b).unwrap();
        assert_eq!(t.value(m), t.value(a));
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &array![[1.0, 1.0]]);
        assert_eq!(g.get(b).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut t = Tape::new();
        let x = t.param(array![[3.0]]);
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(array![[3.0]]);
        let c = t.constant(array![[2.0]]);
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros((2, 2)));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn gradient_of_sum_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random(&mut rng, 3, 3);
            let b = random(&mut rng, 3, 3);
            check_grad(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap(), &mut rng);
        }
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        check_grad(
            &[a.clone(), b.clone()],
            |t, v| t.add(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check_grad(
            &[a.clone(), b.clone()],
            |t, v| t.sub(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check_grad(
            &[a.clone(), b.clone()],
            |t, v| t.mul(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check_grad(
            &[a.clone(), row],
            |t, v| t.add_row(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check_grad(std::slice::from_ref(&a), |t, v| t.tanh(v[0]), &mut rng);
        check_grad(std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]), &mut rng);
        check_grad(std::slice::from_ref(&a), |t, v| t.exp(v[0]), &mut rng);
        check_grad(
            std::slice::from_ref(&a),
            |t, v| t.softmax_rows(v[0]),
            &mut rng,
        );
        check_grad(
            std::slice::from_ref(&a),
            |t, v| t.softmax_cols(v[0]),
            &mut rng,
        );
        check_grad(std::slice::from_ref(&a), |t, v| t.row_sums(v[0]), &mut rng);
        check_grad(
            std::slice::from_ref(&a),
            |t, v| t.reshape(v[0], 2, 6).unwrap(),
            &mut rng,
        );
        check_grad(
            std::slice::from_ref(&a),
            |t, v| t.slice_cols(v[0], 1, 3).unwrap(),
            &mut rng,
        );
        check_grad(
            std::slice::from_ref(&a),
            |t, v| t.select_rows(v[0], &[2, 0, 2]).unwrap(),
            &mut rng,
        );
        let pos = a.mapv(|x| x.abs() + 0.5);
        check_grad(&[pos], |t, v| t.log(v[0]), &mut rng);
        let c = random(&mut rng, 2, 4);
        check_grad(
            &[a.clone(), c.clone()],
            |t, v| t.pair_add(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check_grad(
            &[a.clone(), c.clone()],
            |t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
            &mut rng,
        );
        let d = random(&mut rng, 3, 2);
        check_grad(
            &[a, d],
            |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
            &mut rng,
        );
    }

    #[test]
    fn kinked_ops_match_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 3).mapv(|x| if x.abs() < 1e-3 { 0.5 } else { x });
        check_grad(&[a], |t, v| t.relu(v[0]), &mut rng);
        let a = random(&mut rng, 3, 3);
        let b = Zip::from(&a).map_collect(|&x| x + if rng.random::<bool>() { 0.3 } else { -0.3 });
        check_grad(&[a, b], |t, v| t.min(v[0], v[1]).unwrap(), &mut rng);
    }
}
