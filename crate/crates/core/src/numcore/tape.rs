//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Each forward op appends a node holding its output value and the recipe
//! for its backward rule. Nodes are only ever appended after their inputs,
//! so the tape is already in topological order and [`Tape::backward`] walks
//! it once in reverse.
//!
//! Trainable parameters enter the tape through [`Tape::param`]. Binding the
//! same name twice returns the same variable, which is how several forward
//! passes in one step share parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParameterSet;
use super::tensor::{is_masked, log_sum_exp, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for reductions and softmax. `Rows` reduces down each
/// column (result has one row); `Cols` reduces across each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { src: Var, row0: usize, col0: usize },
    MaskedFill { src: Var, mask: Vec<bool> },
    Relu(Var),
    Dropout { src: Var, scale: Vec<f64> },
    Softmax(Var, Axis),
    Mean(Var, Axis),
    Sum(Var),
    Reshape(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    CrossEntropy { src: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
    backpropagated: bool,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradient but is not tied to a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter, returning the existing variable if the
    /// name is already bound on this tape.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&var) = self.by_name.get(name) {
            return Ok(var);
        }
        let value = params
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let var = self.leaf(value);
        self.bound.push((name.to_string(), var));
        self.by_name.insert(name.to_string(), var);
        Ok(var)
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a `1 x c` row vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: x.shape(),
                rhs: b.shape(),
            });
        }
        let mut value = x.clone();
        let cols = x.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % cols];
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first);
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != base[1] {
                        return Err(Error::ShapeMismatch {
                            op: "concat_rows",
                            lhs: base,
                            rhs: t.shape(),
                        });
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(rows, base[1], data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != base[0] {
                        return Err(Error::ShapeMismatch {
                            op: "concat_cols",
                            lhs: base,
                            rhs: t.shape(),
                        });
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(base[0] * cols);
                for r in 0..base[0] {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(base[0], cols, data)?
            }
        };
        let rg = self.needs(parts);
        let op = match axis {
            Axis::Rows => Op::ConcatRows(parts.to_vec()),
            Axis::Cols => Op::ConcatCols(parts.to_vec()),
        };
        Ok(self.push(value, op, rg))
    }

    /// Sub-matrix `[rows.start..rows.end) x [cols.start..cols.end)`.
    pub fn slice(
        &mut self,
        a: Var,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var> {
        let src = self.value(a);
        if rows.start > rows.end || cols.start > cols.end || rows.end > src.rows() || cols.end > src.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice {rows:?} x {cols:?} out of bounds for {:?}",
                src.shape()
            )));
        }
        let (nr, nc) = (rows.end - rows.start, cols.end - cols.start);
        let mut data = Vec::with_capacity(nr * nc);
        for r in rows.clone() {
            data.extend_from_slice(&src.row(r)[cols.clone()]);
        }
        let value = Tensor::new(nr, nc, data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::Slice {
                src: a,
                row0: rows.start,
                col0: cols.start,
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true by `fill`. Filled entries pass
    /// no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::InvalidArgument(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                src.shape()
            )));
        }
        let mut value = src.clone();
        for (v, &m) in value.data_mut().iter_mut().zip(mask) {
            if m {
                *v = fill;
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::MaskedFill {
                src: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Inverted dropout: at train time each entry is zeroed with probability
    /// `p` and survivors are divided by `1 - p`. Outside training, or with
    /// `p == 0`, the input is returned unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let src = self.value(a);
        let scale: Vec<f64> = (0..src.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut value = src.clone();
        for (v, s) in value.data_mut().iter_mut().zip(&scale) {
            *v *= s;
        }
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Dropout { src: a, scale }, rg))
    }

    /// Softmax normalizing along `axis`: `Axis::Cols` normalizes each row,
    /// `Axis::Rows` normalizes each column.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let value = softmax_along(self.value(a), axis);
        let rg = self.needs(&[a]);
        self.push(value, Op::Softmax(a, axis), rg)
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let src = self.value(a);
        let (rows, cols) = (src.rows(), src.cols());
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for (o, v) in out.iter_mut().zip(src.row(r)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= rows as f64);
                Tensor::row_vector(out)
            }
            Axis::Cols => {
                let out: Vec<f64> = (0..rows).map(|r| src.row(r).iter().sum::<f64>() / cols as f64).collect();
                Tensor::new(rows, 1, out).expect("column shape")
            }
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Mean(a, axis), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Row-major flatten into a single row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let value = self.value(a).reshape(1, n).expect("same length");
        let rg = self.needs(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Selects rows of `table` by index (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::OutOfRange { index: i, len: t.rows() });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(indices.len(), t.cols(), data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[target]` for a single-row logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let src = self.value(logits);
        if src.rows() != 1 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy expects a single row, got {:?}",
                src.shape()
            )));
        }
        let values = src.data();
        if target >= values.len() {
            return Err(Error::OutOfRange {
                index: target,
                len: values.len(),
            });
        }
        if is_masked(values[target]) {
            return Err(Error::MaskedTarget { index: target });
        }
        let loss = log_sum_exp(values) - values[target];
        let mut probs = vec![0.0; values.len()];
        softmax_into(values, &mut probs);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                src: logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from a `1x1` loss. A tape supports one
    /// backward pass; build a fresh tape for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backpropagated = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, dy.matmul(&bv.transpose())?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av.transpose().matmul(dy)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, dy.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                let cols = dy.cols();
                let mut g = vec![0.0; cols];
                for (i, v) in dy.data().iter().enumerate() {
                    g[i % cols] += v;
                }
                self.accumulate(grads, *row, Tensor::row_vector(g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, dy.zip_map(bv, "mul", |g, y| g * y)?);
                self.accumulate(grads, *b, dy.zip_map(av, "mul", |g, x| g * x)?);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, dy.map(|v| v * f)),
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let [r, c] = self.shape(*p);
                    let g = Tensor::new(r, c, dy.data()[row * c..(row + r) * c].to_vec())?;
                    self.accumulate(grads, *p, g);
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let [r, c] = self.shape(*p);
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend_from_slice(&dy.row(i)[col..col + c]);
                    }
                    self.accumulate(grads, *p, Tensor::new(r, c, data)?);
                    col += c;
                }
            }
            Op::Slice { src, row0, col0 } => {
                let [r, c] = self.shape(*src);
                let mut g = Tensor::zeros(r, c);
                for i in 0..dy.rows() {
                    for j in 0..dy.cols() {
                        g.set(row0 + i, col0 + j, dy.get(i, j));
                    }
                }
                self.accumulate(grads, *src, g);
            }
            Op::MaskedFill { src, mask } => {
                let mut g = dy.clone();
                for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *src, g);
            }
            Op::Relu(a) => {
                let g = dy.zip_map(self.value(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *a, g);
            }
            Op::Dropout { src, scale } => {
                let mut g = dy.clone();
                for (v, s) in g.data_mut().iter_mut().zip(scale) {
                    *v *= s;
                }
                self.accumulate(grads, *src, g);
            }
            Op::Softmax(a, axis) => {
                let g = softmax_backward(&node.value, dy, *axis);
                self.accumulate(grads, *a, g);
            }
            Op::Mean(a, axis) => {
                let [r, c] = self.shape(*a);
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = match axis {
                            Axis::Rows => dy.get(0, j) / r as f64,
                            Axis::Cols => dy.get(i, 0) / c as f64,
                        };
                        g.set(i, j, v);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, dy.item()));
            }
            Op::Reshape(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, dy.reshape(r, c)?);
            }
            Op::GatherRows { table, indices } => {
                let [r, c] = self.shape(*table);
                let mut g = Tensor::zeros(r, c);
                for (i, &row) in indices.iter().enumerate() {
                    let dst = &mut g.data_mut()[row * c..(row + 1) * c];
                    for (d, s) in dst.iter_mut().zip(dy.row(i)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::CrossEntropy { src, target, probs } => {
                let scale = dy.item();
                let mut g = probs.clone();
                g[*target] -= 1.0;
                g.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *src, Tensor::row_vector(g));
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_along(src: &Tensor, axis: Axis) -> Tensor {
    match axis {
        Axis::Cols => {
            let mut out = Tensor::zeros(src.rows(), src.cols());
            let cols = src.cols();
            for r in 0..src.rows() {
                softmax_into(src.row(r), &mut out.data_mut()[r * cols..(r + 1) * cols]);
            }
            out
        }
        Axis::Rows => softmax_along(&src.transpose(), Axis::Cols).transpose(),
    }
}

fn softmax_backward(y: &Tensor, dy: &Tensor, axis: Axis) -> Tensor {
    match axis {
        Axis::Cols => {
            let mut g = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, dr) = (y.row(r), dy.row(r));
                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                for c in 0..y.cols() {
                    g.set(r, c, yr[c] * (dr[c] - dot));
                }
            }
            g
        }
        Axis::Rows => softmax_backward(&y.transpose(), &dy.transpose(), Axis::Cols).transpose(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(1, 4, 3.7));
        let y = tape.softmax(x, Axis::Cols);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(2, 2, 1.0));
    }

    #[test]
    fn relu_kills_gradient_on_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![-1.0, 2.0, -0.5, 0.3]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::AlreadyBackpropagated)));
    }

    #[test]
    fn backward_on_matrix_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss([2, 2]))));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 5];
        logits[2] = 1e6;
        let x = tape.constant(Tensor::row_vector(logits));
        let l = tape.cross_entropy(x, 2).unwrap();
        assert!(tape.value(l).item() < 1e-6);

        let u = tape.constant(Tensor::full(1, 6, 0.3));
        let l = tape.cross_entropy(u, 4).unwrap();
        assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);

        let one = tape.constant(Tensor::scalar(-4.0));
        let l = tape.cross_entropy(one, 0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn cross_entropy_rejects_masked_target() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, super::super::tensor::SENTINEL]));
        assert!(matches!(tape.cross_entropy(x, 1), Err(Error::MaskedTarget { index: 1 })));
        assert!(matches!(tape.cross_entropy(x, 2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let m = tape.masked_fill(x, &[false, true, false], -5.0).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, -5.0, 3.0]);
        let s = tape.sum(m);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_is_identity_at_eval() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(3, 3, 2.0));
        let y = tape.dropout(x, 0.1, false, 9).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shared_param_binding_returns_same_var() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&params, "w").unwrap();
        let b = tape.param(&params, "w").unwrap();
        assert_eq!(a, b);
        assert!(tape.param(&params, "nope").is_err());
    }
}
