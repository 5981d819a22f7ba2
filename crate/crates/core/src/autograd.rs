//! Tape-based reverse-mode differentiation over small dense f64 tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in creation order, so parents always precede children and a
//! single reverse sweep in [`Graph::backward`] propagates gradients.
//!
//! Tensors are row-major `rows x cols` blocks. Vectors are single rows
//! (`1 x n`); scalars are `1 x 1`.
//!
//! Trainable parameters live outside the graph in a [`ParamStore`]. A graph
//! binds copies of them (whole tensors or gathered rows) as leaves, and
//! [`Graph::accumulate_into`] scatters the leaf gradients back into the
//! store after the backward sweep. One graph is built per batch and dropped
//! after the optimizer step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense block of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension {
                lhs: format!("{rows}x{cols}"),
                rhs: format!("len {}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    lhs: format!("row width {cols}"),
                    rhs: format!("row width {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{}x{}", t.rows, t.cols)
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `w (m x n) * x (1 x n) + b (1 x m)`
    Affine { x: Var, w: Var, b: Var },
    /// Every row of `x (r x n)` mapped through `w (m x n)` plus `b (1 x m)`.
    LinearRows { x: Var, w: Var, b: Var },
    /// `mat (r x c) * v (1 x c)` giving `1 x r`.
    MatVec { mat: Var, v: Var },
    /// `v (1 x r) * mat (r x c)` giving `1 x c`.
    VecMat { v: Var, mat: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Tensor times a `1 x 1` node.
    MulScalar { x: Var, s: Var },
    /// Each row of `x (r x c)` times the matching entry of `s (r x 1)`.
    MulRows { x: Var, s: Var },
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Row { mat: Var, index: usize },
    GatherRows { mat: Var, indices: Vec<usize> },
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowDot(Var, Var),
    Softmax(Var),
    LogSumExp(Var),
    Normalize(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    StopGradient(Var),
    BceWithLogits { logit: Var, label: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Owns all trainable tensors of a model. Single writer during training.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.clear();
            p.grad.resize(p.value.len(), 0.0);
        }
    }

    pub fn grads_finite(&self) -> std::result::Result<(), String> {
        for p in &self.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(p.name.clone());
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Binding {
    node: Var,
    param: ParamId,
    rows: Option<Vec<usize>>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<Binding>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`. Nodes that
    /// never received a contribution report zeros.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> Var {
        self.constant(Tensor::vector(v.to_vec()))
    }

    /// Trainable leaf not tied to any parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a whole parameter as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.bindings.push(Binding {
            node: v,
            param: id,
            rows: None,
        });
        v
    }

    /// Binds selected rows of a parameter matrix as one `rows.len() x cols`
    /// leaf. Gradients scatter-add back to the source rows, so repeated
    /// rows accumulate.
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let src = store.value(id);
        let mut data = Vec::with_capacity(rows.len() * src.cols);
        for &r in rows {
            if r >= src.rows {
                return Err(Error::OutOfVocabulary(format!(
                    "row {r} of parameter '{}' with {} rows",
                    store.get(id).name,
                    src.rows
                )));
            }
            data.extend_from_slice(src.row(r));
        }
        let t = Tensor {
            rows: rows.len(),
            cols: src.cols,
            data,
        };
        let v = self.push(t, Op::Leaf, true);
        self.bindings.push(Binding {
            node: v,
            param: id,
            rows: Some(rows.to_vec()),
        });
        Ok(v)
    }

    /// Adds the gradients of all bound leaves into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for b in &self.bindings {
            let Some(g) = self.grads.get(b.node.0).and_then(Option::as_ref) else {
                continue;
            };
            let p = store.get_mut(b.param);
            match &b.rows {
                None => {
                    for (acc, x) in p.grad.iter_mut().zip(g) {
                        *acc += x;
                    }
                }
                Some(rows) => {
                    let c = p.value.cols;
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut p.grad[r * c..(r + 1) * c];
                        for (acc, x) in dst.iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *acc += x;
                        }
                    }
                }
            }
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                lhs: shape_str(ta),
                rhs: shape_str(tb),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rows != 1 || tw.cols != tx.cols {
            return Err(Error::Dimension {
                lhs: shape_str(tw),
                rhs: shape_str(tx),
            });
        }
        if tb.len() != tw.rows {
            return Err(Error::Dimension {
                lhs: shape_str(tw),
                rhs: shape_str(tb),
            });
        }
        let mut out = tb.data.clone();
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(tw.row(i), &tx.data);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, rg))
    }

    pub fn linear_rows(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.cols != tx.cols || tb.len() != tw.rows {
            return Err(Error::Dimension {
                lhs: shape_str(tw),
                rhs: shape_str(tx),
            });
        }
        let m = tw.rows;
        let mut out = Vec::with_capacity(tx.rows * m);
        for r in 0..tx.rows {
            let xr = tx.row(r);
            for i in 0..m {
                out.push(tb.data[i] + dot(tw.row(i), xr));
            }
        }
        let t = Tensor {
            rows: tx.rows,
            cols: m,
            data: out,
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::LinearRows { x, w, b }, rg))
    }

    pub fn matvec(&mut self, mat: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(mat), self.value(v));
        if tv.rows != 1 || tm.cols != tv.cols {
            return Err(Error::Dimension {
                lhs: shape_str(tm),
                rhs: shape_str(tv),
            });
        }
        let out: Vec<f64> = (0..tm.rows).map(|r| dot(tm.row(r), &tv.data)).collect();
        let rg = self.rg(mat) || self.rg(v);
        Ok(self.push(Tensor::vector(out), Op::MatVec { mat, v }, rg))
    }

    pub fn vecmat(&mut self, v: Var, mat: Var) -> Result<Var> {
        let (tv, tm) = (self.value(v), self.value(mat));
        if tv.rows != 1 || tv.cols != tm.rows {
            return Err(Error::Dimension {
                lhs: shape_str(tv),
                rhs: shape_str(tm),
            });
        }
        let mut out = vec![0.0; tm.cols];
        for (r, &w) in tv.data.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(tm.row(r)) {
                *o += w * x;
            }
        }
        let rg = self.rg(mat) || self.rg(v);
        Ok(self.push(Tensor::vector(out), Op::VecMat { v, mat }, rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let t = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::Dimension {
                lhs: "1x1".into(),
                rhs: shape_str(ts),
            });
        }
        let k = ts.data[0];
        let src = self.value(x);
        let t = Tensor {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|v| v * k).collect(),
        };
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalar { x, s }, rg))
    }

    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != tx.rows {
            return Err(Error::Dimension {
                lhs: shape_str(tx),
                rhs: shape_str(ts),
            });
        }
        let mut data = tx.data.clone();
        for r in 0..tx.rows {
            for v in &mut data[r * tx.cols..(r + 1) * tx.cols] {
                *v *= ts.data[r];
            }
        }
        let t = Tensor {
            rows: tx.rows,
            cols: tx.cols,
            data,
        };
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulRows { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddConst(x), |v| v + k)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_const(n, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension {
                lhs: shape_str(ta),
                rhs: shape_str(tb),
            });
        }
        let s = dot(&ta.data, &tb.data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Concatenates row vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rows != 1 {
                return Err(Error::Dimension {
                    lhs: "1xn".into(),
                    rhs: shape_str(t),
                });
            }
            data.extend_from_slice(&t.data);
            rg |= self.rg(p);
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    pub fn row(&mut self, mat: Var, index: usize) -> Result<Var> {
        let t = self.value(mat);
        if index >= t.rows {
            return Err(Error::Dimension {
                lhs: shape_str(t),
                rhs: format!("row {index}"),
            });
        }
        let v = Tensor::vector(t.row(index).to_vec());
        let rg = self.rg(mat);
        Ok(self.push(v, Op::Row { mat, index }, rg))
    }

    pub fn gather_rows(&mut self, mat: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(mat);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            if i >= t.rows {
                return Err(Error::Dimension {
                    lhs: shape_str(t),
                    rhs: format!("row {i}"),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor {
            rows: indices.len(),
            cols: t.cols,
            data,
        };
        let rg = self.rg(mat);
        Ok(self.push(
            out,
            Op::GatherRows {
                mat,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cols = rows.first().map_or(0, |&r| self.value(r).len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        let mut rg = false;
        for &r in rows {
            let t = self.value(r);
            if t.len() != cols {
                return Err(Error::Dimension {
                    lhs: format!("row width {cols}"),
                    rhs: shape_str(t),
                });
            }
            data.extend_from_slice(&t.data);
            rg |= self.rg(r);
        }
        let out = Tensor {
            rows: rows.len(),
            cols,
            data,
        };
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows);
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rows != rows {
                return Err(Error::Dimension {
                    lhs: format!("{rows} rows"),
                    rhs: shape_str(t),
                });
            }
            cols += t.cols;
            rg |= self.rg(p);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Dot product of matching rows: `n x c`, `n x c` -> `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                lhs: shape_str(ta),
                rhs: shape_str(tb),
            });
        }
        let data = (0..ta.rows).map(|r| dot(ta.row(r), tb.row(r))).collect();
        let out = Tensor {
            rows: ta.rows,
            cols: 1,
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Softmax over all entries, computed with max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        if t.is_empty() {
            return Err(Error::Domain("softmax of an empty vector".into()));
        }
        let out = softmax_values(&t.data);
        let shape = t.shape();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor {
                rows: shape.0,
                cols: shape.1,
                data: out,
            },
            Op::Softmax(logits),
            rg,
        ))
    }

    /// `ln(sum(exp(x)))`. Terms are summed in ascending order of value, so
    /// the result does not depend on the order of the entries.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Domain("log-sum-exp of an empty vector".into()));
        }
        let v = log_sum_exp_values(&t.data);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(x), rg))
    }

    /// Scales a vector to unit L2 norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = norm(&t.data);
        if n == 0.0 {
            return Err(Error::DegenerateVector("normalize of a zero vector".into()));
        }
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|v| v / n).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Normalize(x), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut data = t.data.clone();
        for r in 0..t.rows {
            let row = &mut data[r * t.cols..(r + 1) * t.cols];
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::DegenerateVector(format!("normalize of zero row {r}")));
            }
            for v in row {
                *v /= n;
            }
        }
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows(x), rg))
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension {
                lhs: shape_str(ta),
                rhs: shape_str(tb),
            });
        }
        let (na, nb) = (norm(&ta.data), norm(&tb.data));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector(
                "cosine similarity with a zero-norm vector".into(),
            ));
        }
        let c = (dot(&ta.data, &tb.data) / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// Identity forward; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient(x), false)
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`, evaluated
    /// as `softplus(z) - y*z` for stability.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var> {
        let t = self.value(logit);
        if t.len() != 1 {
            return Err(Error::Dimension {
                lhs: "1x1".into(),
                rhs: shape_str(t),
            });
        }
        let z = t.data[0];
        let v = softplus(z) - label * z;
        let rg = self.rg(logit);
        Ok(self.push(Tensor::scalar(v), Op::BceWithLogits { logit, label }, rg))
    }

    /// Parent links of a node, in operand order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } | Op::LinearRows { x, w, b } => vec![*x, *w, *b],
            Op::MatVec { mat, v } | Op::VecMat { v, mat } => vec![*mat, *v],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::Cosine(a, b)
            | Op::RowDot(a, b) => {
                vec![*a, *b]
            }
            Op::MulScalar { x, s } | Op::MulRows { x, s } => vec![*x, *s],
            Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::LogSumExp(x)
            | Op::Normalize(x)
            | Op::NormalizeRows(x)
            | Op::StopGradient(x) => vec![*x],
            Op::Concat(ps) | Op::StackRows(ps) | Op::ConcatCols(ps) => ps.clone(),
            Op::Row { mat, .. } | Op::GatherRows { mat, .. } => vec![*mat],
            Op::BceWithLogits { logit, .. } => vec![*logit],
        }
    }

    /// Reverse sweep from a scalar `loss`. Each call starts from fresh
    /// gradient buffers, so node gradients reflect only this pass; parameter
    /// gradients accumulate across calls through [`Graph::accumulate_into`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Domain(format!(
                "backward from non-scalar node of shape {}",
                shape_str(self.value(loss))
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Affine { x, w, b } => {
                let tx = self.nodes[x.0].value.data.clone();
                let tw = self.nodes[w.0].value.clone();
                self.acc(b, |gb| add_into(gb, g));
                self.acc(w, |gw| {
                    for (r, &gr) in g.iter().enumerate() {
                        for (acc, &xv) in gw[r * tw.cols..(r + 1) * tw.cols].iter_mut().zip(&tx) {
                            *acc += gr * xv;
                        }
                    }
                });
                self.acc(x, |gx| {
                    for (r, &gr) in g.iter().enumerate() {
                        for (acc, &wv) in gx.iter_mut().zip(tw.row(r)) {
                            *acc += gr * wv;
                        }
                    }
                });
            }
            Op::LinearRows { x, w, b } => {
                let tx = self.nodes[x.0].value.clone();
                let tw = self.nodes[w.0].value.clone();
                let m = tw.rows;
                self.acc(b, |gb| {
                    for r in 0..tx.rows {
                        add_into(gb, &g[r * m..(r + 1) * m]);
                    }
                });
                self.acc(w, |gw| {
                    for r in 0..tx.rows {
                        let xr = tx.row(r);
                        for o in 0..m {
                            let go = g[r * m + o];
                            if go != 0.0 {
                                for (acc, &xv) in
                                    gw[o * tw.cols..(o + 1) * tw.cols].iter_mut().zip(xr)
                                {
                                    *acc += go * xv;
                                }
                            }
                        }
                    }
                });
                self.acc(x, |gx| {
                    for r in 0..tx.rows {
                        let dst = &mut gx[r * tx.cols..(r + 1) * tx.cols];
                        for o in 0..m {
                            let go = g[r * m + o];
                            for (acc, &wv) in dst.iter_mut().zip(tw.row(o)) {
                                *acc += go * wv;
                            }
                        }
                    }
                });
            }
            Op::MatVec { mat, v } => {
                let tm = self.nodes[mat.0].value.clone();
                let tv = self.nodes[v.0].value.data.clone();
                self.acc(mat, |gm| {
                    for (r, &gr) in g.iter().enumerate() {
                        for (acc, &x) in gm[r * tm.cols..(r + 1) * tm.cols].iter_mut().zip(&tv) {
                            *acc += gr * x;
                        }
                    }
                });
                self.acc(v, |gv| {
                    for (r, &gr) in g.iter().enumerate() {
                        for (acc, &x) in gv.iter_mut().zip(tm.row(r)) {
                            *acc += gr * x;
                        }
                    }
                });
            }
            Op::VecMat { v, mat } => {
                let tm = self.nodes[mat.0].value.clone();
                let tv = self.nodes[v.0].value.data.clone();
                self.acc(mat, |gm| {
                    for (r, &w) in tv.iter().enumerate() {
                        for (acc, &gc) in gm[r * tm.cols..(r + 1) * tm.cols].iter_mut().zip(g) {
                            *acc += w * gc;
                        }
                    }
                });
                self.acc(v, |gv| {
                    for (r, acc) in gv.iter_mut().enumerate() {
                        *acc += dot(tm.row(r), g);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| {
                    for (acc, &x) in gb.iter_mut().zip(g) {
                        *acc -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let ta = self.nodes[a.0].value.data.clone();
                let tb = self.nodes[b.0].value.data.clone();
                self.acc(a, |ga| {
                    for ((acc, &x), &y) in ga.iter_mut().zip(g).zip(&tb) {
                        *acc += x * y;
                    }
                });
                self.acc(b, |gb| {
                    for ((acc, &x), &y) in gb.iter_mut().zip(g).zip(&ta) {
                        *acc += x * y;
                    }
                });
            }
            Op::MulScalar { x, s } => {
                let k = self.nodes[s.0].value.data[0];
                let tx = self.nodes[x.0].value.data.clone();
                self.acc(x, |gx| {
                    for (acc, &v) in gx.iter_mut().zip(g) {
                        *acc += v * k;
                    }
                });
                self.acc(s, |gs| gs[0] += dot(g, &tx));
            }
            Op::MulRows { x, s } => {
                let tx = self.nodes[x.0].value.clone();
                let ts = self.nodes[s.0].value.data.clone();
                let c = tx.cols;
                self.acc(x, |gx| {
                    for r in 0..tx.rows {
                        for k in r * c..(r + 1) * c {
                            gx[k] += g[k] * ts[r];
                        }
                    }
                });
                self.acc(s, |gs| {
                    for r in 0..tx.rows {
                        gs[r] += dot(&g[r * c..(r + 1) * c], tx.row(r));
                    }
                });
            }
            Op::Scale(x, k) => self.acc(x, |gx| {
                for (acc, &v) in gx.iter_mut().zip(g) {
                    *acc += v * k;
                }
            }),
            Op::AddConst(x) => self.acc(x, |gx| add_into(gx, g)),
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data.clone();
                self.acc(x, |gx| {
                    for ((acc, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *acc += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data.clone();
                self.acc(x, |gx| {
                    for ((acc, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *acc += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.nodes[x.0].value.data.clone();
                self.acc(x, |gx| {
                    for ((acc, &gv), &xv) in gx.iter_mut().zip(g).zip(&tx) {
                        if xv > 0.0 {
                            *acc += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data.clone();
                self.acc(x, |gx| {
                    for ((acc, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *acc += gv * yv;
                    }
                });
            }
            Op::Ln(x) => {
                let tx = self.nodes[x.0].value.data.clone();
                self.acc(x, |gx| {
                    for ((acc, &gv), &xv) in gx.iter_mut().zip(g).zip(&tx) {
                        *acc += gv / xv;
                    }
                });
            }
            Op::Square(x) => {
                let tx = self.nodes[x.0].value.data.clone();
                self.acc(x, |gx| {
                    for ((acc, &gv), &xv) in gx.iter_mut().zip(g).zip(&tx) {
                        *acc += 2.0 * gv * xv;
                    }
                });
            }
            Op::Sum(x) => self.acc(x, |gx| {
                for acc in gx.iter_mut() {
                    *acc += g[0];
                }
            }),
            Op::Dot(a, b) => {
                let ta = self.nodes[a.0].value.data.clone();
                let tb = self.nodes[b.0].value.data.clone();
                self.acc(a, |ga| {
                    for (acc, &y) in ga.iter_mut().zip(&tb) {
                        *acc += g[0] * y;
                    }
                });
                self.acc(b, |gb| {
                    for (acc, &x) in gb.iter_mut().zip(&ta) {
                        *acc += g[0] * x;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Row { mat, index } => {
                let c = self.nodes[mat.0].value.cols;
                self.acc(mat, |gm| add_into(&mut gm[index * c..(index + 1) * c], g));
            }
            Op::GatherRows { mat, indices } => {
                let c = self.nodes[mat.0].value.cols;
                self.acc(mat, |gm| {
                    for (k, &r) in indices.iter().enumerate() {
                        add_into(&mut gm[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::StackRows(rows) => {
                let mut off = 0;
                for r in rows {
                    let len = self.nodes[r.0].value.len();
                    self.acc(r, |gr| add_into(gr, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols).collect();
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (p, w) in parts.into_iter().zip(widths) {
                    self.acc(p, |gp| {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            add_into(dst, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::RowDot(a, b) => {
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                let c = ta.cols;
                self.acc(a, |ga| {
                    for (r, &gr) in g.iter().enumerate() {
                        for k in r * c..(r + 1) * c {
                            ga[k] += gr * tb.data[k];
                        }
                    }
                });
                self.acc(b, |gb| {
                    for (r, &gr) in g.iter().enumerate() {
                        for k in r * c..(r + 1) * c {
                            gb[k] += gr * ta.data[k];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data.clone();
                let s = dot(g, &y);
                self.acc(x, |gx| {
                    for ((acc, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *acc += yv * (gv - s);
                    }
                });
            }
            Op::LogSumExp(x) => {
                let p = softmax_values(&self.nodes[x.0].value.data);
                self.acc(x, |gx| {
                    for (acc, &pv) in gx.iter_mut().zip(&p) {
                        *acc += g[0] * pv;
                    }
                });
            }
            Op::Normalize(x) => {
                let tx = self.nodes[x.0].value.data.clone();
                let y = self.nodes[i].value.data.clone();
                let n = norm(&tx);
                let gy = dot(g, &y);
                self.acc(x, |gx| {
                    for ((acc, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *acc += (gv - gy * yv) / n;
                    }
                });
            }
            Op::NormalizeRows(x) => {
                let tx = self.nodes[x.0].value.clone();
                let y = self.nodes[i].value.data.clone();
                let c = tx.cols;
                self.acc(x, |gx| {
                    for r in 0..tx.rows {
                        let n = norm(tx.row(r));
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let gy = dot(gr, yr);
                        for k in 0..c {
                            gx[r * c + k] += (gr[k] - gy * yr[k]) / n;
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let ta = self.nodes[a.0].value.data.clone();
                let tb = self.nodes[b.0].value.data.clone();
                let (na, nb) = (norm(&ta), norm(&tb));
                let c = dot(&ta, &tb) / (na * nb);
                self.acc(a, |ga| {
                    for ((acc, &x), &y) in ga.iter_mut().zip(&ta).zip(&tb) {
                        *acc += g[0] * (y / (na * nb) - c * x / (na * na));
                    }
                });
                self.acc(b, |gb| {
                    for ((acc, &x), &y) in gb.iter_mut().zip(&ta).zip(&tb) {
                        *acc += g[0] * (x / (na * nb) - c * y / (nb * nb));
                    }
                });
            }
            Op::BceWithLogits { logit, label } => {
                let z = self.nodes[logit.0].value.data[0];
                self.acc(logit, |gz| gz[0] += g[0] * (sigmoid(z) - label));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp_values(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    exps.sort_by(f64::total_cmp);
    max + exps.iter().sum::<f64>().ln()
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients of `loss_fn` with central differences over
/// every scalar of the listed parameters. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_into(store);
    let analytic: Vec<Vec<f64>> = params.iter().map(|&p| store.grad(p).to_vec()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.scalar(l))
    };

    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (pi, &p) in params.iter().enumerate() {
        for k in 0..store.value(p).len() {
            let orig = store.value(p).data[k];
            store.get_mut(p).value.data[k] = orig + eps;
            let up = eval(store)?;
            store.get_mut(p).value.data[k] = orig - eps;
            let down = eval(store)?;
            store.get_mut(p).value.data[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::ProbeFailure(format!(
                    "parameter '{}' coordinate {k}",
                    store.get(p).name
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            coords += 1;
        }
    }
    store.zero_grad();
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates: coords,
    })
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for every parameter of a store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// What happened on one optimizer call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepOutcome {
    Applied { step: u64 },
    /// A gradient was NaN or infinite; nothing was updated.
    Skipped { step: u64, param: String },
}

/// Bias-corrected Adam update of every parameter in `store`, in place.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> StepOutcome {
    if let Err(param) = store.grads_finite() {
        return StepOutcome::Skipped {
            step: state.step,
            param,
        };
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((x, &g), mk), vk) in p.value.data.iter_mut().zip(&p.grad).zip(m).zip(v) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g * g;
            let mhat = *mk / bc1;
            let vhat = *vk / bc2;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    StepOutcome::Applied { step: state.step }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[1.0, 2.0]);
        let w = g.constant(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant_vec(&[0.0, 0.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0]);

        let x = g.constant_vec(&[1.0, 0.0]);
        let w = g.constant(Tensor::zeros(2, 2));
        let b = g.constant_vec(&[3.0, 4.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.data(y), &[3.0, 4.0]);

        let x = g.constant_vec(&[1.0, 2.0]);
        let w = g.constant(Tensor::new(2, 2, vec![1.0, 1.0, 2.0, 0.0]).unwrap());
        let b = g.constant_vec(&[0.0, 1.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.data(y), &[3.0, 3.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[1.0, 2.0, 3.0]);
        let w = g.constant(Tensor::zeros(2, 2));
        let b = g.constant_vec(&[0.0, 0.0]);
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("2x2") && err.contains("1x3"), "{err}");
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((1.0 - sigmoid(50.0)).abs() < 1e-12);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0).is_finite());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[0.0, 0.0, 0.0]);
        let s = g.softmax(x).unwrap();
        assert!(close(g.data(s), &[1.0 / 3.0; 3], 1e-15));

        let x = g.constant_vec(&[1000.0, 0.0]);
        let s = g.softmax(x).unwrap();
        assert!(close(g.data(s), &[1.0, 0.0], 1e-12));

        let x = g.constant_vec(&[2f64.ln(), 0.0]);
        let s = g.softmax(x).unwrap();
        assert!(close(g.data(s), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let x = g.constant(Tensor::vector(vec![]));
        assert!(matches!(g.softmax(x), Err(Error::Domain(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let cases = [
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([3.0, 4.0], [3.0, 4.0], 1.0),
            ([1.0, 0.0], [1.0, 1.0], std::f64::consts::FRAC_1_SQRT_2),
        ];
        for (a, b, want) in cases {
            let a = g.constant_vec(&a);
            let b = g.constant_vec(&b);
            let c = g.cosine_similarity(a, b).unwrap();
            assert!((g.scalar(c) - want).abs() < 1e-12);
        }
        let z = g.constant_vec(&[0.0, 0.0]);
        let o = g.constant_vec(&[1.0, 0.0]);
        assert!(matches!(
            g.cosine_similarity(z, o),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn stop_gradient_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.variable(Tensor::vector(vec![5.0, -3.0]));
        let sx = g.stop_gradient(x);
        assert_eq!(g.data(sx), &[1.0, 2.0]);
        let p = g.mul(sx, y).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![0.0, 0.0]);
        assert_eq!(g.grad(y), vec![1.0, 2.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sx = g.stop_gradient(x);
        let p = g.mul(x, sx).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![1.0, 2.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x), vec![1.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![2.0, 4.0, 6.0]);
        assert_eq!(g.grad(l), vec![1.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let s = g.stop_gradient(x);
        let e = g.exp(s);
        let l = g.sum(e);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Domain(_))));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.5, -0.5]));
        let w = g.variable(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant_vec(&[0.0, 1.0]);
        let h = g.affine(x, w, b).unwrap();
        let t = g.tanh(h);
        let s = g.softmax(t).unwrap();
        let k = g.add_const(s, 1.0);
        let sg = g.stop_gradient(k);
        let l = g.dot(sg, x).unwrap();
        for i in 0..g.len() {
            for p in g.parents(Var(i)) {
                assert!(p.id() < i);
            }
        }
        assert_eq!(g.parents(l), vec![sg, x]);
    }

    #[test]
    fn param_rows_accumulate_repeated_lookups() {
        let mut store = ParamStore::new();
        let t = store.add("emb", Tensor::new(3, 2, vec![0.0; 6]).unwrap());
        let mut g = Graph::new();
        let a = g.param_rows(&store, t, &[1]).unwrap();
        let b = g.param_rows(&store, t, &[1, 1]).unwrap();
        let sa = g.sum(a);
        let sb = g.sum(b);
        let l = g.add(sa, sb).unwrap();
        g.backward(l).unwrap();
        g.accumulate_into(&mut store);
        assert_eq!(store.grad(t), &[0.0, 0.0, 3.0, 3.0, 0.0, 0.0]);
        assert!(matches!(
            g.param_rows(&store, t, &[3]),
            Err(Error::OutOfVocabulary(_))
        ));
    }

    #[test]
    fn fd_check_on_sum_is_exact() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![0.3, -1.2, 4.0]));
        let check = finite_difference_check(&mut store, &[p], 1e-5, |g, s| {
            let x = g.param(s, p);
            Ok(g.sum(x))
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-10, "{check:?}");
        assert_eq!(check.coordinates, 3);
    }

    #[test]
    fn fd_check_reports_probe_failure() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![0.0]));
        let err = finite_difference_check(&mut store, &[p], 1e-5, |g, s| {
            let x = g.param(s, p);
            let l = g.ln(x);
            Ok(g.sum(l))
        })
        .unwrap_err();
        assert!(matches!(err, Error::ProbeFailure(_)), "{err}");
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::vector(vec![1.0]));
        let mut st = AdamState::new(&store);

        store.zero_grad();
        assert_eq!(adam_step(&mut store, &mut st, &cfg), StepOutcome::Applied { step: 1 });
        assert_eq!(store.value(p).data[0], 1.0);

        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::vector(vec![1.0]));
        let mut st = AdamState::new(&store);
        store.get_mut(p).grad[0] = 1.0;
        adam_step(&mut store, &mut st, &cfg);
        let d1 = store.value(p).data[0] - 1.0;
        assert!((d1 + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        let before = store.value(p).data[0];
        adam_step(&mut store, &mut st, &cfg);
        let d2 = store.value(p).data[0] - before;
        assert!(d1 < 0.0 && d2 < 0.0);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut st = AdamState::new(&store);
        store.get_mut(p).grad[1] = f64::NAN;
        let out = adam_step(&mut store, &mut st, &AdamConfig::default());
        assert_eq!(
            out,
            StepOutcome::Skipped {
                step: 0,
                param: "w".into()
            }
        );
        assert_eq!(store.value(p).data, vec![1.0, 2.0]);
    }
}
