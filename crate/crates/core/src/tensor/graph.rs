//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a linear tape.
//! Nodes are created in dependency order, so walking the tape backwards from
//! the loss is a valid reverse topological order and visits each node once.
//! Graphs are cheap to build and are meant to be thrown away after a single
//! forward/backward pass.

use std::collections::HashMap;

use super::kernels;
use super::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSum(Var),
    Conv2d { x: Var, w: Var, b: Var, k: usize, cols: Vec<T> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    StraightThrough(Var),
    RowNormGuarded { x: Var, sums: Vec<T> },
    BceWithLogits { x: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph over element type `T`.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable leaf. Repeated calls with the same name return the
    /// same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(name.to_owned(), v);
        self.param_order.push((name.to_owned(), v));
        v
    }

    /// Register an existing node under a parameter name, so later
    /// [`Graph::param`] calls with that name return it.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::validation(format!("parameter `{name}` is already bound")));
        }
        self.params.insert(name.to_owned(), v);
        self.param_order.push((name.to_owned(), v));
        Ok(())
    }

    /// Parameters bound so far, in binding order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_dims(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{op}: operand dims {:?} and {:?} differ",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn mat(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .shape2()
            .map_err(|_| Error::shape(format!("{op}: expected a matrix, got dims {:?}", self.dims(v))))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.dims().to_vec(), data).expect("same dims");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "div")?;
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// `a + c` for a constant tensor `c` (e.g. Gumbel noise, attention masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.dims(a) != c.dims() {
            return Err(Error::shape(format!("add_const: dims {:?} and {:?} differ", self.dims(a), c.dims())));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.dims().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::AddConst(a), rg))
    }

    /// `a ⊙ c` for a constant tensor `c`.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.dims(a) != c.dims() {
            return Err(Error::shape(format!("mul_const: dims {:?} and {:?} differ", self.dims(a), c.dims())));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.dims().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, c.data().to_vec()), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (m, n) = self.mat(a, op)?;
        if self.value(b).len() != n {
            return Err(Error::shape(format!(
                "{op}: row vector of {} elements cannot broadcast over {:?}",
                self.value(b).len(),
                self.dims(a)
            )));
        }
        Ok((m, n))
    }

    /// `a[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, b, "add_row")?;
        let vb = self.value(b).data().to_vec();
        let t = self.value(a);
        let data = t.data().iter().enumerate().map(|(i, &x)| x + vb[i % n]).collect();
        let t = Tensor::new(t.dims().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// `a[m×n] ⊙ b[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, b, "mul_row")?;
        let vb = self.value(b).data().to_vec();
        let t = self.value(a);
        let data = t.data().iter().enumerate().map(|(i, &x)| x * vb[i % n]).collect();
        let t = Tensor::new(t.dims().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MulRow(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: left operand {:?} and right operand {:?} have mismatched inner dims",
                self.dims(a),
                self.dims(b)
            )));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt: left operand {:?} and right operand {:?} have mismatched inner dims",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut data = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut data, m, n, k);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], data)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(dims.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() {
            return Err(Error::shape(format!("softmax: axis {axis} out of range for {dims:?}")));
        }
        let data = kernels::softmax_axis(self.value(a).data(), &dims, axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(dims, data)?, Op::Softmax(a, axis), rg))
    }

    /// Log-softmax over the last axis of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "log_softmax")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([m, n], out)?, Op::LogSoftmax(a), rg))
    }

    /// Normalise each row of a matrix to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let (m, n) = self.mat(a, "layer_norm")?;
        let x = self.value(a).data();
        let nf = lit::<T>(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * inv;
            }
        }
        let t = Tensor::new([m, n], xhat.clone())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { x: a, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / lit(t.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows: `[m×n] -> [n]` (global average pooling over the
    /// leading axis).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "mean_rows")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for c in 0..n {
                out[c] = out[c] + x[r * n + c];
            }
        }
        let mf = lit::<T>(m as f64);
        for v in &mut out {
            *v = *v / mf;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([n], out)?, Op::MeanRows(a), rg))
    }

    /// Row sums: `[m×n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "row_sum")?;
        let x = self.value(a).data();
        let out = (0..m).map(|r| x[r * n..(r + 1) * n].iter().copied().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([m], out)?, Op::RowSum(a), rg))
    }

    /// Stride-1 cross-correlation of an `H×W×Cin` map with a `k×k×Cin×Cout`
    /// kernel, zero-padded to preserve spatial size, plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let [h, wid, cin] = xd[..] else {
            return Err(Error::shape(format!("conv2d: input must be H×W×C, got {xd:?}")));
        };
        let [k, k2, wcin, cout] = wd[..] else {
            return Err(Error::shape(format!("conv2d: kernel must be k×k×Cin×Cout, got {wd:?}")));
        };
        if k != k2 || !matches!(k, 1 | 3) {
            return Err(Error::config(format!("conv2d: unsupported kernel size {k}×{k2}")));
        }
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, kernel expects {wcin}")));
        }
        if self.value(b).len() != cout {
            return Err(Error::shape(format!("conv2d: bias has {} entries, need {cout}", self.value(b).len())));
        }
        let cols = kernels::im2col(self.value(x).data(), h, wid, cin, k);
        let hw = h * wid;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(hw * cout);
        for _ in 0..hw {
            out.extend_from_slice(bias);
        }
        kernels::matmul_acc(&cols, self.value(w).data(), &mut out, hw, k * k * cin, cout);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new([h, wid, cout], out)?, Op::Conv2d { x, w, b, k, cols }, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape(format!("slice_cols: range {start}..{end} out of bounds for {n} columns")));
        }
        let x = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([m, w], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols: no operands"));
        };
        let (m, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape(format!("concat_cols: row counts {m} and {pm} differ")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new([m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Gather rows of a matrix by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(format!("select_rows: index {bad} out of range for {m} rows")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([idx.len(), n], out)?, Op::SelectRows(a, idx.to_vec()), rg))
    }

    /// Hard one-hot of the argmax along axis 0 of a matrix, with identity
    /// backward (straight-through). Ties go to the lowest row index.
    pub fn straight_through_onehot(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "straight_through_onehot")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for c in 0..n {
            let mut best = 0;
            for r in 1..m {
                if x[r * n + c] > x[best * n + c] {
                    best = r;
                }
            }
            out[best * n + c] = T::one();
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([m, n], out)?, Op::StraightThrough(a), rg))
    }

    /// Divide each row by `max(row_sum, 1)`.
    pub fn row_normalize_guarded(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "row_normalize_guarded")?;
        let x = self.value(a).data();
        let sums: Vec<T> = (0..m).map(|r| x[r * n..(r + 1) * n].iter().copied().sum()).collect();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let d = sums[r].max(T::one());
            for c in 0..n {
                out[r * n + c] = x[r * n + c] / d;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([m, n], out)?, Op::RowNormGuarded { x: a, sums }, rg))
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and constant targets,
    /// computed in the numerically stable logits form.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(Error::shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                self.value(x).len(),
                target.len()
            )));
        }
        let xv = self.value(x).data();
        let n = lit::<T>(xv.len() as f64);
        let total: T = xv
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total / n), Op::BceWithLogits { x, target: target.data().to_vec() }, rg))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward: loss must be a scalar, got dims {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.dims().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulate `f(i)` into the gradient buffer of `v`.
        let mut acc = |v: Var, f: &dyn Fn(usize) -> T| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            for (i, b) in buf.iter_mut().enumerate() {
                *b = *b + f(i);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] * vb[i]);
                acc(*b, &|i| g[i] * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] / vb[i]);
                acc(*b, &|i| -g[i] * va[i] / (vb[i] * vb[i]));
            }
            Op::AddConst(a) | Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                acc(*a, &|i| g[i]);
            }
            Op::MulConst(a, c) => acc(*a, &|i| g[i] * c[i]),
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, &|i| g[i] * s);
            }
            Op::AddRow(a, b) => {
                acc(*a, &|i| g[i]);
                if rg(*b) {
                    let n = len(*b);
                    let mut gb = vec![T::zero(); n];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + gi;
                    }
                    acc(*b, &|i| gb[i]);
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                acc(*a, &|i| g[i] * vb[i % n]);
                if rg(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + gi * va[i];
                    }
                    acc(*b, &|i| gb[i]);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.shape2().expect("matrix");
                let n = self.nodes[b.0].value.dims()[1];
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g, val(*b), &mut ga, m, k, n);
                    acc(*a, &|i| ga[i]);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(val(*a), g, &mut gb, m, k, n);
                    acc(*b, &|i| gb[i]);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.nodes[a.0].value.shape2().expect("matrix");
                let n = self.nodes[b.0].value.dims()[0];
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_acc(g, val(*b), &mut ga, m, n, k);
                    acc(*a, &|i| ga[i]);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    kernels::matmul_tn_acc(g, val(*a), &mut gb, m, n, k);
                    acc(*b, &|i| gb[i]);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.shape2().expect("matrix");
                let ga = kernels::transpose(g, c, r);
                acc(*a, &|i| ga[i]);
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &|i| if va[i] > T::zero() { g[i] } else { T::zero() });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|i| g[i] * y[i]);
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &|i| g[i] / va[i]);
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                let (lo, hi) = (*lo, *hi);
                acc(*a, &|i| if va[i] >= lo && va[i] <= hi { g[i] } else { T::zero() });
            }
            Op::Softmax(a, axis) => {
                let ga = kernels::softmax_vjp(node.value.data(), g, node.value.dims(), *axis);
                acc(*a, &|i| ga[i]);
            }
            Op::LogSoftmax(a) => {
                let (m, n) = node.value.shape2().expect("matrix");
                let y = node.value.data();
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let gs: T = g[r * n..(r + 1) * n].iter().copied().sum();
                    for c in 0..n {
                        ga[r * n + c] = g[r * n + c] - y[r * n + c].exp() * gs;
                    }
                }
                acc(*a, &|i| ga[i]);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (m, n) = node.value.shape2().expect("matrix");
                let nf = lit::<T>(n as f64);
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        ga[r * n + c] = inv_std[r] / nf * (nf * gr[c] - sg - xr[c] * sgx);
                    }
                }
                acc(*x, &|i| ga[i]);
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &|_| g0);
            }
            Op::Mean(a) => {
                let g0 = g[0] / lit(len(*a) as f64);
                acc(*a, &|_| g0);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.nodes[a.0].value.shape2().expect("matrix");
                let mf = lit::<T>(m as f64);
                acc(*a, &|i| g[i % n] / mf);
            }
            Op::RowSum(a) => {
                let (_, n) = self.nodes[a.0].value.shape2().expect("matrix");
                acc(*a, &|i| g[i / n]);
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let xd = self.nodes[x.0].value.dims();
                let (h, wid, cin) = (xd[0], xd[1], xd[2]);
                let cout = self.nodes[w.0].value.dims()[3];
                let hw = h * wid;
                let kc = k * k * cin;
                if rg(*w) {
                    let mut gw = vec![T::zero(); kc * cout];
                    kernels::matmul_tn_acc(cols, g, &mut gw, hw, kc, cout);
                    acc(*w, &|i| gw[i]);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); cout];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % cout] = gb[i % cout] + gi;
                    }
                    acc(*b, &|i| gb[i]);
                }
                if rg(*x) {
                    let mut gcols = vec![T::zero(); hw * kc];
                    kernels::matmul_nt_acc(g, val(*w), &mut gcols, hw, kc, cout);
                    let mut gx = vec![T::zero(); hw * cin];
                    kernels::col2im_acc(&gcols, &mut gx, h, wid, cin, *k);
                    acc(*x, &|i| gx[i]);
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.nodes[a.0].value.dims()[1];
                let w = node.value.dims()[1];
                let start = *start;
                acc(*a, &|i| {
                    let (r, c) = (i / n, i % n);
                    if c >= start && c < start + w {
                        g[r * w + c - start]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims()[1];
                    acc(p, &|i| g[(i / w) * total + offset + i % w]);
                    offset += w;
                }
            }
            Op::SelectRows(a, idx) => {
                let n = node.value.dims()[1];
                let mut ga = vec![T::zero(); len(*a)];
                for (o, &r) in idx.iter().enumerate() {
                    for c in 0..n {
                        ga[r * n + c] = ga[r * n + c] + g[o * n + c];
                    }
                }
                acc(*a, &|i| ga[i]);
            }
            Op::RowNormGuarded { x, sums } => {
                let (m, n) = node.value.shape2().expect("matrix");
                let xv = val(*x);
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let s = sums[r];
                    let gr = &g[r * n..(r + 1) * n];
                    if s >= T::one() {
                        let xr = &xv[r * n..(r + 1) * n];
                        let dot: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] = gr[c] / s - dot / (s * s);
                        }
                    } else {
                        ga[r * n..(r + 1) * n].copy_from_slice(gr);
                    }
                }
                acc(*x, &|i| ga[i]);
            }
            Op::BceWithLogits { x, target } => {
                let xv = val(*x);
                let scale = g[0] / lit(xv.len() as f64);
                acc(*x, &|i| (sigmoid(xv[i]) - target[i]) * scale);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_column_selection() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let col = g.constant(t(&[2, 1], &[0., 1.]));
        let q = g.matmul(a, col).unwrap();
        assert_eq!(g.value(q).dims(), &[2, 1]);
        assert_eq!(g.value(q).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_operands() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("right operand"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0., 2f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1e300, -1e300, 1e300]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([4, 4, 2]));
        let w = g.constant(Tensor::zeros([2, 2, 2, 3]));
        let b = g.constant(Tensor::zeros([3]));
        assert!(matches!(g.conv2d(x, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn conv_identity_1x1_and_zero_kernel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..18).map(|v| v as f64 - 4.0).collect();
        let x = g.constant(t(&[3, 3, 2], &data));
        let w = g.constant(Tensor::eye(2).reshaped([1, 1, 2, 2]).unwrap());
        let b = g.constant(Tensor::zeros([2]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let w0 = g.constant(Tensor::zeros([3, 3, 2, 4]));
        let b0 = g.constant(Tensor::zeros([4]));
        let y0 = g.conv2d(x, w0, b0).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn shared_param_binds_once() {
        let mut g = Graph::<f64>::new();
        let w = Tensor::full([2], 3.0);
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn straight_through_ties_pick_lowest_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[1., 0., 1., 5., 0., 5.]));
        let y = g.straight_through_onehot(x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn guarded_row_norm_leaves_empty_rows_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0., 0., 0., 1., 1., 0.]));
        let y = g.row_normalize_guarded(x).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 0., 0.5, 0.5, 0.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2]));
        assert!(g.backward(x).is_err());
    }
}
