//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward operation on a [`Var`] appends one entry to its [`Tape`].
//! [`Tape::backward`] walks the entries in exact reverse order of recording and
//! accumulates adjoints. Only the operations the graph model needs exist here.
//!
//! ```
//! use stgraph::{numgrad::Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.param("w", Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap()).unwrap();
//! let x = tape.constant(Tensor::from_f64(&[2, 1], &[1., -1.]).unwrap());
//! let loss = w.matmul(x).unwrap().sum().unwrap();
//! let grads = tape.grad(loss).unwrap();
//! assert_eq!(grads["w"].data(), &[1., -1., 1., -1.]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

type NodeId = usize;

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowVector(NodeId, NodeId),
    OuterAdd(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    GatherRows(NodeId, Vec<usize>),
    ScatterRows {
        base: NodeId,
        rows: NodeId,
        index: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherCols(NodeId, Vec<usize>),
    ScaleRows(NodeId, NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    SigmoidXent {
        logits: NodeId,
        targets: Tensor<T>,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Tensor<T>,
    },
}

struct Entry<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    param: Option<String>,
}

/// Ordered record of primitive operations. Confined to one thread.
pub struct Tape<T> {
    entries: RefCell<Vec<Entry<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            entries: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, param: Option<String>) -> Var<'_, T> {
        let mut entries = self.entries.borrow_mut();
        let id = entries.len();
        entries.push(Entry {
            value: Rc::new(value),
            op,
            param,
        });
        Var { tape: self, id }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var<'_, T>> {
        let value = value.check_finite(name)?;
        Ok(self.push(value, op, None))
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, None)
    }

    /// Registers a named trainable leaf. Names are unique per tape.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Result<Var<'_, T>> {
        if self
            .entries
            .borrow()
            .iter()
            .any(|e| e.param.as_deref() == Some(name))
        {
            return Err(Error::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        Ok(self.push(value, Op::Leaf, Some(name.to_string())))
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.entries.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let entries = self.entries.borrow();
        if !entries[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                entries[loss.id].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..entries.len()).map(|_| None).collect();
        adj[loss.id] = Some(Tensor::filled(entries[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            backprop(&entries, id, &g, &mut adj)?;
            adj[id] = Some(g);
        }

        Ok(Gradients {
            grads: adj,
            shapes: entries.iter().map(|e| e.value.shape().to_vec()).collect(),
            params: entries
                .iter()
                .enumerate()
                .filter_map(|(i, e)| e.param.clone().map(|p| (p, i)))
                .collect(),
        })
    }

    /// Gradient of `loss` for every registered parameter; untouched parameters
    /// get exact zeros.
    pub fn grad(&self, loss: Var<'_, T>) -> Result<BTreeMap<String, Tensor<T>>> {
        Ok(self.backward(loss)?.into_param_map())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            let g = self.grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]));
            out.insert(name, g);
        }
        out
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    entries: &[Entry<T>],
    id: NodeId,
    g: &Tensor<T>,
    adj: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: NodeId| -> &Tensor<T> { &entries[i].value };
    let out = &entries[id].value;
    match &entries[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            // C = A B: dA = G B^T, dB = A^T G
            accumulate(adj, *a, g.matmul_nt(val(*b))?);
            accumulate(adj, *b, val(*a).matmul_tn(g)?);
        }
        Op::MatMulNt(a, b) => {
            // C = A B^T: dA = G B, dB = G^T A
            accumulate(adj, *a, g.matmul(val(*b))?);
            accumulate(adj, *b, g.matmul_tn(val(*a))?);
        }
        Op::Add(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.clone());
        }
        Op::AddRowVector(a, b) => {
            accumulate(adj, *a, g.clone());
            let cols = g.cols();
            let mut db = vec![T::zero(); cols];
            for r in 0..g.rows() {
                for (d, &x) in db.iter_mut().zip(g.row(r)) {
                    *d = *d + x;
                }
            }
            accumulate(adj, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
        }
        Op::OuterAdd(a, b) => {
            let (n, k) = (g.rows(), g.cols());
            let mut da = vec![T::zero(); n];
            let mut db = vec![T::zero(); k];
            for i in 0..n {
                for (j, &x) in g.row(i).iter().enumerate() {
                    da[i] = da[i] + x;
                    db[j] = db[j] + x;
                }
            }
            accumulate(adj, *a, Tensor::from_parts(val(*a).shape().to_vec(), da));
            accumulate(adj, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
        }
        Op::Scale(a, c) => accumulate(adj, *a, g.scale(*c)),
        Op::Relu(a) => {
            let x = val(*a);
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                .collect();
            accumulate(adj, *a, Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::SoftmaxRows(a) => {
            let (n, m) = (out.rows(), out.cols());
            let mut dx = vec![T::zero(); n * m];
            for i in 0..n {
                let y = out.row(i);
                let gy = g.row(i);
                let inner: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for j in 0..m {
                    dx[i * m + j] = y[j] * (gy[j] - inner);
                }
            }
            accumulate(adj, *a, Tensor::from_parts(out.shape().to_vec(), dx));
        }
        Op::LayerNorm {
            x,
            scale,
            shift,
            normalized,
            inv_std,
        } => {
            let (n, d) = (normalized.rows(), normalized.cols());
            let gamma = val(*scale).data();
            let mut dx = vec![T::zero(); n * d];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let dn = T::lit(d as f64);
            for i in 0..n {
                let xh = normalized.row(i);
                let gy = g.row(i);
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for j in 0..d {
                    dgamma[j] = dgamma[j] + gy[j] * xh[j];
                    dbeta[j] = dbeta[j] + gy[j];
                    let dxh = gy[j] * gamma[j];
                    sum_dxh = sum_dxh + dxh;
                    sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                }
                for j in 0..d {
                    let dxh = gy[j] * gamma[j];
                    dx[i * d + j] = inv_std[i] / dn * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                }
            }
            accumulate(adj, *x, Tensor::from_parts(normalized.shape().to_vec(), dx));
            accumulate(
                adj,
                *scale,
                Tensor::from_parts(val(*scale).shape().to_vec(), dgamma),
            );
            accumulate(
                adj,
                *shift,
                Tensor::from_parts(val(*shift).shape().to_vec(), dbeta),
            );
        }
        Op::GatherRows(a, index) => {
            let src = val(*a);
            let m = src.cols();
            let mut dx = Tensor::zeros(src.shape());
            for (r, &i) in index.iter().enumerate() {
                let dst = &mut dx.data_mut()[i * m..(i + 1) * m];
                for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                    *d = *d + x;
                }
            }
            accumulate(adj, *a, dx);
        }
        Op::ScatterRows { base, rows, index } => {
            let m = g.cols();
            let mut dbase = g.clone();
            let mut drows = Vec::with_capacity(index.len() * m);
            for &i in index {
                drows.extend_from_slice(g.row(i));
                dbase.data_mut()[i * m..(i + 1) * m].fill(T::zero());
            }
            accumulate(adj, *base, dbase);
            accumulate(adj, *rows, Tensor::from_parts(vec![index.len(), m], drows));
        }
        Op::ConcatRows(parts) => {
            let m = g.cols();
            let mut offset = 0;
            for &p in parts {
                let n = val(p).rows();
                let slice = g.data()[offset * m..(offset + n) * m].to_vec();
                accumulate(adj, p, Tensor::from_parts(val(p).shape().to_vec(), slice));
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let n = g.rows();
            let mut offset = 0;
            for &p in parts {
                let k = val(p).cols();
                let mut slice = Vec::with_capacity(n * k);
                for i in 0..n {
                    slice.extend_from_slice(&g.row(i)[offset..offset + k]);
                }
                accumulate(adj, p, Tensor::from_parts(val(p).shape().to_vec(), slice));
                offset += k;
            }
        }
        Op::GatherCols(a, index) => {
            let src = val(*a);
            let m = src.cols();
            let mut dx = Tensor::zeros(src.shape());
            for i in 0..g.rows() {
                for (c, &j) in index.iter().enumerate() {
                    let slot = &mut dx.data_mut()[i * m + j];
                    *slot = *slot + g.at(i, c);
                }
            }
            accumulate(adj, *a, dx);
        }
        Op::ScaleRows(a, w) => {
            let x = val(*a);
            let wv = val(*w).data();
            let m = x.cols();
            let mut dx = Vec::with_capacity(x.numel());
            let mut dw = vec![T::zero(); wv.len()];
            for i in 0..x.rows() {
                for j in 0..m {
                    dx.push(g.at(i, j) * wv[i]);
                    dw[i] = dw[i] + g.at(i, j) * x.at(i, j);
                }
            }
            accumulate(adj, *a, Tensor::from_parts(x.shape().to_vec(), dx));
            accumulate(adj, *w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
        }
        Op::Reshape(a) => {
            accumulate(adj, *a, g.reshape(val(*a).shape())?);
        }
        Op::Sum(a) => {
            accumulate(adj, *a, Tensor::filled(val(*a).shape(), g.value()));
        }
        Op::SigmoidXent { logits, targets } => {
            let x = val(*logits);
            let count = T::lit(x.numel().max(1) as f64);
            let gv = g.value();
            let data = x
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&xi, &zi)| gv * (sigmoid(xi) - zi) / count)
                .collect();
            accumulate(adj, *logits, Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::SoftmaxXent { logits, targets } => {
            let x = val(*logits);
            let (n, c) = (x.rows(), x.cols());
            let count = T::lit(n.max(1) as f64);
            let gv = g.value();
            let mut dx = Vec::with_capacity(n * c);
            for i in 0..n {
                let p = softmax(x.row(i));
                let mass: T = targets.row(i).iter().copied().sum();
                for j in 0..c {
                    dx.push(gv * (p[j] * mass - targets.at(i, j)) / count);
                }
            }
            accumulate(adj, *logits, Tensor::from_parts(x.shape().to_vec(), dx));
        }
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(x,0) - x z + ln(1 + e^{-|x|})`.
pub fn sigmoid_xent<T: Scalar>(x: T, z: T) -> T {
    x.max(T::zero()) - x * z + (-x.abs()).exp().ln_1p()
}

/// Max-subtracted softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self> {
        self.same_tape(&rhs)?;
        let v = self.value().matmul(&rhs.value())?;
        self.tape.record(v, Op::MatMul(self.id, rhs.id), "matmul")
    }

    /// `self @ rhs^T`.
    pub fn matmul_nt(self, rhs: Var<'t, T>) -> Result<Self> {
        self.same_tape(&rhs)?;
        let v = self.value().matmul_nt(&rhs.value())?;
        self.tape
            .record(v, Op::MatMulNt(self.id, rhs.id), "matmul_nt")
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Self> {
        self.same_tape(&rhs)?;
        let v = self.value().add(&rhs.value())?;
        self.tape.record(v, Op::Add(self.id, rhs.id), "add")
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_row_vector(self, bias: Var<'t, T>) -> Result<Self> {
        self.same_tape(&bias)?;
        let x = self.value();
        let b = bias.value();
        let (n, m) = x.require_matrix("add_row_vector")?;
        if b.numel() != m {
            return Err(Error::shape("add_row_vector", x.shape(), b.shape()));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(x.row(i).iter().zip(b.data()).map(|(&a, &c)| a + c));
        }
        self.tape.record(
            Tensor::from_parts(vec![n, m], data),
            Op::AddRowVector(self.id, bias.id),
            "add_row_vector",
        )
    }

    /// `out[i][j] = self[i] + rhs[j]` for column vectors `self` (n) and `rhs` (k).
    pub fn outer_add(self, rhs: Var<'t, T>) -> Result<Self> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        if a.cols() != 1 || b.cols() != 1 {
            return Err(Error::shape("outer_add", a.shape(), b.shape()));
        }
        let mut data = Vec::with_capacity(a.numel() * b.numel());
        for &x in a.data() {
            data.extend(b.data().iter().map(|&y| x + y));
        }
        self.tape.record(
            Tensor::from_parts(vec![a.numel(), b.numel()], data),
            Op::OuterAdd(self.id, rhs.id),
            "outer_add",
        )
    }

    pub fn scale(self, c: T) -> Result<Self> {
        let v = self.value().scale(c);
        self.tape.record(v, Op::Scale(self.id, c), "scale")
    }

    /// Elementwise `max(0, x)`; the backward mask is 0 at exactly 0.
    pub fn relu(self) -> Result<Self> {
        let v = self
            .value()
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.record(v, Op::Relu(self.id), "relu")
    }

    pub fn softmax_rows(self) -> Result<Self> {
        let x = self.value();
        let (n, m) = x.require_matrix("softmax_rows")?;
        if n == 0 || m == 0 {
            return Err(Error::Contract("softmax_rows needs n, m >= 1".into()));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(softmax(x.row(i)));
        }
        self.tape.record(
            Tensor::from_parts(vec![n, m], data),
            Op::SoftmaxRows(self.id),
            "softmax_rows",
        )
    }

    /// Row-wise `scale * (x - mean) / sqrt(var + eps) + shift` with population
    /// variance.
    pub fn layer_norm_rows(self, scale: Var<'t, T>, shift: Var<'t, T>, eps: T) -> Result<Self> {
        self.same_tape(&scale)?;
        self.same_tape(&shift)?;
        let x = self.value();
        let (n, d) = x.require_matrix("layer_norm")?;
        let gamma = scale.value();
        let beta = shift.value();
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        if d == 0 {
            return Err(Error::Contract("layer_norm needs d >= 1".into()));
        }
        let dn = T::lit(d as f64);
        let mut normalized = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                normalized.push(xh);
                out.push(gamma.data()[j] * xh + beta.data()[j]);
            }
        }
        let normalized = Tensor::from_parts(vec![n, d], normalized).check_finite("layer_norm")?;
        self.tape.record(
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn gather_rows(self, index: &[usize]) -> Result<Self> {
        let x = self.value();
        let (n, m) = x.require_matrix("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", x.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(index.len() * m);
        for &i in index {
            data.extend_from_slice(x.row(i));
        }
        self.tape.record(
            Tensor::from_parts(vec![index.len(), m], data),
            Op::GatherRows(self.id, index.to_vec()),
            "gather_rows",
        )
    }

    /// Copy of `self` with rows `index[r]` replaced by `rows[r]`. Untouched rows
    /// are copied bit for bit.
    pub fn scatter_rows(self, index: &[usize], rows: Var<'t, T>) -> Result<Self> {
        self.same_tape(&rows)?;
        let base = self.value();
        let src = rows.value();
        let (n, m) = base.require_matrix("scatter_rows")?;
        if src.rows() != index.len() || src.cols() != m || index.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_rows", base.shape(), src.shape()));
        }
        let mut data = base.data().to_vec();
        for (r, &i) in index.iter().enumerate() {
            data[i * m..(i + 1) * m].copy_from_slice(src.row(r));
        }
        self.tape.record(
            Tensor::from_parts(vec![n, m], data),
            Op::ScatterRows {
                base: self.id,
                rows: rows.id,
                index: index.to_vec(),
            },
            "scatter_rows",
        )
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let m = first.value().require_matrix("concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            if v.require_matrix("concat_rows")?.1 != m {
                return Err(Error::shape("concat_rows", &first.shape(), v.shape()));
            }
            n += v.rows();
            data.extend_from_slice(v.data());
        }
        first.tape.record(
            Tensor::from_parts(vec![n, m], data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            "concat_rows",
        )
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let n = first.value().require_matrix("concat_cols")?.0;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if v.require_matrix("concat_cols")?.0 != n {
                return Err(Error::shape("concat_cols", &first.shape(), v.shape()));
            }
        }
        let m: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        first.tape.record(
            Tensor::from_parts(vec![n, m], data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            "concat_cols",
        )
    }

    pub fn gather_cols(self, index: &[usize]) -> Result<Self> {
        let x = self.value();
        let (n, m) = x.require_matrix("gather_cols")?;
        if let Some(&bad) = index.iter().find(|&&j| j >= m) {
            return Err(Error::shape("gather_cols", x.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(n * index.len());
        for i in 0..n {
            data.extend(index.iter().map(|&j| x.at(i, j)));
        }
        self.tape.record(
            Tensor::from_parts(vec![n, index.len()], data),
            Op::GatherCols(self.id, index.to_vec()),
            "gather_cols",
        )
    }

    /// Multiplies row `i` of an `n x m` matrix by `weights[i]`.
    pub fn scale_rows(self, weights: Var<'t, T>) -> Result<Self> {
        self.same_tape(&weights)?;
        let x = self.value();
        let w = weights.value();
        let (n, m) = x.require_matrix("scale_rows")?;
        if w.numel() != n {
            return Err(Error::shape("scale_rows", x.shape(), w.shape()));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(x.row(i).iter().map(|&v| v * w.data()[i]));
        }
        self.tape.record(
            Tensor::from_parts(vec![n, m], data),
            Op::ScaleRows(self.id, weights.id),
            "scale_rows",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        self.tape.record(v, Op::Reshape(self.id), "reshape")
    }

    pub fn sum(self) -> Result<Self> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record(v, Op::Sum(self.id), "sum")
    }

    /// Mean of the elementwise stable sigmoid cross-entropy; an empty input
    /// yields 0.
    pub fn sigmoid_xent_mean(self, targets: &Tensor<T>) -> Result<Self> {
        let x = self.value();
        if x.shape() != targets.shape() {
            return Err(Error::shape("sigmoid_xent", x.shape(), targets.shape()));
        }
        let total: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&xi, &zi)| sigmoid_xent(xi, zi))
            .sum();
        let loss = if x.numel() == 0 {
            T::zero()
        } else {
            total / T::lit(x.numel() as f64)
        };
        self.tape.record(
            Tensor::scalar(loss),
            Op::SigmoidXent {
                logits: self.id,
                targets: targets.clone(),
            },
            "sigmoid_xent",
        )
    }

    /// Row-averaged softmax cross-entropy `-(1/N) sum_i sum_j y_ij log softmax(x_i)_j`.
    pub fn softmax_xent_mean(self, targets: &Tensor<T>) -> Result<Self> {
        let x = self.value();
        let (n, _) = x.require_matrix("softmax_xent")?;
        if x.shape() != targets.shape() {
            return Err(Error::shape("softmax_xent", x.shape(), targets.shape()));
        }
        let mut total = T::zero();
        for i in 0..n {
            let lse = log_sum_exp(x.row(i));
            for (&xi, &yi) in x.row(i).iter().zip(targets.row(i)) {
                total = total + yi * (lse - xi);
            }
        }
        let loss = if n == 0 {
            T::zero()
        } else {
            total / T::lit(n as f64)
        };
        self.tape.record(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.clone(),
            },
            "softmax_xent",
        )
    }
}

/// Softmax of each row of a matrix, off the tape.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = tape.constant(m.clone()).softmax_rows()?;
    let v = out.value();
    Ok((*v).clone())
}

/// Layer norm of one vector, off the tape.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let d = x.numel();
    let row = tape.constant(x.reshape(&[1, d])?);
    let out = row.layer_norm_rows(
        tape.constant(scale.clone()),
        tape.constant(shift.clone()),
        eps,
    )?;
    let v = out.value();
    v.reshape(x.shape())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Relative error with an absolute floor, used by finite-difference checks.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
