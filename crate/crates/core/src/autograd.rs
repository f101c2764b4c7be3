//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every example: each operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape in
//! reverse. Trainable tensors live in a [`ParamStore`] which the graph only
//! borrows, so several graphs can read the same parameters concurrently.

use crate::error::{Error, Result};
use crate::tensor::{self, Padding, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named set of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss does not reach.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|&v| v * v).sum::<F>())
            .sum::<F>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddColumn(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        dilation: usize,
        padding: Padding,
    },
    ConcatRows(Vec<Var>),
    ConcatColumns(Vec<Var>),
    SliceRows(Var, usize),
    Column(Var, usize),
    ReverseColumns(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Sum(Var),
    AddN(Vec<Var>),
    ContextMatrix {
        alpha: Var,
        code: Var,
        selected: Vec<usize>,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
}

/// Dynamic computation graph over a borrowed [`ParamStore`].
pub struct Graph<'p, F: Scalar = f32> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<Var>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Node reading a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `a[r, c] + col[r]` for every column `c`.
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if ta.shape().len() != 2 || tc.len() != ta.rows() {
            return Err(shape_err("add_column", ta.shape(), tc.shape()));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let b = tc.data()[r];
            for v in row {
                *v = *v + b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::AddColumn(a, col), out))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| F::one() / (F::one() + (-v).exp()));
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(F::zero()));
        self.push(Op::Relu(a), out)
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, dilation: usize, padding: Padding) -> Result<Var> {
        let out = tensor::conv1d(self.value(input), self.value(kernel), dilation, padding)?;
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                dilation,
                padding,
            },
            out,
        ))
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    /// Places 2-D tensors with equal row counts side by side.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_columns" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(shape_err("concat_columns", self.value(*first).shape(), t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatColumns(parts.to_vec()), out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start >= end || end > t.rows() {
            return Err(shape_err("slice_rows", t.shape(), &[start, end]));
        }
        let cols = t.cols();
        let out = Tensor::new(vec![end - start, cols], t.data()[start * cols..end * cols].to_vec())?;
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    /// Column `j` of a 2-D tensor as an `[rows, 1]` vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || j >= t.cols() {
            return Err(shape_err("column", t.shape(), &[j]));
        }
        let out = Tensor::column(t.column_values(j))?;
        Ok(self.push(Op::Column(a, j), out))
    }

    pub fn reverse_columns(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(shape_err("reverse_columns", t.shape(), &[]));
        }
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            row.reverse();
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::ReverseColumns(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Softmax over all elements of `a`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax(self.value(a))?;
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Log-softmax over all elements of `a`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::log_softmax(self.value(a))?;
        Ok(self.push(Op::LogSoftmax(a), out))
    }

    /// Scalar node holding element `index` of `a` (flat indexing).
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::IndexOutOfRange { index, size: t.len() });
        }
        let out = Tensor::scalar(t.data()[index]);
        Ok(self.push(Op::Pick(a, index), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "add_n" })?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != acc.shape() {
                return Err(shape_err("add_n", acc.shape(), t.shape()));
            }
            acc.add_assign(t);
        }
        Ok(self.push(Op::AddN(parts.to_vec()), acc))
    }

    /// Pad-masked mean negative log-likelihood over per-step log-probability vectors.
    pub fn nll_loss(&mut self, log_probs: &[Var], targets: &[usize], pad: usize) -> Result<Var> {
        if log_probs.len() != targets.len() {
            return Err(shape_err("nll_loss", &[log_probs.len()], &[targets.len()]));
        }
        let mut picks = Vec::new();
        for (&lp, &y) in log_probs.iter().zip(targets) {
            if y == pad {
                continue;
            }
            let size = self.value(lp).len();
            if y >= size {
                return Err(Error::IndexOutOfRange { index: y, size });
            }
            picks.push(self.pick(lp, y)?);
        }
        if picks.is_empty() {
            return Err(Error::NoContributingPositions);
        }
        let n = picks.len();
        let total = self.add_n(&picks)?;
        Ok(self.scale(total, -F::one() / F::from_usize(n).unwrap()))
    }

    /// Context matrix over code `[features, positions]` and attention `alpha`
    /// (one weight per position), flattened column after column into
    /// `[features * d, 1]`.
    pub fn context_matrix(&mut self, alpha: Var, code: Var, d: usize) -> Result<Var> {
        let (ta, tz) = (self.value(alpha), self.value(code));
        if tz.shape().len() != 2 || ta.len() != tz.cols() {
            return Err(shape_err("context_matrix", ta.shape(), tz.shape()));
        }
        let selected = crate::attention::top_d_indices(ta.data(), d)?;
        let feat = tz.rows();
        let mut data = vec![F::zero(); feat * d];
        for (slot, &j) in selected.iter().enumerate() {
            let a = ta.data()[j];
            for f in 0..feat {
                data[slot * feat + f] = a * tz.get2(f, j);
            }
        }
        let out = Tensor::new(vec![feat * d, 1], data)?;
        Ok(self.push(Op::ContextMatrix { alpha, code, selected }, out))
    }

    /// Positions chosen by a context-matrix node, in decreasing attention order.
    pub fn selected_positions(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::ContextMatrix { selected, .. } => Some(selected),
            _ => None,
        }
    }

    /// Clears the backward marker so `backward` may run again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        self.backward_done = true;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: Vec<F>, grads: &mut [Option<Vec<F>>], out: &mut Gradients<F>) -> Result<()> {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.value(v).len();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.params.get(*id).shape().to_vec();
                out.grads[id.0] = Some(Tensor::new(shape, g)?);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                with_two(grads, *a, ta.len(), *b, tb.len(), |da, db| {
                    tensor::matmul_backward(ta, tb, &g, Some(da), Some(db))
                });
            }
            Op::Add(a, b) => {
                axpy_into(grads, *a, len_of(*a), F::one(), &g);
                axpy_into(grads, *b, len_of(*b), F::one(), &g);
            }
            Op::AddColumn(a, col) => {
                axpy_into(grads, *a, len_of(*a), F::one(), &g);
                let cols = self.value(*a).cols();
                let dc = acc(grads, *col, len_of(*col));
                for (r, row) in g.chunks(cols).enumerate() {
                    dc[r] = dc[r] + row.iter().copied().sum::<F>();
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<F> = g.iter().zip(tb).map(|(&x, &y)| x * y).collect();
                let db: Vec<F> = g.iter().zip(ta).map(|(&x, &y)| x * y).collect();
                axpy_into(grads, *a, ta.len(), F::one(), &da);
                axpy_into(grads, *b, tb.len(), F::one(), &db);
            }
            Op::Scale(a, s) => axpy_into(grads, *a, len_of(*a), *s, &g),
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().unwrap().data();
                let d: Vec<F> = g.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect();
                axpy_into(grads, *a, y.len(), F::one(), &d);
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().unwrap().data();
                let d: Vec<F> = g.iter().zip(y).map(|(&g, &y)| g * (F::one() - y * y)).collect();
                axpy_into(grads, *a, y.len(), F::one(), &d);
            }
            Op::Relu(a) => {
                let y = node.value.as_ref().unwrap().data();
                let da = acc(grads, *a, y.len());
                for ((d, &g), &y) in da.iter_mut().zip(&g).zip(y) {
                    if y > F::zero() {
                        *d = *d + g;
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                dilation,
                padding,
            } => {
                let (tx, tw) = (self.value(*input), self.value(*kernel));
                with_two(grads, *input, tx.len(), *kernel, tw.len(), |dx, dw| {
                    tensor::conv1d_backward(tx, tw, *dilation, *padding, &g, Some(dx), Some(dw))
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len_of(p);
                    axpy_into(grads, p, n, F::one(), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatColumns(parts) => {
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let dp = acc(grads, p, len_of(p));
                    for (r, drow) in dp.chunks_mut(c).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + c];
                        for (d, &gv) in drow.iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = self.value(*a).cols();
                let da = acc(grads, *a, len_of(*a));
                let lo = start * cols;
                for (d, &g) in da[lo..lo + g.len()].iter_mut().zip(&g) {
                    *d = *d + g;
                }
            }
            Op::Column(a, j) => {
                let cols = self.value(*a).cols();
                let da = acc(grads, *a, len_of(*a));
                for (r, &gv) in g.iter().enumerate() {
                    da[r * cols + j] = da[r * cols + j] + gv;
                }
            }
            Op::ReverseColumns(a) => {
                let cols = self.value(*a).cols();
                let da = acc(grads, *a, len_of(*a));
                for (drow, grow) in da.chunks_mut(cols).zip(g.chunks(cols)) {
                    for (d, &gv) in drow.iter_mut().zip(grow.iter().rev()) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Reshape(a) => axpy_into(grads, *a, g.len(), F::one(), &g),
            Op::Softmax(a) => {
                let y = node.value.as_ref().unwrap().data();
                let inner: F = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                let d: Vec<F> = g.iter().zip(y).map(|(&g, &y)| y * (g - inner)).collect();
                axpy_into(grads, *a, y.len(), F::one(), &d);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.as_ref().unwrap().data();
                let total: F = g.iter().copied().sum();
                let d: Vec<F> = g.iter().zip(y).map(|(&g, &y)| g - y.exp() * total).collect();
                axpy_into(grads, *a, y.len(), F::one(), &d);
            }
            Op::Pick(a, index) => {
                let da = acc(grads, *a, len_of(*a));
                da[*index] = da[*index] + g[0];
            }
            Op::Sum(a) => {
                let da = acc(grads, *a, len_of(*a));
                for d in da {
                    *d = *d + g[0];
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    axpy_into(grads, p, g.len(), F::one(), &g);
                }
            }
            Op::ContextMatrix { alpha, code, selected } => {
                let (ta, tz) = (self.value(*alpha), self.value(*code));
                let (feat, positions) = (tz.rows(), tz.cols());
                let mut dalpha = vec![F::zero(); ta.len()];
                let dz = acc(grads, *code, tz.len());
                for (slot, &j) in selected.iter().enumerate() {
                    let gs = &g[slot * feat..(slot + 1) * feat];
                    let a = ta.data()[j];
                    let mut s = F::zero();
                    for (f, &gv) in gs.iter().enumerate() {
                        s = s + gv * tz.data()[f * positions + j];
                        let k = f * positions + j;
                        dz[k] = dz[k] + a * gv;
                    }
                    dalpha[j] = s;
                }
                axpy_into(grads, *alpha, ta.len(), F::one(), &dalpha);
            }
        }
        Ok(())
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn axpy_into<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize, alpha: F, x: &[F]) {
    tensor::axpy(acc(grads, v, len), alpha, x);
}

/// Runs `f` with gradient buffers for two (possibly identical) nodes.
fn with_two<F: Scalar>(
    grads: &mut [Option<Vec<F>>],
    a: Var,
    la: usize,
    b: Var,
    lb: usize,
    f: impl FnOnce(&mut [F], &mut [F]),
) {
    let mut ga = grads[a.0].take().unwrap_or_else(|| vec![F::zero(); la]);
    if a == b {
        let mut tmp = vec![F::zero(); lb];
        f(&mut ga, &mut tmp);
        tensor::axpy(&mut ga, F::one(), &tmp);
    } else {
        let gb = acc(grads, b, lb);
        f(&mut ga, gb);
    }
    grads[a.0] = Some(ga);
}
