//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record once in reverse and
//! returns the gradient of every leaf created with [`Tape::leaf`]. The tape is
//! consumed by that call; a second call is an error.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::svd::svd;
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Rows with norm at or below this cannot be normalized.
pub const EPS_NORM: f64 = 1e-12;
/// Singular directions at or below this are left out of the nuclear-norm
/// subgradient.
pub const EPS_RANK: f64 = 1e-10;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    NormalizeRows(NodeId, Vec<f64>),
    NuclearNorm(NodeId, Tensor),
    Sum(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    Reshape(NodeId),
    SoftmaxXent(NodeId, Vec<usize>, Tensor),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Deliberate backward faults, used to prove the gradient checker can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    NegateNuclearNormBackward,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<Fault>,
}

#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// A tensor recorded on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        let tape = Self::default();
        tape.inner.borrow_mut().fault = Some(fault);
        tape
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::clone(&value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn fault(&self) -> Option<Fault> {
        self.inner.borrow().fault
    }

    /// Back-propagates from the scalar `loss` and consumes the tape.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeState("tape already consumed by a backward pass".into()));
        }
        inner.consumed = true;
        let nodes = std::mem::take(&mut inner.nodes);
        drop(inner);

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::full(loss.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in local_backward(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contrib.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn needs(nodes: &[Node], id: NodeId) -> bool {
    nodes[id].requires_grad
}

fn local_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let n = val(*b).cols();
            let mut res = Vec::with_capacity(2);
            if needs(nodes, *a) {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                matmul_bt_into(g.data(), val(*b).data(), &mut da, m, n, k);
                res.push((*a, Tensor::matrix(m, k, da)?));
            }
            if needs(nodes, *b) {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                matmul_at_into(val(*a).data(), g.data(), &mut db, m, k, n);
                res.push((*b, Tensor::matrix(k, n, db)?));
            }
            res
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |x, y| x * y)?),
            (*b, g.zip_map(val(*a), |x, y| x * y)?),
        ],
        Op::AddRow(a, bias) => {
            let n = val(*bias).len();
            let mut db = vec![0.0; n];
            for row in g.data().chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
            }
            vec![
                (*a, g.clone()),
                (*bias, Tensor::new(val(*bias).shape().to_vec(), db)?),
            ]
        }
        Op::AddScalar(a, s) => vec![
            (*a, g.clone()),
            (*s, Tensor::new(val(*s).shape().to_vec(), vec![g.sum()])?),
        ],
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?)],
        Op::NormalizeRows(a, norms) => {
            // dx = (dy − y (y·dy)) / ‖x‖
            let y = &node.value;
            let cols = y.cols();
            let mut dx = vec![0.0; y.len()];
            for (i, &norm) in norms.iter().enumerate() {
                let yr = y.row(i);
                let gr = &g.data()[i * cols..(i + 1) * cols];
                let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    dx[i * cols + j] = (gr[j] - yr[j] * proj) / norm;
                }
            }
            vec![(*a, Tensor::new(val(*a).shape().to_vec(), dx)?)]
        }
        Op::NuclearNorm(a, polar) => {
            let s = g.item();
            vec![(*a, polar.map(|x| x * s))]
        }
        Op::Sum(a) => {
            let s = g.item();
            vec![(*a, Tensor::full(val(*a).shape(), s))]
        }
        Op::ConcatRows(parts) => {
            let cols = node.value.cols();
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let n = val(p).len();
                debug_assert_eq!(n % cols.max(1), 0);
                res.push((
                    p,
                    Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?,
                ));
                offset += n;
            }
            res
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = node.value.dims2()?;
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let c = val(p).cols();
                let mut d = Vec::with_capacity(rows * c);
                for i in 0..rows {
                    d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                }
                res.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                offset += c;
            }
            res
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let cols = src.cols();
            let mut d = vec![0.0; src.len()];
            d[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            vec![(*a, Tensor::new(src.shape().to_vec(), d)?)]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
        Op::SoftmaxXent(a, labels, probs) => {
            let s = g.item() / labels.len() as f64;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                let v = d.at(i, l) - 1.0;
                d.set(i, l, v);
            }
            d.data_mut().iter_mut().for_each(|x| *x *= s);
            vec![(*a, d)]
        }
    };
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    /// A copy of the value with no tape attachment.
    pub fn detach(&self) -> Tensor {
        (*self.value).clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands live on different tapes")))
        }
    }

    fn derive(&self, value: Tensor, op: Op, inputs: &[&Var<'t>]) -> Var<'t> {
        let inner = self.tape.inner.borrow();
        let rg = inputs.iter().any(|v| inner.nodes[v.id].requires_grad);
        drop(inner);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let (m, k) = self.value.dims2()?;
        let (k2, n) = other.value.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value.data(), other.value.data(), &mut out, m, k, n);
        Ok(self.derive(Tensor::matrix(m, n, out)?, Op::MatMul(self.id, other.id), &[self, other]))
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other, name)?;
        if self.shape() != other.shape() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let v = self.value.zip_map(&other.value, f)?;
        Ok(self.derive(v, op, &[self, other]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias, "add_row")?;
        let (m, n) = self.value.dims2()?;
        if bias.value.len() != n {
            return Err(Error::dim("add_row", format!("bias of {} for {m}x{n}", bias.value.len())));
        }
        let mut out = self.detach();
        for i in 0..m {
            out.row_mut(i)
                .iter_mut()
                .zip(bias.value.data())
                .for_each(|(x, b)| *x += b);
        }
        Ok(self.derive(out, Op::AddRow(self.id, bias.id), &[self, bias]))
    }

    /// Adds a one-element `scalar` to every entry.
    pub fn add_scalar(&self, scalar: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(scalar, "add_scalar")?;
        if scalar.value.len() != 1 {
            return Err(Error::dim("add_scalar", format!("operand shape {:?}", scalar.shape())));
        }
        let s = scalar.item();
        Ok(self.derive(self.value.map(|x| x + s), Op::AddScalar(self.id, scalar.id), &[self, scalar]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.derive(self.value.map(|x| x * c), Op::Scale(self.id, c), &[self])
    }

    pub fn relu(&self) -> Var<'t> {
        self.derive(self.value.map(|x| x.max(0.0)), Op::Relu(self.id), &[self])
    }

    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (m, _) = self.value.dims2()?;
        let norms = self.value.row_norms();
        if let Some(i) = norms.iter().position(|&n| !(n > EPS_NORM)) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {} ≤ {EPS_NORM:e}",
                norms[i]
            )));
        }
        let mut out = self.detach();
        for (i, &n) in norms.iter().enumerate().take(m) {
            out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        Ok(self.derive(out, Op::NormalizeRows(self.id, norms), &[self]))
    }

    /// Sum of singular values; backward is `U_r V_rᵀ`.
    pub fn nuclear_norm(&self) -> Result<Var<'t>> {
        let dec = svd(&self.value)?;
        let total: f64 = dec.s.iter().sum();
        let mut polar = dec.polar_factor(EPS_RANK);
        if self.tape.fault() == Some(Fault::NegateNuclearNormBackward) {
            polar = polar.map(|x| -x);
        }
        Ok(self.derive(Tensor::scalar(total), Op::NuclearNorm(self.id, polar), &[self]))
    }

    pub fn sum(&self) -> Var<'t> {
        self.derive(Tensor::scalar(self.value.sum()), Op::Sum(self.id), &[self])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value.slice_rows(start, len)?;
        Ok(self.derive(v, Op::SliceRows(self.id, start), &[self]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.detach().reshape(shape)?;
        Ok(self.derive(v, Op::Reshape(self.id), &[self]))
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = first.value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_tape(p, "concat_rows")?;
            if p.value.cols() != cols || p.value.rank() > 2 {
                return Err(Error::dim("concat_rows", format!("{:?} vs {cols} columns", p.shape())));
            }
            rows += if p.value.rank() == 2 { p.value.rows() } else { 1 };
            data.extend_from_slice(p.value.data());
        }
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(ids), &refs))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = first.value.dims2()?;
        let mut total = 0;
        for p in parts {
            first.same_tape(p, "concat_cols")?;
            let (r, c) = p.value.dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("{r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value.row(i));
            }
        }
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(Tensor::matrix(rows, total, data)?, Op::ConcatCols(ids), &refs))
    }

    /// Mean over rows of `−log softmax(row)[label]`, evaluated with the
    /// max-shifted log-sum-exp.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (m, c) = self.value.dims2()?;
        if labels.len() != m || m == 0 {
            return Err(Error::dim("softmax_cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::dim("softmax_cross_entropy", format!("label {l} of {c} classes")));
        }
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = self.value.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let probs = Tensor::matrix(m, c, probs)?;
        Ok(self.derive(
            Tensor::scalar(total / m as f64),
            Op::SoftmaxXent(self.id, labels.to_vec(), probs),
            &[self],
        ))
    }
}
