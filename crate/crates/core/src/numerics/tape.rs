//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its parents. [`Tape::backward`] replays the nodes in reverse order,
//! which is a valid reverse topological order because parents are always
//! recorded before their children.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddScalar,
    MatMul,
    AddRow,
    Tanh,
    Exp,
    Ln,
    Square,
    SumRows,
    Sum,
    Mean,
    ConcatCols,
    GatherRows,
    Clamp,
    Minimum,
    SegmentSum,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Neg,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::AddRow,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Square,
        OpKind::SumRows,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::ConcatCols,
        OpKind::GatherRows,
        OpKind::Clamp,
        OpKind::Minimum,
        OpKind::SegmentSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::AddRow => "add_row",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Square => "square",
            OpKind::SumRows => "sum_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::Clamp => "clamp",
            OpKind::Minimum => "minimum",
            OpKind::SegmentSum => "segment_sum",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SegmentSum(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Neg(..) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Exp(..) => OpKind::Exp,
            Op::Ln(..) => OpKind::Ln,
            Op::Square(..) => OpKind::Square,
            Op::SumRows(..) => OpKind::SumRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Minimum(..) => OpKind::Minimum,
            Op::SegmentSum(..) => OpKind::SegmentSum,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate corruption of one backward rule. Only used to prove that the
/// gradient checker catches broken rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

/// Ordered record of primitive operations.
#[derive(Debug, Clone, Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
    stopped: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

pub type Tape = ComputationTape;

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl ComputationTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose backward rule for `fault.op` is scaled by `fault.factor`.
    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    /// Tape whose stop-gradient leaves take `values` in creation order.
    ///
    /// Finite differences of a loss with stop-gradient factors must hold
    /// those factors at their unperturbed values; replaying the list from
    /// [`Self::stopped`] does exactly that.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    /// Distinct non-leaf operations recorded so far, in first-use order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut kinds: Vec<OpKind> = Vec::new();
        for n in &self.nodes {
            let k = n.op.kind();
            if k != OpKind::Leaf && !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        kinds
    }

    /// Values of every stop-gradient leaf, in creation order.
    pub fn stopped(&self) -> &[Tensor] {
        &self.stopped
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a value-equal leaf through which nothing propagates.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.stop_gradient(value)
    }

    /// Constant computed from other tape values, recorded for replay.
    pub fn stop_gradient(&mut self, value: Tensor) -> Var {
        let k = self.stopped.len();
        let value = match self.replay.as_ref().and_then(|r| r.get(k)) {
            Some(v) => v.clone(),
            None => value,
        };
        self.stopped.push(value.clone());
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_raw(va, vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds the row vector `b: [m]` to every row of `a: [n, m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let m = vb.len();
        let mut out = va.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vb.data()[i % m];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain(String::from("ln of a non-positive value")));
        }
        let out = self.value(a).map(libm::log);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Ln(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Reduces the trailing extent: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("sum_rows", format!("{:?}", va.shape())));
        }
        let (n, m) = (va.shape()[0], va.shape()[1]);
        let out: Vec<f64> = (0..n)
            .map(|i| va.data()[i * m..(i + 1) * m].iter().sum())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / va.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Column-wise concatenation of `[n, k_i]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.value(p).shape().first().copied().unwrap_or(0),
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.shape()[0] != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("part shape {:?} with {n} rows", v.shape()),
                ));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::raw(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Row lookup into `table: [rows, e]`, producing `[indices.len(), e]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", vt.shape())));
        }
        let (rows, e) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of {rows} rows"),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(&vt.data()[i * e..(i + 1) * e]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::raw(vec![indices.len(), e], out),
            Op::GatherRows(table, indices.to_vec()),
            rg,
        ))
    }

    /// Elementwise clamp; the gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("minimum", va, vb)?;
        let out = va.zip_map(vb, f64::min);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Minimum(a, b), rg))
    }

    /// Sums consecutive runs of a vector: `[sum(lens)] -> [lens.len()]`.
    pub fn segment_sum(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 1 || lens.iter().sum::<usize>() != va.len() {
            return Err(Error::shape(
                "segment_sum",
                format!("{:?} into segments {lens:?}", va.shape()),
            ));
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &l in lens {
            out.push(va.data()[start..start + l].iter().sum());
            start += l;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SegmentSum(a, lens.to_vec()), rg))
    }

    /// Replays the tape backwards from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::full(lv.shape(), 1.0))
    }

    /// Vector-Jacobian product: gradients of `<seed, out>`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        let lv = self.value(out);
        if seed.shape() != lv.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), lv.shape()),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                context: String::from("loss value"),
            });
        }
        let loss = out;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let factor = match self.fault {
                Some(f) if f.op == node.op.kind() => f.factor,
                _ => 1.0,
            };
            let g = if factor != 1.0 {
                g.map(|x| x * factor)
            } else {
                g
            };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad || !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul_bt(g, vb));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_at(va, g));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for (i, x) in g.data().iter().enumerate() {
                        gb[i % m] += x;
                    }
                    self.accumulate(grads, *b, Tensor::vector(gb));
                }
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Ln(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |x, y| x / y));
            }
            Op::Square(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |x, y| 2.0 * x * y));
            }
            Op::SumRows(a) => {
                let va = self.value(*a);
                let m = va.shape()[1];
                let data = va
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, _)| g.data()[i / m])
                    .collect();
                self.accumulate(grads, *a, Tensor::raw(va.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let gv = g.data()[0] / va.len().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(va.shape(), gv));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accumulate(grads, p, Tensor::raw(vec![n, w], gp));
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, indices) => {
                let vt = self.value(*table);
                let e = vt.shape()[1];
                let mut gt = Tensor::zeros(vt.shape());
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..e {
                        gt.data_mut()[i * e + j] += g.data()[row * e + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let va = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(va, |x, y| if y > lo && y < hi { x } else { 0.0 }),
                );
            }
            Op::SegmentSum(a, lens) => {
                let mut ga = Vec::with_capacity(self.value(*a).len());
                for (k, &l) in lens.iter().enumerate() {
                    ga.extend(core::iter::repeat_n(g.data()[k], l));
                }
                self.accumulate(grads, *a, Tensor::vector(ga));
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mask_a = va.zip_map(vb, |x, y| if x <= y { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.zip_map(&mask_a, |x, m| x * m));
                self.accumulate(grads, *b, g.zip_map(&mask_a, |x, m| x * (1.0 - m)));
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += x * w;
            }
        }
    }
    Tensor::raw(vec![n, m], out)
}

/// `g [n, m] x b^T [m, k] -> [n, k]`.
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let (gd, bd) = (g.data(), b.data());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..m {
                acc += gd[i * m + j] * bd[p * m + j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::raw(vec![n, k], out)
}

/// `a^T [k, n] x g [n, m] -> [k, m]`.
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = g.shape()[1];
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[p * m..(p + 1) * m]
                .iter_mut()
                .zip(&gd[i * m..(i + 1) * m])
            {
                *o += x * y;
            }
        }
    }
    Tensor::raw(vec![k, m], out)
}
