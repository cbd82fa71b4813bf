use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;

use super::{axis_extents, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Primitive operation kinds recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Abs,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Scale,
    Shift,
    Clamp,
    MatMul,
    Sum,
    LogSumExp,
    LogSoftmax,
    Reshape,
    Stack,
    Select,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use OpKind::*;
        let all = [
            Add, Sub, Mul, Div, Neg, Exp, Log, Abs, Relu, Sigmoid, Tanh, Softplus, Scale, Shift,
            Clamp, MatMul, Sum, LogSumExp, LogSoftmax, Reshape, Stack, Select,
        ];
        all.into_iter()
            .find(|k| k.to_string() == s.to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown op kind '{s}'")))
    }
}

/// Deliberate corruption of one backward rule, for negative-control runs of
/// the gradient checks. Thread-local, so concurrent tapes are unaffected.
pub mod fault {
    use super::OpKind;
    use std::cell::Cell;

    thread_local! {
        static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    /// Scale factor applied to the input gradient of the corrupted op.
    pub const CORRUPTION: f64 = 1.5;

    #[must_use = "the fault is cleared when the guard drops"]
    pub struct FaultGuard(());

    impl Drop for FaultGuard {
        fn drop(&mut self) {
            FAULT.with(|f| f.set(None));
        }
    }

    pub fn inject(kind: OpKind) -> FaultGuard {
        FAULT.with(|f| f.set(Some(kind)));
        FaultGuard(())
    }

    pub(super) fn factor(kind: OpKind) -> f64 {
        FAULT.with(|f| if f.get() == Some(kind) { CORRUPTION } else { 1.0 })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Scale(usize, f64),
    Shift(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Sum(usize, usize),
    LogSumExp(usize, usize),
    LogSoftmax(usize),
    Reshape(usize),
    Stack(Vec<usize>),
    Select(usize, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Abs(_) => OpKind::Abs,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(_) => OpKind::Shift,
            Op::Clamp(..) => OpKind::Clamp,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Sum(..) => OpKind::Sum,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Stack(_) => OpKind::Stack,
            Op::Select(..) => OpKind::Select,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A per-evaluation record of operations. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
    kink_margin: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest distance to a non-differentiable point (`abs` or `relu` at
    /// zero) seen by any forward evaluation on this tape.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// An anonymous leaf that receives gradients.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A named parameter leaf. Binding the same name twice is a contract error.
    pub fn param(&self, name: &str, value: Tensor) -> Result<Var<'_>> {
        if self.params.borrow().contains_key(name) {
            return Err(Error::Contract(format!("parameter '{name}' bound twice")));
        }
        let v = self.var(value);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        Ok(v)
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<Tensor> = parts.iter().map(|p| nodes[p.id].value.clone()).collect();
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::stack(&tensors)?, rg)
        };
        Ok(self.push(value, Op::Stack(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Reverse pass from a scalar output. Every named parameter gets a
    /// gradient; parameters the output does not depend on get zeros.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                let f = fault::factor(node.op.kind());
                backprop(&nodes, id, &g, f, &mut grads);
            }
            grads[id] = Some(g);
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, &id)| {
                let shape = nodes[id].value.shape().to_vec();
                let g = match grads.get(id).cloned().flatten() {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), g)
            })
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` (shaped like the broadcast output) into the gradient of input
/// `id`, summing over the broadcast leading axes when the input is smaller.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    n_in: usize,
    g: impl Iterator<Item = (usize, f64)>,
) {
    let acc = accumulate(grads, id, n_in);
    for (i, gi) in g {
        acc[i % n_in] += gi;
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], f: f64, grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign_b = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(a) {
                let n = val(a).len();
                accumulate_broadcast(grads, a, n, g.iter().map(|&x| x * f).enumerate());
            }
            if rg(b) {
                let n = val(b).len();
                accumulate_broadcast(
                    grads,
                    b,
                    n,
                    g.iter().map(|&x| sign_b * x * f).enumerate(),
                );
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (na, nb) = (av.len(), bv.len());
            if rg(a) {
                accumulate_broadcast(
                    grads,
                    a,
                    na,
                    g.iter().enumerate().map(|(i, &x)| (i, x * bv[i % nb] * f)),
                );
            }
            if rg(b) {
                accumulate_broadcast(
                    grads,
                    b,
                    nb,
                    g.iter().enumerate().map(|(i, &x)| (i, x * av[i % na] * f)),
                );
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (na, nb) = (av.len(), bv.len());
            if rg(a) {
                accumulate_broadcast(
                    grads,
                    a,
                    na,
                    g.iter().enumerate().map(|(i, &x)| (i, x / bv[i % nb] * f)),
                );
            }
            if rg(b) {
                accumulate_broadcast(
                    grads,
                    b,
                    nb,
                    g.iter().enumerate().map(|(i, &x)| {
                        let d = bv[i % nb];
                        (i, -x * av[i % na] / (d * d) * f)
                    }),
                );
            }
        }
        Op::Neg(a) => unary(grads, a, g, |_, _| -f),
        Op::Exp(a) => {
            let o = out.data();
            unary(grads, a, g, |i, _| o[i] * f)
        }
        Op::Log(a) => {
            let x = val(a).data();
            unary(grads, a, g, |i, _| f / x[i])
        }
        Op::Abs(a) => {
            let x = val(a).data();
            unary(grads, a, g, |i, _| {
                let s = if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                s * f
            })
        }
        Op::Relu(a) => {
            let x = val(a).data();
            unary(grads, a, g, |i, _| if x[i] > 0.0 { f } else { 0.0 })
        }
        Op::Sigmoid(a) => {
            let o = out.data();
            unary(grads, a, g, |i, _| o[i] * (1.0 - o[i]) * f)
        }
        Op::Tanh(a) => {
            let o = out.data();
            unary(grads, a, g, |i, _| (1.0 - o[i] * o[i]) * f)
        }
        Op::Softplus(a) => {
            let x = val(a).data();
            unary(grads, a, g, |i, _| sigmoid(x[i]) * f)
        }
        Op::Scale(a, c) => unary(grads, a, g, |_, _| c * f),
        Op::Shift(a) => unary(grads, a, g, |_, _| f),
        Op::Clamp(a, lo, hi) => {
            let x = val(a).data();
            unary(grads, a, g, |i, _| if x[i] > lo && x[i] < hi { f } else { 0.0 })
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let gs: Vec<f64> = g.iter().map(|x| x * f).collect();
            if rg(a) {
                let acc = accumulate(grads, a, m * k);
                // dA[m,k] += dC[m,n] . B^T
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        n,
                        k,
                        1.0,
                        gs.as_ptr(),
                        n as isize,
                        1,
                        bv.data().as_ptr(),
                        1,
                        n as isize,
                        1.0,
                        acc.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }
            if rg(b) {
                let acc = accumulate(grads, b, k * n);
                // dB[k,n] += A^T . dC
                unsafe {
                    matrixmultiply::dgemm(
                        k,
                        m,
                        n,
                        1.0,
                        av.data().as_ptr(),
                        1,
                        k as isize,
                        gs.as_ptr(),
                        n as isize,
                        1,
                        1.0,
                        acc.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
        Op::Sum(a, axis) => {
            let (outer, len, inner) = axis_extents(val(a).shape(), axis);
            let acc = accumulate(grads, a, outer * len * inner);
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        acc[(o * len + j) * inner + i] += g[o * inner + i] * f;
                    }
                }
            }
        }
        Op::LogSumExp(a, axis) => {
            let x = val(a).data();
            let (outer, len, inner) = axis_extents(val(a).shape(), axis);
            let o_val = out.data();
            let acc = accumulate(grads, a, outer * len * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let lse = o_val[o * inner + i];
                    let go = g[o * inner + i] * f;
                    if !lse.is_finite() {
                        continue;
                    }
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        acc[idx] += go * (x[idx] - lse).exp();
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let shape = val(a).shape();
            let len = *shape.last().unwrap();
            let rows = val(a).len() / len.max(1);
            let o = out.data();
            let acc = accumulate(grads, a, rows * len);
            for r in 0..rows {
                let gs: f64 = g[r * len..(r + 1) * len].iter().sum();
                for j in 0..len {
                    let idx = r * len + j;
                    acc[idx] += (g[idx] - o[idx].exp() * gs) * f;
                }
            }
        }
        Op::Reshape(a) => unary(grads, a, g, |_, _| f),
        Op::Stack(ref parts) => {
            let n = g.len() / parts.len();
            for (p, &pid) in parts.iter().enumerate() {
                if rg(pid) {
                    let acc = accumulate(grads, pid, n);
                    for (dst, src) in acc.iter_mut().zip(&g[p * n..(p + 1) * n]) {
                        *dst += src * f;
                    }
                }
            }
        }
        Op::Select(a, index) => {
            let n = g.len();
            let total = val(a).len();
            let acc = accumulate(grads, a, total);
            for (dst, src) in acc[index * n..(index + 1) * n].iter_mut().zip(g) {
                *dst += src * f;
            }
        }
    }
}

fn unary(grads: &mut [Option<Vec<f64>>], a: usize, g: &[f64], d: impl Fn(usize, f64) -> f64) {
    let acc = accumulate(grads, a, g.len());
    for (i, (dst, &gi)) in acc.iter_mut().zip(g).enumerate() {
        *dst += gi * d(i, gi);
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gradients from one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any variable recorded before the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match self.nodes.get(v.id).cloned().flatten() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Named parameter gradients, sorted by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary_op(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.tape.value_of(self.id).map(f);
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary_op(
        self,
        other: Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (value, rg) = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shapes(name, a.shape(), b.shape()))?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
            (
                Tensor::new(shape, data)?,
                self.requires_grad() || other.requires_grad(),
            )
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary_op(Op::Neg(self.id), |x| -x)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        {
            let v = self.tape.value_of(self.id);
            if let Some(bad) = v.data().iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        Ok(self.unary_op(Op::Log(self.id), f64::ln))
    }

    pub fn abs(self) -> Var<'t> {
        self.note_kinks(0.0);
        self.unary_op(Op::Abs(self.id), f64::abs)
    }

    pub fn relu(self) -> Var<'t> {
        self.note_kinks(0.0);
        self.unary_op(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_op(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_op(Op::Tanh(self.id), f64::tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary_op(Op::Softplus(self.id), softplus)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary_op(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary_op(Op::Shift(self.id), |x| x + c)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary_op(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    fn note_kinks(&self, at: f64) {
        let v = self.tape.value_of(self.id);
        let m = v
            .data()
            .iter()
            .fold(f64::INFINITY, |m, &x| m.min((x - at).abs()));
        if m < self.tape.kink_margin.get() {
            self.tape.kink_margin.set(m);
        }
    }

    /// Matrix product of rank-2 operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, rg) = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shapes("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data().as_ptr(),
                    k as isize,
                    1,
                    b.data().as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            (
                Tensor::new(vec![m, n], c)?,
                self.requires_grad() || other.requires_grad(),
            )
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    fn check_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "axis {axis} invalid for shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        let value = {
            let v = self.tape.value_of(self.id);
            let (outer, len, inner) = axis_extents(&shape, axis);
            let x = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x[(o * len + j) * inner + i];
                    }
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            Tensor::new(s, out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Sum(self.id, axis), rg))
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        let n = self.check_axis(axis)?[axis];
        Ok(self.sum(axis)?.scale(1.0 / n as f64))
    }

    /// `m + log Σ exp(x − m)` along `axis`, with `m` the maximum.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        let value = {
            let v = self.tape.value_of(self.id);
            let (outer, len, inner) = axis_extents(&shape, axis);
            let x = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| x[(o * len + j) * inner + i];
                    let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                    out[o * inner + i] = if m == f64::NEG_INFINITY || m == f64::INFINITY {
                        m
                    } else {
                        m + (0..len).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                    };
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            Tensor::new(s, out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::LogSumExp(self.id, axis), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&len) = shape.last() else {
            return Err(Error::Dimension("log_softmax of a rank-0 tensor".into()));
        };
        let value = {
            let v = self.tape.value_of(self.id);
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(len.max(1)) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Tensor::new(shape, out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::LogSoftmax(self.id), rg))
    }

    /// Sum of every element, as a rank-0 result.
    pub fn sum_all(self) -> Var<'t> {
        let n = self.tape.value_of(self.id).len();
        self.reshape(&[n])
            .and_then(|v| v.sum(0))
            .expect("flattened sum")
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.tape.value_of(self.id).len();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value_of(self.id).reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Entry `index` of the leading axis, with that axis dropped.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value_of(self.id);
            if v.rank() == 0 || index >= v.shape()[0] {
                return Err(Error::Dimension(format!(
                    "select index {index} out of range for shape {:?}",
                    v.shape()
                )));
            }
            v.row(index)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Select(self.id, index), rg))
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(self) -> Var<'t> {
        let value = self.value();
        self.tape.constant(value)
    }
}
