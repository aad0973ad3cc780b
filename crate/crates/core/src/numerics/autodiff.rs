//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! A [`Var`] wraps a tensor value plus the operation that produced it. Leaf
//! parameters carry a gradient buffer that [`Var::backward`] fills. Graphs are
//! only recorded while gradients are enabled and at least one input requires
//! a gradient; inside [`no_grad`] every result is a detached constant, so
//! intermediate values are freed as soon as they go out of scope.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::linalg::Lu;
use crate::numerics::tensor::{broadcast_offsets, broadcast_shape, permute_data, reduce_to_shape};
use crate::numerics::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: u64,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    consumed: Cell<bool>,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, kernel: Var, bias: Var },
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    LogAbsDet(Var, Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::MaxAxis(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Narrow(a, ..)
            | Op::LogAbsDet(a, _) => vec![a],
            Op::Conv2d { x, kernel, bias } => vec![x, kernel, bias],
            Op::Concat(vs, _) => vs.iter().collect(),
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value().shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    Ok(())
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            consumed: Cell::new(false),
            op: Op::Leaf,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    /// A trainable leaf whose gradient buffer is filled by `backward`.
    pub fn parameter(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    fn from_op(value: Tensor, name: &'static str, op: Op) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.0.requires_grad);
        Ok(Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            consumed: Cell::new(false),
            op: if requires_grad { op } else { Op::Leaf },
        })))
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.value.borrow()
    }

    pub fn tensor(&self) -> Tensor {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.0.value.borrow().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Replaces the value of a leaf; the shape must be unchanged.
    pub fn set_value(&self, value: Tensor) -> Result<()> {
        if !matches!(self.0.op, Op::Leaf) {
            return Err(Error::Invalid("set_value on a non-leaf".into()));
        }
        let mut v = self.0.value.borrow_mut();
        if v.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "cannot replace {:?} with {:?}",
                v.shape(),
                value.shape()
            )));
        }
        *v = value;
        Ok(())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.tensor())
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let oa = broadcast_offsets(a.shape(), &shape);
        let ob = broadcast_offsets(b.shape(), &shape);
        let (da, db) = (a.data(), b.data());
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
        Tensor::new(&shape, data)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.binary(other, |a, b| a + b)?;
        Var::from_op(v, "add", Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.binary(other, |a, b| a - b)?;
        Var::from_op(v, "sub", Op::Sub(self.clone(), other.clone()))
    }

    /// Elementwise product with stretch-broadcasting of extent-1 axes.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.binary(other, |a, b| a * b)?;
        Var::from_op(v, "mul", Op::Mul(self.clone(), other.clone()))
    }

    pub fn broadcast_mul(&self, other: &Var) -> Result<Var> {
        self.mul(other)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let v = self.value().map(|x| x * c);
        Var::from_op(v, "scale", Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        let v = self.value().map(|x| x + c);
        Var::from_op(v, "add_scalar", Op::AddScalar(self.clone()))
    }

    pub fn exp(&self) -> Result<Var> {
        let v = self.value().map(f64::exp);
        Var::from_op(v, "exp", Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Var> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(Error::LogDomain);
        }
        let v = self.value().map(f64::ln);
        Var::from_op(v, "log", Op::Log(self.clone()))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let v = self.value().map(sigmoid);
        Var::from_op(v, "sigmoid", Op::Sigmoid(self.clone()))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        Var::from_op(v, "clamp", Op::Clamp(self.clone(), lo, hi))
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> Result<Var> {
        let v = Tensor::scalar(self.value().sum());
        Var::from_op(v, "sum", Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let v = Tensor::new(&shape, out)?;
        drop(x);
        Var::from_op(v, "sum_axis", Op::SumAxis(self.clone(), axis))
    }

    /// Averages over `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let n = x.shape()[axis] as f64;
        drop(x);
        let v = no_grad(|| self.sum_axis(axis))?.tensor().map(|x| x / n);
        Var::from_op(v, "mean_axis", Op::MeanAxis(self.clone(), axis))
    }

    /// Max-pools `axis` down to extent 1. The gradient routes to the first
    /// maximal element along the axis.
    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let d = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let off = (o * n + k) * inner + i;
                    if d[off] > d[best] {
                        best = off;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let v = Tensor::new(&shape, out)?;
        drop(x);
        Var::from_op(v, "max_axis", Op::MaxAxis(self.clone(), arg))
    }

    // ---- layout ------------------------------------------------------------

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Invalid(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let v = permute_data(&self.value(), perm);
        Var::from_op(v, "permute", Op::Permute(self.clone(), perm.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Var::from_op(v, "reshape", Op::Reshape(self.clone()))
    }

    /// Slice of `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if start + len > n {
            return Err(Error::Shape(format!(
                "narrow {start}..{} exceeds extent {n}",
                start + len
            )));
        }
        let d = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        drop(x);
        Var::from_op(v, "narrow", Op::Narrow(self.clone(), axis, start))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?
            .shape();
        check_axis(&first, axis)?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::Shape(format!("cannot concat {s:?} with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = p.value();
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Var::from_op(v, "concat", Op::Concat(parts.to_vec(), axis))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = matmul(&self.value(), &other.value())?;
        Var::from_op(v, "matmul", Op::MatMul(self.clone(), other.clone()))
    }

    /// Same-padded 2-D cross-correlation.
    ///
    /// `self` is `[Cin, H, W]` or `[B, Cin, H, W]`, `kernel` is
    /// `[Cout, Cin, kh, kw]` with odd `kh`, `kw`, and `bias` is `[Cout]`.
    /// Zero padding keeps the spatial extents unchanged.
    pub fn conv2d_same(&self, kernel: &Var, bias: &Var) -> Result<Var> {
        let v = conv2d_forward(&self.value(), &kernel.value(), &bias.value())?;
        Var::from_op(
            v,
            "conv2d_same",
            Op::Conv2d {
                x: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
            },
        )
    }

    /// `log|det A|` of a square matrix; errors when singular.
    pub fn log_abs_det(&self) -> Result<Var> {
        let lu = Lu::new(&self.value())?;
        let v = Tensor::scalar(lu.log_abs_det());
        Var::from_op(v, "log_abs_det", Op::LogAbsDet(self.clone(), lu.inverse()))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from this scalar, filling every participating
    /// parameter's gradient buffer (accumulating into existing buffers).
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if self.0.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }
        if !self.0.requires_grad {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(self.0.id, Tensor::ones(&shape));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.accumulate(&g),
                    None => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in node.local_grads(&g)? {
                if !parent.0.requires_grad {
                    continue;
                }
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.accumulate(&pg),
                    None => {
                        grads.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients, parents before children.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(v.0.id) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.0.op.parents() {
                if p.0.requires_grad && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn local_grads(&self, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = self.value();
        Ok(match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (a.clone(), reduce_to_shape(g, a.value().shape())),
                (b.clone(), reduce_to_shape(g, b.value().shape())),
            ],
            Op::Sub(a, b) => vec![
                (a.clone(), reduce_to_shape(g, a.value().shape())),
                (
                    b.clone(),
                    reduce_to_shape(&g.map(|x| -x), b.value().shape()),
                ),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (a.value(), b.value());
                let ob = broadcast_offsets(bv.shape(), g.shape());
                let oa = broadcast_offsets(av.shape(), g.shape());
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&ob)
                    .map(|(x, &j)| x * bv.data()[j])
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&oa)
                    .map(|(x, &i)| x * av.data()[i])
                    .collect();
                let ga = reduce_to_shape(&Tensor::new(g.shape(), ga)?, av.shape());
                let gb = reduce_to_shape(&Tensor::new(g.shape(), gb)?, bv.shape());
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Scale(a, c) => vec![(a.clone(), g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(a.clone(), g.clone())],
            Op::Exp(a) => vec![(a.clone(), g.zip_map(&out, |x, y| x * y))],
            Op::Log(a) => vec![(a.clone(), g.zip_map(&a.value(), |x, y| x / y))],
            Op::Sigmoid(a) => vec![(a.clone(), g.zip_map(&out, |x, s| x * s * (1.0 - s)))],
            Op::Clamp(a, lo, hi) => vec![(
                a.clone(),
                g.zip_map(
                    &a.value(),
                    |x, v| if v >= *lo && v <= *hi { x } else { 0.0 },
                ),
            )],
            Op::Sum(a) => {
                let s = g.item();
                vec![(a.clone(), Tensor::full(a.value().shape(), s))]
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = a.value().shape().to_vec();
                let gi = match self.0.op {
                    Op::MeanAxis(..) => g.map(|x| x / shape[*axis] as f64),
                    _ => g.clone(),
                };
                let offs = broadcast_offsets(gi.shape(), &shape);
                let data = offs.iter().map(|&o| gi.data()[o]).collect();
                vec![(a.clone(), Tensor::new(&shape, data)?)]
            }
            Op::MaxAxis(a, arg) => {
                let mut ga = Tensor::zeros(a.value().shape());
                for (x, &o) in g.data().iter().zip(arg) {
                    ga.data_mut()[o] += x;
                }
                vec![(a.clone(), ga)]
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(a.clone(), permute_data(g, &inv))]
            }
            Op::Reshape(a) => vec![(a.clone(), g.reshape(a.value().shape())?)],
            Op::Narrow(a, axis, start) => {
                let shape = a.value().shape().to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut ga = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    ga.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(a.clone(), ga)]
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let shape = p.value().shape().to_vec();
                    let n = shape[*axis];
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let src = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[src..src + n * inner]);
                    }
                    res.push((p.clone(), Tensor::new(&shape, data)?));
                    start += n;
                }
                res
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (a.value(), b.value());
                let ga = matmul(g, &transpose(&bv))?;
                let gb = matmul(&transpose(&av), g)?;
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Conv2d { x, kernel, bias } => {
                let (gx, gk, gb) = conv2d_backward(&x.value(), &kernel.value(), g);
                vec![(x.clone(), gx), (kernel.clone(), gk), (bias.clone(), gb)]
            }
            Op::LogAbsDet(a, inv) => {
                let s = g.item();
                vec![(a.clone(), transpose(inv).map(|x| x * s))]
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose(t: &Tensor) -> Tensor {
    permute_data(t, &[1, 0])
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        (sa, sb) => {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
    };
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = da[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &db[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(x: &[usize], k: &[usize], b: &[usize]) -> Result<ConvDims> {
    let (batch, cin, h, w) = match *x {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d input must be rank 3 or 4, got {x:?}"
            )))
        }
    };
    let [cout, kcin, kh, kw] = *k else {
        return Err(Error::Shape(format!(
            "conv2d kernel must be rank 4, got {k:?}"
        )));
    };
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv2d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Invalid(format!(
            "conv2d kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if b != [cout] {
        return Err(Error::Shape(format!(
            "conv2d bias must be [{cout}], got {b:?}"
        )));
    }
    Ok(ConvDims {
        batch,
        cin,
        cout,
        h,
        w,
        kh,
        kw,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `d`.
fn tap_range(d: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (extent + pad).saturating_sub(d).min(extent);
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x.shape(), k.shape(), b.shape())?;
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.batch * d.cout * plane];
    let (xd, kd) = (x.data(), k.data());
    for n in 0..d.batch {
        for co in 0..d.cout {
            let dst = &mut out[(n * d.cout + co) * plane..(n * d.cout + co + 1) * plane];
            for ci in 0..d.cin {
                let src = &xd[(n * d.cin + ci) * plane..(n * d.cin + ci + 1) * plane];
                for di in 0..d.kh {
                    let (i0, i1) = tap_range(di, ph, d.h);
                    for dj in 0..d.kw {
                        let wv = kd[((co * d.cin + ci) * d.kh + di) * d.kw + dj];
                        let (j0, j1) = tap_range(dj, pw, d.w);
                        for i in i0..i1 {
                            let si = (i + di - ph) * d.w;
                            for j in j0..j1 {
                                dst[i * d.w + j] += wv * src[si + j + dj - pw];
                            }
                        }
                    }
                }
            }
            let bias = b.data()[co];
            dst.iter_mut().for_each(|v| *v += bias);
        }
    }
    let shape = if x.rank() == 3 {
        vec![d.cout, d.h, d.w]
    } else {
        vec![d.batch, d.cout, d.h, d.w]
    };
    Tensor::new(&shape, out)
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let kshape = k.shape();
    let d = conv_dims(x.shape(), kshape, &[kshape[0]]).expect("validated in forward");
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let plane = d.h * d.w;
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kshape);
    let mut gb = Tensor::zeros(&[d.cout]);
    for n in 0..d.batch {
        for co in 0..d.cout {
            let go = &gd[(n * d.cout + co) * plane..(n * d.cout + co + 1) * plane];
            gb.data_mut()[co] += go.iter().sum::<f64>();
            for ci in 0..d.cin {
                let xoff = (n * d.cin + ci) * plane;
                for di in 0..d.kh {
                    let (i0, i1) = tap_range(di, ph, d.h);
                    for dj in 0..d.kw {
                        let kidx = ((co * d.cin + ci) * d.kh + di) * d.kw + dj;
                        let wv = kd[kidx];
                        let (j0, j1) = tap_range(dj, pw, d.w);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let si = xoff + (i + di - ph) * d.w;
                            for j in j0..j1 {
                                let gv = go[i * d.w + j];
                                let s = si + j + dj - pw;
                                acc += gv * xd[s];
                                gx.data_mut()[s] += gv * wv;
                            }
                        }
                        gk.data_mut()[kidx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}
