//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Values are recorded on a [`Tape`] as they are computed. A node keeps its
//! output value and, when any input requires a gradient, the primitive and
//! input ids needed to run the backward rule; input activations are read
//! back from their own nodes, so nothing is recomputed. [`Tape::backward`]
//! walks the nodes in reverse insertion order (which is a topological order
//! by construction) and then clears the tape.
//!
//! Shapes are never coerced implicitly: elementwise binary primitives require
//! identical shapes, and [`Primitive::Broadcast`] is the only way to expand a
//! tensor.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::TensorError;
use crate::tensor::{axis_blocks, strides, Tensor};

/// A primitive operation together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    ScalarAdd(f64),
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// 3x3 kernel, padding 1, stride 1 or 2. Inputs: image (`C,H,W` or
    /// `N,C,H,W`), weight `O,C,3,3`, optional bias `O`.
    Conv2d3x3 { stride: usize },
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    SoftmaxAxis(usize),
    LogSoftmaxAxis(usize),
    Exp,
    Log,
    /// Reduces (removes) the axis.
    SumAxis(usize),
    MeanAxis(usize),
    ConcatAxis(usize),
    Reshape(Vec<usize>),
    /// Transpose of a rank-2 tensor.
    Transpose2,
    /// Right-aligned expansion of size-1 (or missing leading) axes.
    Broadcast(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::ScalarMul(_) => "scalar_mul",
            Primitive::ScalarAdd(_) => "scalar_add",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d3x3 { .. } => "conv2d_3x3_same",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::SoftmaxAxis(_) => "softmax_axis",
            Primitive::LogSoftmaxAxis(_) => "log_softmax_axis",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::ConcatAxis(_) => "concat_axis",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose2 => "transpose2",
            Primitive::Broadcast(_) => "broadcast",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Present only for non-leaf nodes that participate in differentiation.
    op: Option<(Primitive, Vec<usize>)>,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of a scalar loss with respect to the tape's differentiable
/// leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value,
            requires_grad,
            op: None,
        })
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    fn check_var(&self, v: &Var<'_>) -> Result<(), TensorError> {
        if !std::ptr::eq(v.tape, self) {
            return Err(TensorError::Contract("variable belongs to another tape".into()));
        }
        if v.generation != self.generation.get() {
            return Err(TensorError::Contract(
                "variable used after its tape was consumed by backward".into(),
            ));
        }
        Ok(())
    }

    /// Applies `op` to `inputs`, recording a node when any input requires a
    /// gradient.
    pub fn apply(&self, op: Primitive, inputs: &[Var<'_>]) -> Result<Var<'_>, TensorError> {
        for v in inputs {
            self.check_var(v)?;
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = forward(&op, &values)?;
            if !value.is_finite() {
                return Err(TensorError::NonFinite { op: op.name() });
            }
            (value, inputs.iter().any(|v| nodes[v.id].requires_grad))
        };
        let op = requires_grad.then(|| (op, inputs.iter().map(|v| v.id).collect()));
        Ok(self.push(Node {
            value,
            requires_grad,
            op,
        }))
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// differentiable leaf that the loss depends on. The tape is cleared
    /// afterwards; variables recorded on it become unusable.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        self.check_var(&loss)?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.generation.set(self.generation.get() + 1);
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients::default());
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                None => {
                    if node.requires_grad {
                        out.by_id.insert(id, g);
                    }
                }
                Some((op, inputs)) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                    let wants: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = backward_rule(op, &values, &node.value, &g, &wants)?;
                    for ((&input, ig), want) in inputs.iter().zip(input_grads).zip(wants) {
                        let Some(ig) = ig else { continue };
                        if !want {
                            continue;
                        }
                        match &mut grads[input] {
                            Some(acc) => acc.axpy(1.0, &ig)?,
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.check_var(self).expect("stale variable");
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.check_var(self).expect("stale variable");
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.check_var(self).expect("stale variable");
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Primitive) -> Result<Var<'t>, TensorError> {
        self.tape.apply(op, &[self])
    }

    fn binary(self, op: Primitive, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(op, &[self, other])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(Primitive::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(Primitive::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(Primitive::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(Primitive::Div, other)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::ScalarMul(s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::ScalarAdd(s))
    }

    pub fn neg(self) -> Result<Var<'t>, TensorError> {
        self.scale(-1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(Primitive::MatMul, other)
    }

    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
    ) -> Result<Var<'t>, TensorError> {
        let op = Primitive::Conv2d3x3 { stride };
        match bias {
            Some(b) => self.tape.apply(op, &[self, weight, b]),
            None => self.tape.apply(op, &[self, weight]),
        }
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Softplus)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::SoftmaxAxis(axis))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::LogSoftmaxAxis(axis))
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Log)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::SumAxis(axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::MeanAxis(axis))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Reshape(shape.to_vec()))
    }

    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Transpose2)
    }

    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        self.unary(Primitive::Broadcast(shape.to_vec()))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>, TensorError> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.reshape(&[n])?.sum_axis(0)
    }

    pub fn mean_all(self) -> Result<Var<'t>, TensorError> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.reshape(&[n])?.mean_axis(0)
    }
}

/// Concatenates variables along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat_axis", "no inputs"))?;
    first.tape.apply(Primitive::ConcatAxis(axis), parts)
}

fn expect_arity(op: &Primitive, inputs: &[&Tensor], n: usize) -> Result<(), TensorError> {
    if inputs.len() != n {
        return Err(TensorError::shape(
            op.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn same_shape(op: &Primitive, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis(op: &Primitive, t: &Tensor, axis: usize) -> Result<(), TensorError> {
    if axis >= t.rank() {
        return Err(TensorError::shape(
            op.name(),
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise (along `axis`) log-softmax on raw buffers.
pub(crate) fn log_softmax_buf(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..n).map(|k| (data[idx(k)] - max).exp()).sum::<f64>().ln() + max;
            for k in 0..n {
                out[idx(k)] = data[idx(k)] - lse;
            }
        }
    }
    out
}

pub(crate) fn softmax_buf(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[idx(k)] /= total;
            }
        }
    }
    out
}

fn reduce_sum(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(t.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = t.data();
    for o in 0..outer {
        for k in 0..n {
            let row = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out).expect("reduced shape")
}

/// Expands `g` (shape with `axis` removed) back along `axis` of extent `n`.
fn expand_axis(g: &Tensor, full_shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, n, inner) = axis_blocks(full_shape, axis);
    let mut out = vec![0.0; outer * n * inner];
    let gd = g.data();
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[(o * n + k) * inner + i] = gd[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(full_shape.to_vec(), out).expect("expanded shape")
}

fn matmul_buf(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_buf(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn conv_geometry(op: &Primitive, inputs: &[&Tensor], stride: usize) -> Result<ConvGeometry, TensorError> {
    if !(2..=3).contains(&inputs.len()) {
        return Err(TensorError::shape(op.name(), "expects image, weight and optional bias"));
    }
    if stride != 1 && stride != 2 {
        return Err(TensorError::shape(op.name(), format!("unsupported stride {stride}")));
    }
    let x = inputs[0];
    let (batch, in_ch, h, w) = match *x.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(TensorError::shape(op.name(), format!("image shape {:?}", x.shape()))),
    };
    let wt = inputs[1];
    let out_ch = match *wt.shape() {
        [o, c, 3, 3] if c == in_ch => o,
        _ => {
            return Err(TensorError::shape(
                op.name(),
                format!("weight {:?} for {in_ch} input channels", wt.shape()),
            ))
        }
    };
    if let Some(b) = inputs.get(2) {
        if b.shape() != [out_ch] {
            return Err(TensorError::shape(op.name(), format!("bias {:?}", b.shape())));
        }
    }
    Ok(ConvGeometry {
        batch,
        in_ch,
        h,
        w,
        out_ch,
        oh: (h - 1) / stride + 1,
        ow: (w - 1) / stride + 1,
        stride,
    })
}

/// Visits every (output position, input position) pair of one kernel tap.
#[inline]
fn conv_tap(
    g: &ConvGeometry,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize),
) {
    for y in 0..g.oh {
        let iy = (y * g.stride + ky) as isize - 1;
        if iy < 0 || iy as usize >= g.h {
            continue;
        }
        let iy = iy as usize;
        for x in 0..g.ow {
            let ix = (x * g.stride + kx) as isize - 1;
            if ix < 0 || ix as usize >= g.w {
                continue;
            }
            f(y * g.ow + x, iy * g.w + ix as usize);
        }
    }
}

fn conv_forward(g: &ConvGeometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0; g.batch * g.out_ch * out_plane];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out[(n * g.out_ch + o) * out_plane..(n * g.out_ch + o + 1) * out_plane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.in_ch {
                let src = &x[(n * g.in_ch + c) * in_plane..(n * g.in_ch + c + 1) * in_plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wt[((o * g.in_ch + c) * 3 + ky) * 3 + kx];
                        conv_tap(g, ky, kx, |op, ip| dst[op] += wv * src[ip]);
                    }
                }
            }
        }
    }
    out
}

fn broadcast_forward(src: &Tensor, target: &[usize]) -> Result<Tensor, TensorError> {
    let op = "broadcast";
    if target.len() < src.rank() || target.iter().any(|&d| d == 0) {
        return Err(TensorError::shape(op, format!("{:?} -> {target:?}", src.shape())));
    }
    let lead = target.len() - src.rank();
    let mut padded = vec![1; lead];
    padded.extend_from_slice(src.shape());
    for (&s, &t) in padded.iter().zip(target) {
        if s != 1 && s != t {
            return Err(TensorError::shape(op, format!("{:?} -> {target:?}", src.shape())));
        }
    }
    let src_strides = strides(&padded);
    let tgt_strides = strides(target);
    let numel: usize = target.iter().product();
    let sd = src.data();
    let data = (0..numel)
        .map(|flat| {
            let mut rem = flat;
            let mut offset = 0;
            for ax in 0..target.len() {
                let coord = rem / tgt_strides[ax];
                rem %= tgt_strides[ax];
                if padded[ax] != 1 {
                    offset += coord * src_strides[ax];
                }
            }
            sd[offset]
        })
        .collect();
    Tensor::new(target.to_vec(), data)
}

fn broadcast_backward(g: &Tensor, src_shape: &[usize]) -> Tensor {
    let target = g.shape();
    let lead = target.len() - src_shape.len();
    let mut padded = vec![1; lead];
    padded.extend_from_slice(src_shape);
    let src_strides = strides(&padded);
    let tgt_strides = strides(target);
    let mut out = vec![0.0; src_shape.iter().product()];
    for (flat, &gv) in g.data().iter().enumerate() {
        let mut rem = flat;
        let mut offset = 0;
        for ax in 0..target.len() {
            let coord = rem / tgt_strides[ax];
            rem %= tgt_strides[ax];
            if padded[ax] != 1 {
                offset += coord * src_strides[ax];
            }
        }
        out[offset] += gv;
    }
    Tensor::new(src_shape.to_vec(), out).expect("source shape")
}

fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    use Primitive::*;
    match op {
        Add | Sub | Mul | Div => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            Ok(match op {
                Add => zip_map(a, b, |x, y| x + y),
                Sub => zip_map(a, b, |x, y| x - y),
                Mul => zip_map(a, b, |x, y| x * y),
                _ => {
                    if b.data().iter().any(|&y| y == 0.0) {
                        return Err(TensorError::Domain {
                            op: "div",
                            detail: "division by zero".into(),
                        });
                    }
                    zip_map(a, b, |x, y| x / y)
                }
            })
        }
        ScalarMul(s) => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|x| x * s))
        }
        ScalarAdd(s) => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|x| x + s))
        }
        MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    Tensor::new(vec![m, n], matmul_buf(a.data(), b.data(), m, k, n))
                }
                _ => Err(TensorError::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                )),
            }
        }
        Conv2d3x3 { stride } => {
            let g = conv_geometry(op, inputs, *stride)?;
            let out = conv_forward(&g, inputs[0].data(), inputs[1].data(), inputs.get(2).map(|b| b.data()));
            let shape = if inputs[0].rank() == 3 {
                vec![g.out_ch, g.oh, g.ow]
            } else {
                vec![g.batch, g.out_ch, g.oh, g.ow]
            };
            Tensor::new(shape, out)
        }
        Relu => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|x| x.max(0.0)))
        }
        Sigmoid => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(sigmoid_scalar))
        }
        Softplus => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(softplus_scalar))
        }
        Exp => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(f64::exp))
        }
        Log => {
            expect_arity(op, inputs, 1)?;
            if let Some(bad) = inputs[0].data().iter().find(|&&x| x <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
            Ok(inputs[0].map(f64::ln))
        }
        SoftmaxAxis(axis) | LogSoftmaxAxis(axis) => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            let data = if matches!(op, SoftmaxAxis(_)) {
                softmax_buf(x.shape(), x.data(), *axis)
            } else {
                log_softmax_buf(x.shape(), x.data(), *axis)
            };
            Tensor::new(x.shape().to_vec(), data)
        }
        SumAxis(axis) | MeanAxis(axis) => {
            expect_arity(op, inputs, 1)?;
            check_axis(op, inputs[0], *axis)?;
            let s = reduce_sum(inputs[0], *axis);
            Ok(if matches!(op, MeanAxis(_)) {
                let n = inputs[0].shape()[*axis] as f64;
                s.map(|v| v / n)
            } else {
                s
            })
        }
        ConcatAxis(axis) => {
            let first = inputs
                .first()
                .ok_or_else(|| TensorError::shape("concat_axis", "no inputs"))?;
            check_axis(op, first, *axis)?;
            let mut total = 0;
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(TensorError::shape(
                        "concat_axis",
                        format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
                    ));
                }
                total += t.shape()[*axis];
            }
            let (outer, _, inner) = axis_blocks(first.shape(), *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::new(shape, data)
        }
        Reshape(shape) => {
            expect_arity(op, inputs, 1)?;
            inputs[0].reshaped(shape).map_err(|_| {
                TensorError::shape("reshape", format!("{:?} -> {shape:?}", inputs[0].shape()))
            })
        }
        Transpose2 => {
            expect_arity(op, inputs, 1)?;
            match *inputs[0].shape() {
                [r, c] => Tensor::new(vec![c, r], transpose_buf(inputs[0].data(), r, c)),
                _ => Err(TensorError::shape(
                    "transpose2",
                    format!("rank-2 input required, got {:?}", inputs[0].shape()),
                )),
            }
        }
        Broadcast(shape) => {
            expect_arity(op, inputs, 1)?;
            broadcast_forward(inputs[0], shape)
        }
    }
}

/// Gradients for each input given the output gradient `g`. Entries are
/// `None` where the input does not need one.
fn backward_rule(
    op: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    wants: &[bool],
) -> Result<Vec<Option<Tensor>>, TensorError> {
    use Primitive::*;
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    Ok(match op {
        Add => vec![Some(g.clone()), Some(g.clone())],
        Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Mul => vec![
            want(0).then(|| zip_map(g, inputs[1], |gv, b| gv * b)),
            want(1).then(|| zip_map(g, inputs[0], |gv, a| gv * a)),
        ],
        Div => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                want(0).then(|| zip_map(g, b, |gv, bv| gv / bv)),
                want(1).then(|| {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data())
                        .zip(b.data())
                        .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                        .collect();
                    Tensor::new(b.shape().to_vec(), data).expect("shape")
                }),
            ]
        }
        ScalarMul(s) => vec![Some(g.map(|v| v * s))],
        ScalarAdd(_) => vec![Some(g.clone())],
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            vec![
                want(0).then(|| {
                    let bt = transpose_buf(b.data(), k, n);
                    Tensor::new(vec![m, k], matmul_buf(g.data(), &bt, m, n, k)).expect("shape")
                }),
                want(1).then(|| {
                    let at = transpose_buf(a.data(), m, k);
                    Tensor::new(vec![k, n], matmul_buf(&at, g.data(), k, m, n)).expect("shape")
                }),
            ]
        }
        Conv2d3x3 { stride } => {
            let geo = conv_geometry(op, inputs, *stride)?;
            let (x, wt) = (inputs[0].data(), inputs[1].data());
            let gd = g.data();
            let in_plane = geo.h * geo.w;
            let out_plane = geo.oh * geo.ow;
            let mut dx = want(0).then(|| vec![0.0; x.len()]);
            let mut dw = want(1).then(|| vec![0.0; wt.len()]);
            for n in 0..geo.batch {
                for o in 0..geo.out_ch {
                    let go = &gd[(n * geo.out_ch + o) * out_plane..(n * geo.out_ch + o + 1) * out_plane];
                    for c in 0..geo.in_ch {
                        let base = (n * geo.in_ch + c) * in_plane;
                        let src = &x[base..base + in_plane];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let widx = ((o * geo.in_ch + c) * 3 + ky) * 3 + kx;
                                if let Some(dw) = dw.as_mut() {
                                    let mut acc = 0.0;
                                    conv_tap(&geo, ky, kx, |op, ip| acc += go[op] * src[ip]);
                                    dw[widx] += acc;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let wv = wt[widx];
                                    let dst = &mut dx[base..base + in_plane];
                                    conv_tap(&geo, ky, kx, |op, ip| dst[ip] += wv * go[op]);
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("shape")),
                dw.map(|d| Tensor::new(inputs[1].shape().to_vec(), d).expect("shape")),
            ];
            if inputs.len() == 3 {
                grads.push(want(2).then(|| {
                    let mut db = vec![0.0; geo.out_ch];
                    for n in 0..geo.batch {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let start = (n * geo.out_ch + o) * out_plane;
                            *acc += gd[start..start + out_plane].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(vec![geo.out_ch], db).expect("shape")
                }));
            }
            grads
        }
        Relu => vec![Some(zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Sigmoid => vec![Some(zip_map(g, out, |gv, y| gv * y * (1.0 - y)))],
        Softplus => vec![Some(zip_map(g, inputs[0], |gv, x| gv * sigmoid_scalar(x)))],
        Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Log => vec![Some(zip_map(g, inputs[0], |gv, x| gv / x))],
        SoftmaxAxis(axis) => {
            let prod = zip_map(g, out, |gv, y| gv * y);
            let dot = expand_axis(&reduce_sum(&prod, *axis), out.shape(), *axis, 1.0);
            let data = prod
                .data()
                .iter()
                .zip(out.data())
                .zip(dot.data())
                .map(|((&gy, &y), &d)| gy - y * d)
                .collect();
            vec![Some(Tensor::new(out.shape().to_vec(), data).expect("shape"))]
        }
        LogSoftmaxAxis(axis) => {
            let total = expand_axis(&reduce_sum(g, *axis), out.shape(), *axis, 1.0);
            let data = g
                .data()
                .iter()
                .zip(out.data())
                .zip(total.data())
                .map(|((&gv, &y), &t)| gv - y.exp() * t)
                .collect();
            vec![Some(Tensor::new(out.shape().to_vec(), data).expect("shape"))]
        }
        SumAxis(axis) => vec![Some(expand_axis(g, inputs[0].shape(), *axis, 1.0))],
        MeanAxis(axis) => {
            let n = inputs[0].shape()[*axis] as f64;
            vec![Some(expand_axis(g, inputs[0].shape(), *axis, 1.0 / n))]
        }
        ConcatAxis(axis) => {
            let (outer, _, inner) = axis_blocks(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let extent = t.shape()[*axis];
                if want(i) {
                    let mut data = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[start..start + extent * inner]);
                    }
                    grads.push(Some(Tensor::new(t.shape().to_vec(), data).expect("shape")));
                } else {
                    grads.push(None);
                }
                offset += extent;
            }
            grads
        }
        Reshape(_) => vec![Some(g.reshaped(inputs[0].shape())?)],
        Transpose2 => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            vec![Some(Tensor::new(vec![c, r], transpose_buf(g.data(), r, c))?)]
        }
        Broadcast(_) => vec![Some(broadcast_backward(g, inputs[0].shape()))],
    })
}

/// Compares the tape gradient of a scalar function against central finite
/// differences, returning the maximum over coordinates of
/// `|autodiff - fd| / (|fd| + 1e-12)`.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Contract(format!("finite-difference step must be positive, got {eps}")).into());
    }
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let loss = f(&tape, input)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads.take(input).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64, E> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        Ok(f(&tape, v)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
