//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every backward rule is itself written with tape operations, so adjoints
//! computed with `create_graph = true` are ordinary tape values that can be
//! differentiated again. The gradient-norm penalty relies on this.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, axis_extents, ConvGeometry, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    /// Piecewise-linear ops (leaky ReLU, clamp): adjoint is `g * mask`.
    Masked(Var, Rc<Tensor>),
    Sum(Var),
    Expand(Var),
    SumAxis(Var, usize),
    BroadcastAxis(Var, usize),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Pad { src: Var, axis: usize, start: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    ConvInputGrad { gy: Var, k: Var, geom: ConvGeometry },
    ConvKernelGrad { x: Var, gy: Var, geom: ConvGeometry },
    Gather(Var, Rc<[usize]>),
    Scatter(Var, Rc<[usize]>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Node indices are execution order; adjoint replay walks them in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// First-order gradients of a scalar with respect to leaf variables.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(w, _)| *w == v).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn derived(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.recording.get() && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, if rg { op } else { Op::Leaf }, rg)
    }

    // ----- elementwise -----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "add", |x, y| x + y)?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "sub", |x, y| x - y)?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "mul", |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "div", |x, y| x / y)?;
        Ok(self.derived(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.derived(v, Op::Scale(a, c), &[a])
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.derived(v, Op::Shift(a), &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a).expect("same variable always has matching shape")
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.derived(v, Op::Exp(a), &[a])
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.derived(v, Op::Log(a), &[a])
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.derived(v, Op::Sqrt(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let x = self.value(a);
        let mask = x.map(|v| if v > 0.0 { 1.0 } else { slope });
        let v = x.zip_map(&mask, "leaky_relu", |v, m| v * m).expect("same shape");
        self.derived(v, Op::Masked(a, Rc::new(mask)), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let mask = x.map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
        let v = x.map(|v| v.clamp(lo, hi));
        self.derived(v, Op::Masked(a, Rc::new(mask)), &[a])
    }

    /// Inverted dropout: zero each element with probability `rate`, scale survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a);
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    // ----- linear algebra -----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = Tensor::new(vec![m, n], tensor::matmul(av.data(), bv.data(), m, k, n))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let v = Tensor::new(vec![s[1], s[0]], tensor::transpose(av.data(), s[0], s[1]))?;
        Ok(self.derived(v, Op::Transpose(a), &[a]))
    }

    // ----- reductions and broadcasts -----

    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a one-element variable to `shape`.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).item()?;
        let v = Tensor::full(shape, x);
        Ok(self.derived(v, Op::Expand(a), &[a]))
    }

    /// Sum out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = axis_extents(s, axis);
        let mut out = vec![0.0; outer * inner];
        let d = av.data();
        for o in 0..outer {
            for i in 0..n {
                let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.derived(v, Op::SumAxis(a, axis), &[a]))
    }

    /// Insert a new `axis` of length `size`, repeating the values along it.
    pub fn broadcast_axis(&self, a: Var, axis: usize, size: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis > s.len() || size == 0 {
            return Err(Error::dim(
                "broadcast_axis",
                format!("cannot insert axis {axis} of size {size} into {s:?}"),
            ));
        }
        let mut shape = s.to_vec();
        shape.insert(axis, size);
        let (outer, _, inner) = axis_extents(&shape, axis);
        let d = av.data();
        let mut out = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            for _ in 0..size {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.derived(v, Op::BroadcastAxis(a, axis), &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(a), &[a]))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_extents(s, axis);
        let d = av.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.derived(v, Op::Slice { src: a, axis, start }, &[a]))
    }

    /// Embed into zeros of length `total` along `axis` at offset `start` (adjoint of `slice`).
    pub fn pad(&self, a: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start + s[axis] > total {
            return Err(Error::dim(
                "pad",
                format!("cannot place {s:?} at {start} in length {total} on axis {axis}"),
            ));
        }
        let (outer, len, inner) = axis_extents(s, axis);
        let d = av.data();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.derived(v, Op::Pad { src: a, axis, start }, &[a]))
    }

    /// Add a vector along `axis` of `x` (bias broadcast).
    pub fn add_along(&self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        let bshape = self.shape(bias);
        if axis >= shape.len() || bshape != [shape[axis]] {
            return Err(Error::dim(
                "add_along",
                format!("bias {bshape:?} does not match axis {axis} of {shape:?}"),
            ));
        }
        let mut b = bias;
        for (ax, &d) in shape.iter().enumerate() {
            if ax != axis {
                b = self.broadcast_axis(b, ax, d)?;
            }
        }
        self.add(x, b)
    }

    // ----- convolution and pooling -----

    pub fn conv2d(&self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let geom = ConvGeometry::new(xv.shape(), kv.shape(), stride, pad)?;
        let v = Tensor::new(geom.output_shape().to_vec(), geom.forward(xv.data(), kv.data()))?;
        Ok(self.derived(v, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    fn conv_input_grad(&self, gy: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let (gv, kv) = (self.value(gy), self.value(k));
        let v = Tensor::new(geom.input_shape().to_vec(), geom.input_grad(gv.data(), kv.data()))?;
        Ok(self.derived(v, Op::ConvInputGrad { gy, k, geom }, &[gy, k]))
    }

    fn conv_kernel_grad(&self, x: Var, gy: Var, geom: ConvGeometry) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gy));
        let v = Tensor::new(geom.kernel_shape().to_vec(), geom.kernel_grad(xv.data(), gv.data()))?;
        Ok(self.derived(v, Op::ConvKernelGrad { x, gy, geom }, &[x, gy]))
    }

    /// Non-overlapping `size×size` max pooling over the last two axes of a rank-4 input.
    pub fn max_pool(&self, x: Var, size: usize) -> Result<Var> {
        let xv = self.value(x);
        let (idx, shape) = tensor::max_pool_indices(xv.data(), xv.shape(), size)?;
        self.gather(x, idx.into(), &shape)
    }

    fn gather(&self, a: Var, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let d = av.data();
        let v = Tensor::new(shape.to_vec(), idx.iter().map(|&i| d[i]).collect())?;
        Ok(self.derived(v, Op::Gather(a, idx), &[a]))
    }

    fn scatter(&self, a: Var, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut out = Tensor::zeros(shape);
        let o = out.data_mut();
        for (&i, &x) in idx.iter().zip(av.data()) {
            o[i] += x;
        }
        Ok(self.derived(out, Op::Scatter(a, idx), &[a]))
    }

    // ----- composites -----

    /// Log-softmax over the last axis, max-shifted for stability.
    pub fn log_softmax(&self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape().to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dim("log_softmax", "scalar input has no class axis"))?;
        let axis = shape.len() - 1;
        let mut shift = vec![0.0; lv.len()];
        for (row, out) in lv.data().chunks(last).zip(shift.chunks_mut(last)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.fill(m);
        }
        let shift = self.constant(Tensor::new(shape, shift)?);
        let shifted = self.sub(logits, shift)?;
        let lse = self.ln(self.sum_axis(self.exp(shifted), axis)?);
        let lse = self.broadcast_axis(lse, axis, last)?;
        self.sub(shifted, lse)
    }

    pub fn softmax(&self, logits: Var) -> Result<Var> {
        Ok(self.exp(self.log_softmax(logits)?))
    }

    // ----- differentiation -----

    /// Adjoints of `loss` with respect to `wrt`.
    ///
    /// With `create_graph` the returned variables stay connected to the
    /// tape and can be differentiated again. `None` marks an input with no
    /// path to `loss`.
    pub fn gradients(&self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        let len = self.len();
        if loss.0 >= len {
            return Err(Error::Contract(format!("loss {loss:?} is not on this tape")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if let Some(w) = wrt.iter().find(|w| w.0 >= len) {
            return Err(Error::Contract(format!("{w:?} is not on this tape")));
        }

        let prev = self.recording.replace(create_graph);
        let result = self.replay(loss);
        self.recording.set(prev);
        let adj = result?;
        Ok(wrt
            .iter()
            .map(|w| adj.get(w.0).copied().flatten())
            .collect())
    }

    fn replay(&self, loss: Var) -> Result<Vec<Option<Var>>> {
        let mut adj: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed = self.constant(Tensor::full(&self.shape(loss), 1.0));
        adj[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            let out = Var(i);
            for (input, contrib) in self.backward_rule(&op, out, g)? {
                let slot = &mut adj[input.0];
                *slot = Some(match *slot {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(adj)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn backward_rule(&self, op: &Op, out: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    res.push((a, g));
                }
                if self.needs(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    res.push((a, g));
                }
                if self.needs(b) {
                    res.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    res.push((a, self.mul(g, b)?));
                }
                if self.needs(b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    res.push((a, self.div(g, b)?));
                }
                if self.needs(b) {
                    let t = self.div(self.mul(g, out)?, b)?;
                    res.push((b, self.neg(t)));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(g, c))),
            Op::Shift(a) => res.push((a, g)),
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    res.push((a, self.matmul(g, self.transpose(b)?)?));
                }
                if self.needs(b) {
                    res.push((b, self.matmul(self.transpose(a)?, g)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Log(a) => res.push((a, self.div(g, a)?)),
            Op::Sqrt(a) => res.push((a, self.div(self.scale(g, 0.5), out)?)),
            Op::Sigmoid(a) => {
                let one_minus = self.shift(self.neg(out), 1.0);
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Masked(a, ref mask) => {
                let m = self.constant((**mask).clone());
                res.push((a, self.mul(g, m)?));
            }
            Op::Sum(a) => res.push((a, self.expand(g, &self.shape(a))?)),
            Op::Expand(a) => res.push((a, self.reshape(self.sum(g), &self.shape(a))?)),
            Op::SumAxis(a, axis) => {
                let n = self.shape(a)[axis];
                res.push((a, self.broadcast_axis(g, axis, n)?));
            }
            Op::BroadcastAxis(a, axis) => res.push((a, self.sum_axis(g, axis)?)),
            Op::Reshape(a) => res.push((a, self.reshape(g, &self.shape(a))?)),
            Op::Slice { src, axis, start } => {
                let total = self.shape(src)[axis];
                res.push((src, self.pad(g, axis, start, total)?));
            }
            Op::Pad { src, axis, start } => {
                let len = self.shape(src)[axis];
                res.push((src, self.slice(g, axis, start, len)?));
            }
            Op::Conv2d { x, k, geom } => {
                if self.needs(x) {
                    res.push((x, self.conv_input_grad(g, k, geom)?));
                }
                if self.needs(k) {
                    res.push((k, self.conv_kernel_grad(x, g, geom)?));
                }
            }
            Op::ConvInputGrad { gy, k, geom } => {
                // out = Σ gy ⋆ k, bilinear in (gy, k)
                if self.needs(gy) {
                    res.push((gy, self.conv_from(g, k, geom)?));
                }
                if self.needs(k) {
                    res.push((k, self.conv_kernel_grad(g, gy, geom)?));
                }
            }
            Op::ConvKernelGrad { x, gy, geom } => {
                if self.needs(x) {
                    res.push((x, self.conv_input_grad(gy, g, geom)?));
                }
                if self.needs(gy) {
                    res.push((gy, self.conv_from(x, g, geom)?));
                }
            }
            Op::Gather(a, ref idx) => {
                res.push((a, self.scatter(g, Rc::clone(idx), &self.shape(a))?));
            }
            Op::Scatter(a, ref idx) => {
                res.push((a, self.gather(g, Rc::clone(idx), &self.shape(a))?));
            }
        }
        Ok(res)
    }

    fn conv_from(&self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        self.conv2d(x, k, geom.stride, geom.pad)
    }

    /// First-order gradients of `loss` for every trainable leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let leaves: Vec<Var> = {
            let nodes = self.nodes.borrow();
            (0..=loss.0.min(nodes.len().saturating_sub(1)))
                .filter(|&i| nodes[i].requires_grad && matches!(nodes[i].op, Op::Leaf))
                .map(Var)
                .collect()
        };
        let adj = self.gradients(loss, &leaves, false)?;
        let grads = leaves
            .into_iter()
            .zip(adj)
            .filter_map(|(v, g)| g.map(|g| (v, (*self.value(g)).clone())))
            .collect();
        Ok(Gradients { grads })
    }

    /// `Σ_θ ‖∂out/∂θ‖²` as a differentiable scalar.
    ///
    /// Parameters must be trainable leaves on this tape; parameters with no
    /// path to `out` contribute zero.
    pub fn grad_norm_sq(&self, out: Var, params: &[Var]) -> Result<Var> {
        if params.is_empty() {
            return Err(Error::Contract("grad_norm_sq needs at least one parameter".into()));
        }
        let len = self.len();
        for p in params {
            if p.0 >= len || !self.requires_grad(*p) {
                return Err(Error::Contract(format!(
                    "{p:?} is not a trainable variable on this tape"
                )));
            }
        }
        let grads = self.gradients(out, params, true)?;
        let mut total = self.constant(Tensor::scalar(0.0));
        for g in grads.into_iter().flatten() {
            let sq = self.sum(self.square(g));
            total = self.add(total, sq)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&Tape, Var) -> Var, x: f64) -> f64 {
        let tape = Tape::new();
        let v = tape.param(Tensor::scalar(x));
        let y = f(&tape, v);
        let g = tape.backward(y).unwrap();
        g.get(v).unwrap().item().unwrap()
    }

    #[test]
    fn square_derivative() {
        assert_eq!(scalar_grad(|t, x| t.square(x), 3.0), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let v = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_do_not_record_ops() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
        assert_eq!(tape.backward(b).unwrap().len(), 0);
    }

    #[test]
    fn replay_without_graph_leaves_no_trainable_nodes() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.mul(x, x).unwrap();
        let before = tape.len();
        let g = tape.gradients(y, &[x], false).unwrap()[0].unwrap();
        assert!(tape.len() > before);
        assert!(!tape.requires_grad(g));
    }

    #[test]
    fn unreachable_param_gets_none() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let z = tape.param(Tensor::scalar(1.0));
        let y = tape.square(x);
        let g = tape.gradients(y, &[x, z], false).unwrap();
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }

    #[test]
    fn foreign_param_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.square(x);
        assert!(tape.grad_norm_sq(y, &[Var(999)]).is_err());
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(tape.grad_norm_sq(y, &[c]).is_err());
    }
}
