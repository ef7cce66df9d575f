//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. `Tape::backward` walks the nodes once in reverse order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, Conv2dGeom, Conv3dGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: Conv2dGeom },
    Conv3d { x: usize, w: usize, b: Option<usize>, taps: Rc<[[isize; 3]]>, geom: Conv3dGeom },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, T),
    Abs(usize),
    Clamp(usize, T, T),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize, len: usize },
    AvgPool2(usize),
    Upsample2(usize),
    PixelShuffle { x: usize, r: usize, to_space: bool },
    Warp { src: usize, flow: usize },
    StraightThrough(usize),
    Sum(usize),
    Reshape(usize),
    BceLogits { logits: usize, targets: Rc<Tensor<T>> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `v` when no path reached it.
    pub fn wrt_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that gradients are tracked for.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that is treated as constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn req(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Computes gradients of `root` (seeded with ones) with respect to
    /// every recorded value that requires them.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));
        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let req = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.as_ref();
    let out = nodes[id].value.as_ref();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let need = [req(*x), req(*w), b.map(req).unwrap_or(false)];
            let cg = kernels::conv2d_backward(val(*x), val(*w), g, geom, need);
            if let Some(dx) = cg.dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = cg.dw {
                accumulate(grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(grads, *b, db);
            }
        }
        Op::Conv3d { x, w, b, taps, geom } => {
            let need = [req(*x), req(*w), b.map(req).unwrap_or(false)];
            let cg = kernels::conv3d_backward(val(*x), val(*w), g, taps, geom, need);
            if let Some(dx) = cg.dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = cg.dw {
                accumulate(grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                accumulate(grads, *a, zip_map(g, val(*b), |gv, bv| gv * bv));
            }
            if req(*b) {
                accumulate(grads, *b, zip_map(g, val(*a), |gv, av| gv * av));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, *a, g.map(|v| v * c));
        }
        Op::AddConst(a) => accumulate(grads, *a, g.clone()),
        Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, out, |gv, s| gv * s * (T::one() - s))),
        Op::Tanh(a) => accumulate(grads, *a, zip_map(g, out, |gv, t| gv * (T::one() - t * t))),
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            accumulate(grads, *a, zip_map(g, val(*a), |gv, x| if x > T::zero() { gv } else { gv * slope }));
        }
        Op::Abs(a) => accumulate(grads, *a, zip_map(g, val(*a), |gv, x| gv * x.signum() * T::of(if x == T::zero() { 0.0 } else { 1.0 }))),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            accumulate(grads, *a, zip_map(g, val(*a), |gv, x| if x > lo && x < hi { gv } else { T::zero() }));
        }
        Op::Concat(parts) => {
            let [n, _, h, w] = out.dims4().expect("concat output");
            let hw = h * w;
            let total_c = out.shape()[1];
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p].value.shape()[1];
                if req(p) {
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for b in 0..n {
                        let s = (b * total_c + off) * hw;
                        d.extend_from_slice(&g.data()[s..s + pc * hw]);
                    }
                    accumulate(grads, p, Tensor::new(nodes[p].value.shape(), d).expect("concat grad"));
                }
                off += pc;
            }
        }
        Op::Slice { x, start, len } => {
            let xs = val(*x).shape().to_vec();
            let (n, c) = (xs[0], xs[1]);
            let inner: usize = xs[2..].iter().product();
            let mut d = vec![T::zero(); n * c * inner];
            for b in 0..n {
                let src = &g.data()[b * len * inner..(b + 1) * len * inner];
                d[(b * c + start) * inner..(b * c + start + len) * inner].copy_from_slice(src);
            }
            accumulate(grads, *x, Tensor::new(&xs, d).expect("slice grad"));
        }
        Op::AvgPool2(a) => accumulate(grads, *a, kernels::avg_pool2_backward(g, val(*a).shape())),
        Op::Upsample2(a) => accumulate(grads, *a, kernels::upsample2_backward(g, val(*a).shape())),
        Op::PixelShuffle { x, r, to_space } => {
            accumulate(grads, *x, kernels::pixel_shuffle(g, *r, !*to_space).expect("shuffle grad"));
        }
        Op::Warp { src, flow } => {
            let (ds, df) = kernels::warp_backward(val(*src), val(*flow), g, [req(*src), req(*flow)]);
            if let Some(ds) = ds {
                accumulate(grads, *src, ds);
            }
            if let Some(df) = df {
                accumulate(grads, *flow, df);
            }
        }
        Op::StraightThrough(a) => accumulate(grads, *a, g.clone()),
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, g.clone().reshape(val(*a).shape()).expect("reshape grad"));
        }
        Op::BceLogits { logits, targets } => {
            let gv = g.item();
            accumulate(grads, *logits, zip_map(val(*logits), targets, |z, t| gv * (sigmoid(z) - t)));
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shape")
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: operand shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.req(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// 2-D convolution, `self` is `[N,Cin,H,W]`, `w` is `[Cout,Cin,kh,kw]`.
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), w.value());
        let geom = Conv2dGeom::new(xv.shape(), wv.shape(), stride, pad)?;
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", bv.shape(), geom.cout));
            }
        }
        let out = kernels::conv2d_forward(&xv, &wv, bv.as_deref(), &geom);
        let rg = self.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.tape.push(out, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg))
    }

    /// Same-size 3-D convolution over an explicit tap list, zero padded.
    /// `self` is `[N,Cin,D,H,W]`, `w` is `[Cout,Cin,taps]`.
    pub fn conv3d_taps(self, w: Var<'t, T>, b: Option<Var<'t, T>>, taps: Rc<[[isize; 3]]>) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), w.value());
        let geom = Conv3dGeom::new(xv.shape(), wv.shape(), taps.len())?;
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(shape_err!("conv3d bias shape {:?}, expected [{}]", bv.shape(), geom.cout));
            }
        }
        let out = kernels::conv3d_forward(&xv, &wv, bv.as_deref(), &taps, &geom);
        let rg = self.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.tape.push(out, Op::Conv3d { x: self.id, w: w.id, b: b.map(|b| b.id), taps, geom }, rg))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddConst(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        let v = self.value().map(|x| if x > T::zero() { x } else { x * s });
        self.unary(v, Op::LeakyRelu(self.id, s))
    }

    pub fn abs(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Channel-axis concatenation of rank-4 tensors.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tape = first.tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let [n, _, h, w] = vals[0].dims4()?;
        let mut total_c = 0;
        for v in &vals {
            let [vn, vc, vh, vw] = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err!("concat: {:?} is not aligned with {:?}", v.shape(), vals[0].shape()));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        Ok(tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 || start + len > s[1] {
            return Err(shape_err!("slice {start}..{} out of range for {:?}", start + len, s));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            data.extend_from_slice(&v.data()[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[1] = len;
        Ok(self.unary(Tensor::new(&shape, data)?, Op::Slice { x: self.id, start, len }))
    }

    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let v = kernels::avg_pool2(&self.value())?;
        Ok(self.unary(v, Op::AvgPool2(self.id)))
    }

    pub fn upsample2(self) -> Result<Var<'t, T>> {
        let v = kernels::upsample2(&self.value())?;
        Ok(self.unary(v, Op::Upsample2(self.id)))
    }

    pub fn depth_to_space(self, r: usize) -> Result<Var<'t, T>> {
        let v = kernels::pixel_shuffle(&self.value(), r, true)?;
        Ok(self.unary(v, Op::PixelShuffle { x: self.id, r, to_space: true }))
    }

    pub fn space_to_depth(self, r: usize) -> Result<Var<'t, T>> {
        let v = kernels::pixel_shuffle(&self.value(), r, false)?;
        Ok(self.unary(v, Op::PixelShuffle { x: self.id, r, to_space: false }))
    }

    /// Backward bilinear warp of `self` by `flow` (`[N,2,H,W]`, dx then dy).
    pub fn warp(self, flow: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = kernels::warp_forward(&self.value(), &flow.value())?;
        Ok(self.binary(flow, v, Op::Warp { src: self.id, flow: flow.id }))
    }

    /// Forward value `values`, gradient passed to `self` unchanged.
    pub fn straight_through(self, values: Tensor<T>) -> Result<Var<'t, T>> {
        if values.shape() != self.value().shape() {
            return Err(shape_err!("straight-through values {:?} vs input {:?}", values.shape(), self.shape()));
        }
        Ok(self.unary(values, Op::StraightThrough(self.id)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Sum over positions of the binary cross-entropy of `self` (logits)
    /// against targets in `[0,1]`.
    pub fn bce_with_logits_sum(self, targets: Tensor<T>) -> Result<Var<'t, T>> {
        let z = self.value();
        same_shape("bce", &z, &targets)?;
        let total: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        Ok(self.unary(Tensor::scalar(total), Op::BceLogits { logits: self.id, targets: Rc::new(targets) }))
    }
}

/// Named parameters bound onto a tape for one forward/backward pass.
pub struct Bound<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn new(tape: &'t Tape<T>) -> Self {
        Bound { tape, vars: BTreeMap::new() }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn insert(&mut self, name: &str, v: Var<'t, T>) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars.get(name).copied().ok_or_else(|| crate::Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }
}

impl<'t> Bound<'t, f32> {
    /// Gradients of every trainable bound parameter that the root reached.
    pub fn collect_grads(&self, grads: &Grads<f32>) -> super::GradMap {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.wrt(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
