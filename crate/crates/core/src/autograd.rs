//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that requires them. A graph is meant
//! to live for one unrolled sequence (training) or one step (inference).

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Regression target for the GIoU loss: flat location index into a
/// `4 x H x W` regression map and the target box `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget<F> {
    pub loc: usize,
    pub target: [F; 4],
}

enum Op<F> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Deform {
        x: usize,
        off: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Sigmoid(usize),
    Tanh(usize),
    Silu(usize),
    ScaleChannels {
        x: usize,
        s: usize,
    },
    ScaleSpatial {
        x: usize,
        s: usize,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    GlobalAvg(usize),
    GlobalMax {
        x: usize,
        arg: Vec<usize>,
    },
    ChannelMean(usize),
    ChannelMax {
        x: usize,
        arg: Vec<usize>,
    },
    Upsample2(usize),
    AdaIn {
        x: usize,
        y: usize,
        eps: F,
    },
    Sum(usize),
    Mse(usize, usize),
    Bce {
        logits: usize,
        target: Tensor<F>,
        mask: Option<Tensor<F>>,
    },
    Giou {
        reg: usize,
        stride: F,
        targets: Vec<BoxTarget<F>>,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation tape.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Scalar> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Scalar> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: impl Into<Arc<Tensor<F>>>) -> Var<'_, F> {
        self.push_leaf(t.into(), true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, t: impl Into<Arc<Tensor<F>>>) -> Var<'_, F> {
        self.push_leaf(t.into(), false)
    }

    fn push_leaf(&self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, parents: &[usize]) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Arc<Tensor<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward needs a scalar root");
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), F::one()));

        let acc = |grads: &mut Vec<Option<Tensor<F>>>, id: usize, t: Tensor<F>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => g.add_assign(&t),
                slot => *slot = Some(t),
            }
        };

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let v = |i: usize| &*nodes[i].value;
            let rg = |i: usize| nodes[i].requires_grad;
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                &Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let r = kernels::conv2d_backward(
                        v(x),
                        v(w),
                        &g,
                        stride,
                        pad,
                        (rg(x), rg(w), b.is_some_and(rg)),
                    );
                    if let Some(dx) = r.dx {
                        acc(&mut grads, x, dx);
                    }
                    if let Some(dw) = r.dw {
                        acc(&mut grads, w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        acc(&mut grads, b, db);
                    }
                }
                &Op::Deform { x, off, w, b } => {
                    let r = kernels::deform_conv_backward(
                        v(x),
                        v(off),
                        v(w),
                        &g,
                        (rg(x), rg(off), rg(w), b.is_some_and(rg)),
                    );
                    if let Some(dx) = r.dx {
                        acc(&mut grads, x, dx);
                    }
                    if let Some(d) = r.doff {
                        acc(&mut grads, off, d);
                    }
                    if let Some(dw) = r.dw {
                        acc(&mut grads, w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        acc(&mut grads, b, db);
                    }
                }
                &Op::Add(a, b) => {
                    if rg(a) && rg(b) {
                        acc(&mut grads, a, g.clone());
                    } else if rg(a) {
                        acc(&mut grads, a, g);
                        continue;
                    }
                    acc(&mut grads, b, g);
                }
                &Op::Sub(a, b) => {
                    if rg(b) {
                        acc(&mut grads, b, g.map(|t| -t));
                    }
                    acc(&mut grads, a, g);
                }
                &Op::Mul(a, b) => {
                    if rg(a) {
                        acc(&mut grads, a, g.zip_map(v(b), |t, y| t * y));
                    }
                    if rg(b) {
                        acc(&mut grads, b, g.zip_map(v(a), |t, x| t * x));
                    }
                }
                &Op::Scale(a, s) => acc(&mut grads, a, g.map(|t| t * s)),
                &Op::Sigmoid(a) => {
                    let y = &*nodes[id].value;
                    acc(&mut grads, a, g.zip_map(y, |t, y| t * y * (F::one() - y)));
                }
                &Op::Tanh(a) => {
                    let y = &*nodes[id].value;
                    acc(&mut grads, a, g.zip_map(y, |t, y| t * (F::one() - y * y)));
                }
                &Op::Silu(a) => {
                    acc(
                        &mut grads,
                        a,
                        g.zip_map(v(a), |t, x| {
                            let s = kernels::sigmoid(x);
                            t * s * (F::one() + x * (F::one() - s))
                        }),
                    );
                }
                &Op::ScaleChannels { x, s } => {
                    let (c, h, w) = v(x).dims3();
                    let n = h * w;
                    let sv = v(s).data();
                    if rg(x) {
                        let mut dx = g.clone();
                        for ch in 0..c {
                            dx.data_mut()[ch * n..(ch + 1) * n]
                                .iter_mut()
                                .for_each(|t| *t *= sv[ch]);
                        }
                        acc(&mut grads, x, dx);
                    }
                    if rg(s) {
                        let xv = v(x).data();
                        let ds: Vec<F> = (0..c)
                            .map(|ch| {
                                (ch * n..(ch + 1) * n)
                                    .map(|i| g.data()[i] * xv[i])
                                    .sum()
                            })
                            .collect();
                        acc(&mut grads, s, Tensor::from_vec(v(s).shape(), ds).unwrap());
                    }
                }
                &Op::ScaleSpatial { x, s } => {
                    let (c, h, w) = v(x).dims3();
                    let n = h * w;
                    let sv = v(s).data();
                    if rg(x) {
                        let mut dx = g.clone();
                        for ch in 0..c {
                            for (t, &m) in dx.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(sv) {
                                *t *= m;
                            }
                        }
                        acc(&mut grads, x, dx);
                    }
                    if rg(s) {
                        let xv = v(x).data();
                        let mut ds = vec![F::zero(); n];
                        for ch in 0..c {
                            for i in 0..n {
                                ds[i] += g.data()[ch * n + i] * xv[ch * n + i];
                            }
                        }
                        acc(&mut grads, s, Tensor::from_vec(v(s).shape(), ds).unwrap());
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = v(p).numel();
                        if rg(p) {
                            let d = Tensor::from_vec(
                                v(p).shape(),
                                g.data()[offset..offset + len].to_vec(),
                            )
                            .unwrap();
                            acc(&mut grads, p, d);
                        }
                        offset += len;
                    }
                }
                &Op::Slice { x, start } => {
                    let (_, h, w) = v(x).dims3();
                    let mut dx = Tensor::zeros(v(x).shape());
                    let base = start * h * w;
                    dx.data_mut()[base..base + g.numel()].copy_from_slice(g.data());
                    acc(&mut grads, x, dx);
                }
                &Op::GlobalAvg(x) => {
                    let (c, h, w) = v(x).dims3();
                    let n = h * w;
                    let inv = F::one() / F::of(n as f64);
                    let dx = Tensor::from_fn(v(x).shape(), |i| g.data()[i / n] * inv);
                    debug_assert_eq!(g.numel(), c);
                    acc(&mut grads, x, dx);
                }
                Op::GlobalMax { x, arg } => {
                    let mut dx = Tensor::zeros(v(*x).shape());
                    for (ch, &i) in arg.iter().enumerate() {
                        dx.data_mut()[i] += g.data()[ch];
                    }
                    acc(&mut grads, *x, dx);
                }
                &Op::ChannelMean(x) => {
                    let (c, h, w) = v(x).dims3();
                    let n = h * w;
                    let inv = F::one() / F::of(c as f64);
                    let dx = Tensor::from_fn(v(x).shape(), |i| g.data()[i % n] * inv);
                    acc(&mut grads, x, dx);
                }
                Op::ChannelMax { x, arg } => {
                    let mut dx = Tensor::zeros(v(*x).shape());
                    for (i, &j) in arg.iter().enumerate() {
                        dx.data_mut()[j] += g.data()[i];
                    }
                    acc(&mut grads, *x, dx);
                }
                &Op::Upsample2(x) => {
                    let (c, h, w) = v(x).dims3();
                    let mut dx = Tensor::zeros(v(x).shape());
                    let w2 = 2 * w;
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..w2 {
                                dx.data_mut()[(ch * h + y / 2) * w + xx / 2] +=
                                    g.data()[(ch * 2 * h + y) * w2 + xx];
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::AdaIn { x, y, eps } => {
                    let (gx, gy) = kernels::adain_backward(v(x), v(y), eps, &g);
                    acc(&mut grads, x, gx);
                    acc(&mut grads, y, gy);
                }
                &Op::Sum(x) => {
                    let s = g.data()[0];
                    acc(&mut grads, x, Tensor::full(v(x).shape(), s));
                }
                &Op::Mse(a, b) => {
                    let n = F::of(v(a).numel() as f64);
                    let k = g.data()[0] * F::of(2.0) / n;
                    let d = v(a).zip_map(v(b), |p, q| (p - q) * k);
                    if rg(b) {
                        acc(&mut grads, b, d.map(|t| -t));
                    }
                    acc(&mut grads, a, d);
                }
                Op::Bce {
                    logits,
                    target,
                    mask,
                } => {
                    let s = g.data()[0];
                    let z = v(*logits);
                    let mut d = z.zip_map(target, |z, t| (kernels::sigmoid(z) - t) * s);
                    if let Some(m) = mask {
                        d = d.zip_map(m, |a, b| a * b);
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::Giou {
                    reg,
                    stride,
                    targets,
                } => {
                    let s = g.data()[0];
                    let r = v(*reg);
                    let mut d = Tensor::zeros(r.shape());
                    giou_backward(r, *stride, targets, s, &mut d);
                    acc(&mut grads, *reg, d);
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<F>> {
        Ref::map(self.graph.nodes.borrow(), |n| &*n[self.id].value)
    }

    pub fn value_arc(&self) -> Arc<Tensor<F>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, F> {
        self.graph.constant(self.value_arc())
    }

    fn same_shape(&self, other: &Var<'g, F>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn conv2d(&self, w: Var<'g, F>, b: Option<Var<'g, F>>, stride: usize, pad: usize) -> Self {
        let g = self.graph;
        let (x_v, w_v) = (g.val(self.id), g.val(w.id));
        let b_v = b.map(|b| g.val(b.id));
        assert_eq!(x_v.shape()[0], w_v.shape()[1], "conv2d input channels");
        let out = kernels::conv2d_forward(&x_v, &w_v, b_v.as_deref(), stride, pad);
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        g.push(
            out,
            Op::Conv {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            &parents,
        )
    }

    /// Stride-1 deformable convolution, padding `K / 2`.
    pub fn deform_conv(&self, off: Var<'g, F>, w: Var<'g, F>, b: Option<Var<'g, F>>) -> Self {
        let g = self.graph;
        let (x_v, o_v, w_v) = (g.val(self.id), g.val(off.id), g.val(w.id));
        let b_v = b.map(|b| g.val(b.id));
        let out = kernels::deform_conv_forward(&x_v, &o_v, &w_v, b_v.as_deref());
        let mut parents = vec![self.id, off.id, w.id];
        parents.extend(b.map(|b| b.id));
        g.push(
            out,
            Op::Deform {
                x: self.id,
                off: off.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            &parents,
        )
    }

    pub fn add(&self, other: Var<'g, F>) -> Self {
        self.same_shape(&other, "add");
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.push(out, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: Var<'g, F>) -> Self {
        self.same_shape(&other, "sub");
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.push(out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: Var<'g, F>) -> Self {
        self.same_shape(&other, "mul");
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.push(out, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, s: F) -> Self {
        let out = self.value().map(|a| a * s);
        self.graph.push(out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn sigmoid(&self) -> Self {
        let out = self.value().map(kernels::sigmoid);
        self.graph.push(out, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn tanh(&self) -> Self {
        let out = self.value().map(|a| a.tanh());
        self.graph.push(out, Op::Tanh(self.id), &[self.id])
    }

    pub fn silu(&self) -> Self {
        let out = self.value().map(|a| a * kernels::sigmoid(a));
        self.graph.push(out, Op::Silu(self.id), &[self.id])
    }

    /// Multiply every channel plane by the matching entry of `s` (`C` values).
    pub fn scale_channels(&self, s: Var<'g, F>) -> Self {
        let out = {
            let xv = self.value();
            let sv = s.value();
            let (c, h, w) = xv.dims3();
            assert_eq!(sv.numel(), c, "scale_channels: {} factors for {} channels", sv.numel(), c);
            let n = h * w;
            Tensor::from_fn(xv.shape(), |i| xv.data()[i] * sv.data()[i / n])
        };
        self.graph
            .push(out, Op::ScaleChannels { x: self.id, s: s.id }, &[self.id, s.id])
    }

    /// Multiply every channel by the spatial map `s` (`1 x H x W`).
    pub fn scale_spatial(&self, s: Var<'g, F>) -> Self {
        let out = {
            let xv = self.value();
            let sv = s.value();
            let (_, h, w) = xv.dims3();
            assert_eq!(sv.numel(), h * w, "scale_spatial: map size");
            let n = h * w;
            Tensor::from_fn(xv.shape(), |i| xv.data()[i] * sv.data()[i % n])
        };
        self.graph
            .push(out, Op::ScaleSpatial { x: self.id, s: s.id }, &[self.id, s.id])
    }

    /// Channel-wise concatenation of rank-3 tensors.
    pub fn concat(parts: &[Var<'g, F>]) -> Self {
        assert!(!parts.is_empty());
        let g = parts[0].graph;
        let (_, h, w) = parts[0].value().dims3();
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            let (pc, ph, pw) = v.dims3();
            assert_eq!((ph, pw), (h, w), "concat: spatial size mismatch");
            c += pc;
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::from_vec(&[c, h, w], data).unwrap();
        g.push(out, Op::Concat(ids.clone()), &ids)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let out = {
            let v = self.value();
            let (c, h, w) = v.dims3();
            assert!(start + len <= c, "slice_channels out of range");
            Tensor::from_vec(&[len, h, w], v.data()[start * h * w..(start + len) * h * w].to_vec())
                .unwrap()
        };
        self.graph.push(out, Op::Slice { x: self.id, start }, &[self.id])
    }

    /// Per-channel mean, shaped `C x 1 x 1`.
    pub fn global_avg_pool(&self) -> Self {
        let out = {
            let v = self.value();
            let (c, h, w) = v.dims3();
            let n = F::of((h * w) as f64);
            Tensor::from_fn(&[c, 1, 1], |ch| v.channel(ch).iter().copied().sum::<F>() / n)
        };
        self.graph.push(out, Op::GlobalAvg(self.id), &[self.id])
    }

    /// Per-channel maximum, shaped `C x 1 x 1`.
    pub fn global_max_pool(&self) -> Self {
        let (out, arg) = {
            let v = self.value();
            let (c, h, w) = v.dims3();
            let n = h * w;
            let mut arg = Vec::with_capacity(c);
            let mut out = Vec::with_capacity(c);
            for ch in 0..c {
                let (mut best, mut bi) = (F::neg_infinity(), 0);
                for (i, &x) in v.channel(ch).iter().enumerate() {
                    if x > best {
                        best = x;
                        bi = i;
                    }
                }
                arg.push(ch * n + bi);
                out.push(best);
            }
            (Tensor::from_vec(&[c, 1, 1], out).unwrap(), arg)
        };
        self.graph
            .push(out, Op::GlobalMax { x: self.id, arg }, &[self.id])
    }

    /// Mean across channels, shaped `1 x H x W`.
    pub fn channel_mean(&self) -> Self {
        let out = {
            let v = self.value();
            let (c, h, w) = v.dims3();
            let n = h * w;
            let inv = F::one() / F::of(c as f64);
            Tensor::from_fn(&[1, h, w], |i| {
                (0..c).map(|ch| v.data()[ch * n + i]).sum::<F>() * inv
            })
        };
        self.graph.push(out, Op::ChannelMean(self.id), &[self.id])
    }

    /// Maximum across channels, shaped `1 x H x W`.
    pub fn channel_max(&self) -> Self {
        let (out, arg) = {
            let v = self.value();
            let (c, h, w) = v.dims3();
            let n = h * w;
            let mut arg = Vec::with_capacity(n);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let (mut best, mut bi) = (F::neg_infinity(), i);
                for ch in 0..c {
                    let x = v.data()[ch * n + i];
                    if x > best {
                        best = x;
                        bi = ch * n + i;
                    }
                }
                arg.push(bi);
                out.push(best);
            }
            (Tensor::from_vec(&[1, h, w], out).unwrap(), arg)
        };
        self.graph
            .push(out, Op::ChannelMax { x: self.id, arg }, &[self.id])
    }

    /// Nearest-neighbour upsampling by two.
    pub fn upsample2(&self) -> Self {
        let out = {
            let v = self.value();
            let (c, h, w) = v.dims3();
            let (h2, w2) = (2 * h, 2 * w);
            Tensor::from_fn(&[c, h2, w2], |i| {
                let ch = i / (h2 * w2);
                let r = i % (h2 * w2);
                let (y, x) = (r / w2, r % w2);
                v.data()[(ch * h + y / 2) * w + x / 2]
            })
        };
        self.graph.push(out, Op::Upsample2(self.id), &[self.id])
    }

    /// Re-target the per-channel statistics of `self` to those of `style`.
    pub fn adain(&self, style: Var<'g, F>, eps: F) -> Self {
        self.same_shape(&style, "adain");
        let out = kernels::adain_forward(&self.value(), &style.value(), eps);
        self.graph.push(
            out,
            Op::AdaIn {
                x: self.id,
                y: style.id,
                eps,
            },
            &[self.id, style.id],
        )
    }

    pub fn sum(&self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mse(&self, other: Var<'g, F>) -> Self {
        self.same_shape(&other, "mse");
        let out = {
            let (a, b) = (self.value(), other.value());
            let n = F::of(a.numel() as f64);
            let s: F = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
            Tensor::scalar(s / n)
        };
        self.graph
            .push(out, Op::Mse(self.id, other.id), &[self.id, other.id])
    }

    /// Summed binary cross-entropy of logits `self` against `target`,
    /// optionally restricted by a 0/1 `mask`.
    pub fn bce_with_logits(&self, target: Tensor<F>, mask: Option<Tensor<F>>) -> Self {
        let out = {
            let z = self.value();
            assert_eq!(z.shape(), target.shape(), "bce target shape");
            let mut s = F::zero();
            for (i, (&z, &t)) in z.data().iter().zip(target.data()).enumerate() {
                let m = mask.as_ref().map_or(F::one(), |m| m.data()[i]);
                if m != F::zero() {
                    s += m * (kernels::softplus(z) - t * z);
                }
            }
            Tensor::scalar(s)
        };
        self.graph.push(
            out,
            Op::Bce {
                logits: self.id,
                target,
                mask,
            },
            &[self.id],
        )
    }

    /// Summed `1 - GIoU` between boxes decoded from the regression map
    /// `self` (`4 x H x W`) at the given locations and their targets.
    pub fn giou_loss(&self, stride: F, targets: Vec<BoxTarget<F>>) -> Self {
        let out = {
            let r = self.value();
            let mut s = F::zero();
            for t in &targets {
                let p = decode_box(&r, t.loc, stride);
                s += F::one() - giou(p, t.target);
            }
            Tensor::scalar(s)
        };
        self.graph.push(
            out,
            Op::Giou {
                reg: self.id,
                stride,
                targets,
            },
            &[self.id],
        )
    }
}

/// Box `[x1, y1, x2, y2]` decoded from a `4 x H x W` regression map at
/// flat location `loc`: centre `(g + 0.5 + d) * stride`, size
/// `exp(s) * stride`.
pub fn decode_box<F: Scalar>(reg: &Tensor<F>, loc: usize, stride: F) -> [F; 4] {
    let (_, h, w) = reg.dims3();
    let n = h * w;
    let (gy, gx) = (loc / w, loc % w);
    let half = F::of(0.5);
    let d = reg.data();
    let cx = (F::of(gx as f64) + half + d[loc]) * stride;
    let cy = (F::of(gy as f64) + half + d[n + loc]) * stride;
    let bw = d[2 * n + loc].exp() * stride;
    let bh = d[3 * n + loc].exp() * stride;
    [cx - bw * half, cy - bh * half, cx + bw * half, cy + bh * half]
}

/// Generalized IoU of two boxes with positive extent.
pub fn giou<F: Scalar>(a: [F; 4], b: [F; 4]) -> F {
    let zero = F::zero();
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(zero);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(zero);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = cw * ch;
    inter / union - (enclose - union) / enclose
}

fn giou_backward<F: Scalar>(
    reg: &Tensor<F>,
    stride: F,
    targets: &[BoxTarget<F>],
    scale: F,
    out: &mut Tensor<F>,
) {
    let (_, h, w) = reg.dims3();
    let n = h * w;
    let zero = F::zero();
    let one = F::one();
    let half = F::of(0.5);
    for t in targets {
        let a = decode_box(reg, t.loc, stride);
        let b = t.target;
        let iw_raw = a[2].min(b[2]) - a[0].max(b[0]);
        let ih_raw = a[3].min(b[3]) - a[1].max(b[1]);
        let iw = iw_raw.max(zero);
        let ih = ih_raw.max(zero);
        let inter = iw * ih;
        let (pw, ph) = (a[2] - a[0], a[3] - a[1]);
        let area_a = pw * ph;
        let area_b = (b[2] - b[0]) * (b[3] - b[1]);
        let union = area_a + area_b - inter;
        let cw = a[2].max(b[2]) - a[0].min(b[0]);
        let ch = a[3].max(b[3]) - a[1].min(b[1]);
        let enclose = cw * ch;

        let d_inter = one / union + inter / (union * union) - one / enclose;
        let d_area = -inter / (union * union) + one / enclose;
        let d_enc = -union / (enclose * enclose);

        // d intersection / d coordinate
        let (mut di, mut da, mut dc) = ([zero; 4], [zero; 4], [zero; 4]);
        if iw_raw > zero && ih_raw > zero {
            if a[0] > b[0] {
                di[0] = -ih;
            }
            if a[2] < b[2] {
                di[2] = ih;
            }
            if a[1] > b[1] {
                di[1] = -iw;
            }
            if a[3] < b[3] {
                di[3] = iw;
            }
        }
        da[0] = -ph;
        da[2] = ph;
        da[1] = -pw;
        da[3] = pw;
        if a[0] < b[0] {
            dc[0] = -ch;
        }
        if a[2] > b[2] {
            dc[2] = ch;
        }
        if a[1] < b[1] {
            dc[1] = -cw;
        }
        if a[3] > b[3] {
            dc[3] = cw;
        }
        // loss = 1 - giou
        let mut dl = [zero; 4];
        for k in 0..4 {
            dl[k] = -(d_inter * di[k] + d_area * da[k] + d_enc * dc[k]) * scale;
        }
        let d = reg.data();
        let bw = d[2 * n + t.loc].exp() * stride;
        let bh = d[3 * n + t.loc].exp() * stride;
        let o = out.data_mut();
        o[t.loc] += (dl[0] + dl[2]) * stride;
        o[n + t.loc] += (dl[1] + dl[3]) * stride;
        o[2 * n + t.loc] += (dl[2] - dl[0]) * half * bw;
        o[3 * n + t.loc] += (dl[3] - dl[1]) * half * bh;
    }
}
