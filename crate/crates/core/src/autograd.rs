//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its forward value plus whatever the
//! backward rule needs. Nodes only ever reference earlier nodes, so walking
//! the tape backwards from the root visits them in reverse topological order.
//! Gradients from fan-out are summed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, Conv2dParams, ConvGeom};
use crate::ops::norm::{batchnorm_backward, batchnorm_forward, BnConfig, BnSaved};
use crate::ops::resample::{
    global_avg_pool_forward, maxpool2x2_forward, upsample_bilinear_backward, upsample_bilinear_forward,
};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// Entries for inputs with `need[i] == false` may be `None`.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], need: &[bool])
        -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Act(Var, Activation),
    Binary(Var, Var, BinaryOp),
    Scale(Var, T),
    Sum(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    GlobalAvgPool(Var),
    Conv1dChannels {
        x: Var,
        w: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ExpandChannels(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Binary(_, _, BinaryOp::Add) => "add",
            Op::Binary(_, _, BinaryOp::Mul) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat_channels",
            Op::Slice { .. } => "split_channels",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Upsample(_) => "upsample_bilinear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Conv1dChannels { .. } => "conv1d_channels",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ExpandChannels(_) => "expand_channels",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Act(x, _)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Slice { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Upsample(x)
            | Op::GlobalAvgPool(x)
            | Op::ExpandChannels(x) => vec![*x],
            Op::Binary(a, b, _) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Conv1dChannels { x, w } => vec![*x, *w],
            Op::ScaleChannels { x, s } => vec![*x, *s],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph. One tape per forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, requires_grad, op)
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to
    /// `v`. `None` when `v` does not require grad or was unreachable.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`grad`](Self::grad) but unreachable values report zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_vec(&shape, g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(&shape).expect("value shape is valid"),
        }
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).dims4(op)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let xd = self.dims4(x, "conv2d")?;
        let geom = ConvGeom::new(xd, self.value(w).shape(), p)?;
        if let Some(b) = b {
            let bl = self.value(b).numel();
            if bl != geom.cout {
                return Err(Error::shape("conv2d", "bias length", geom.cout, bl));
            }
        }
        let y = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let y = Tensor::from_vec(&geom.out_shape(), y)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }))
    }

    /// Batch normalization; running statistics are read in eval mode and
    /// updated in place in training mode.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        cfg: BnConfig,
    ) -> Result<Var> {
        let dims = self.dims4(x, "batchnorm2d")?;
        let (y, saved) = batchnorm_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            cfg,
        )?;
        let y = Tensor::from_vec(&dims, y)?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, saved }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(y, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Elementwise `a ∘ b`. Shapes must match unless one side holds a
    /// single element, which is broadcast.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryOp) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = if av.shape() == bv.shape() || bv.numel() == 1 {
            av.shape().to_vec()
        } else if av.numel() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::shape(
                "elementwise_binary",
                "operand shape",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        };
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let at = |i: usize| ad[if ad.len() == 1 { 0 } else { i }];
        let bt = |i: usize| bd[if bd.len() == 1 { 0 } else { i }];
        let data = (0..n)
            .map(|i| match kind {
                BinaryOp::Add => at(i) + bt(i),
                BinaryOp::Mul => at(i) * bt(i),
            })
            .collect();
        let y = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(y, Op::Binary(a, b, kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid(OP, "no tensors to concatenate"))?;
        let [n, _, h, w] = self.dims4(first, OP)?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.dims4(p, OP)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    OP,
                    "(N,H,W)",
                    format!("({n},{h},{w})"),
                    format!("({pn},{ph},{pw})"),
                ));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                data.extend_from_slice(&pv.data()[b * pc * plane..][..pc * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, total_c, h, w], data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        const OP: &str = "split_channels";
        let [n, c, h, w] = self.dims4(x, OP)?;
        if sizes.contains(&0) {
            return Err(Error::invalid(OP, "split sizes must be positive"));
        }
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::shape(OP, "sum of split sizes", c, total));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            let src = self.value(x).data();
            let mut data = Vec::with_capacity(n * len * plane);
            for b in 0..n {
                data.extend_from_slice(&src[(b * c + start) * plane..][..len * plane]);
            }
            let y = Tensor::from_vec(&[n, len, h, w], data)?;
            out.push(self.push(y, Op::Slice { x, start }));
            start += len;
        }
        Ok(out)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                "spatial extents",
                "even",
                format!("{h}x{w}"),
            ));
        }
        let (y, argmax) = maxpool2x2_forward(self.value(x).data(), [n, c, h, w]);
        let y = Tensor::from_vec(&[n, c, h / 2, w / 2], y)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = self.dims4(x, "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear", "output size must be positive"));
        }
        let y = upsample_bilinear_forward(self.value(x).data(), dims, out_h, out_w);
        let y = Tensor::from_vec(&[dims[0], dims[1], out_h, out_w], y)?;
        Ok(self.push(y, Op::Upsample(x)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "global_avg_pool")?;
        let y = global_avg_pool_forward(self.value(x).data(), [n, c, h, w]);
        let y = Tensor::from_vec(&[n, c, 1, 1], y)?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    /// 1-D cross-correlation along the channel axis with a shared odd-sized
    /// kernel and zero padding. `x` is read as `(N, C)`; trailing unit axes
    /// are allowed and preserved.
    pub fn conv1d_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        const OP: &str = "conv1d_channels";
        let k = self.value(w).numel();
        if k.is_multiple_of(2) {
            return Err(Error::shape(OP, "kernel size", "odd", k));
        }
        let xv = self.value(x);
        let n = xv.shape()[0];
        if xv.shape()[2..].iter().any(|&d| d != 1) {
            return Err(Error::shape(OP, "trailing axes", 1, format!("{:?}", xv.shape())));
        }
        let c = xv.numel() / n;
        let y = conv1d_channels_forward(xv.data(), self.value(w).data(), n, c);
        let y = Tensor::from_vec(xv.shape(), y)?;
        Ok(self.push(y, Op::Conv1dChannels { x, w }))
    }

    /// Scales each `(n, c)` plane of `x` by `s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "scale_channels")?;
        let sv = self.value(s);
        if sv.numel() != n * c {
            return Err(Error::shape("scale_channels", "scale length", n * c, sv.numel()));
        }
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(sv.data())
            .flat_map(|(p, &k)| p.iter().map(move |&v| v * k))
            .collect();
        let y = Tensor::from_vec(&[n, c, h, w], data)?;
        Ok(self.push(y, Op::ScaleChannels { x, s }))
    }

    /// Repeats a single-channel map `channels` times.
    pub fn expand_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "expand_channels")?;
        if c != 1 {
            return Err(Error::shape("expand_channels", "input channels", 1, c));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for _ in 0..channels {
                data.extend_from_slice(&src[b * plane..][..plane]);
            }
        }
        let y = Tensor::from_vec(&[n, channels, h, w], data)?;
        Ok(self.push(y, Op::ExpandChannels(x)))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Back-propagates from a single-element `root`. The tape may be
    /// differentiated once; record a fresh forward pass to differentiate again.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already differentiated; run a new forward pass".into(),
            ));
        }
        let numel = self.value(root).numel();
        if numel != 1 {
            return Err(Error::Backward(format!("root must be a scalar, got {numel} elements")));
        }
        self.consumed = true;
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(root.0 + 1, || None);
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        pending[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a = *a + *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Option<Vec<T>>)> {
        let node = &self.nodes[i];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv2d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    geom,
                    [need(*x), need(*w), b.is_some_and(need)],
                );
                let mut out = vec![(*x, grads.dx), (*w, grads.dw)];
                if let Some(b) = b {
                    out.push((*b, grads.db));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let dims = val(*x).dims4("batchnorm2d").expect("checked in forward");
                let (dx, dg, db) = batchnorm_backward(g, dims, val(*gamma).data(), saved);
                vec![(*x, Some(dx)), (*gamma, Some(dg)), (*beta, Some(db))]
            }
            Op::Act(x, Activation::Relu) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, Some(dx))]
            }
            Op::Act(x, Activation::Sigmoid) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                vec![(*x, Some(dx))]
            }
            Op::Binary(a, b, kind) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let pick = |d: &[T], i: usize| d[if d.len() == 1 { 0 } else { i }];
                let reduce = |full: Vec<T>, len: usize| {
                    if len == 1 && full.len() != 1 {
                        vec![full.into_iter().sum()]
                    } else {
                        full
                    }
                };
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| (gv * pick(bd, i), gv * pick(ad, i)))
                        .unzip(),
                };
                vec![(*a, Some(reduce(da, ad.len()))), (*b, Some(reduce(db, bd.len())))]
            }
            Op::Scale(x, k) => vec![(*x, Some(g.iter().map(|&v| v * *k).collect()))],
            Op::Sum(x) => vec![(*x, Some(vec![g[0]; val(*x).numel()]))],
            Op::Concat(parts) => {
                let [n, total_c, h, w] = node.value.dims4("concat_channels").unwrap();
                let plane = h * w;
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let pc = val(p).shape()[1];
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            d.extend_from_slice(&g[(b * total_c + start) * plane..][..pc * plane]);
                        }
                        start += pc;
                        (p, Some(d))
                    })
                    .collect()
            }
            Op::Slice { x, start } => {
                let [n, c, h, w] = val(*x).dims4("split_channels").unwrap();
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    d[(b * c + start) * plane..][..len * plane].copy_from_slice(&g[b * len * plane..][..len * plane]);
                }
                vec![(*x, Some(d))]
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                vec![(*x, Some(d))]
            }
            Op::Upsample(x) => {
                let dims = val(*x).dims4("upsample_bilinear").unwrap();
                let [_, _, oh, ow] = node.value.dims4("upsample_bilinear").unwrap();
                vec![(*x, Some(upsample_bilinear_backward(g, dims, oh, ow)))]
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4("global_avg_pool").unwrap();
                let area = T::from_usize(h * w).unwrap();
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / area, h * w))
                    .collect();
                vec![(*x, Some(d))]
            }
            Op::Conv1dChannels { x, w } => {
                let xv = val(*x);
                let n = xv.shape()[0];
                let c = xv.numel() / n;
                let (dx, dw) = conv1d_channels_backward(xv.data(), val(*w).data(), g, n, c);
                vec![(*x, Some(dx)), (*w, Some(dw))]
            }
            Op::ScaleChannels { x, s } => {
                let (xd, sd) = (val(*x).data(), val(*s).data());
                let plane = xd.len() / sd.len();
                let mut dx = Vec::with_capacity(xd.len());
                let mut ds = Vec::with_capacity(sd.len());
                for ((xp, gp), &k) in xd.chunks(plane).zip(g.chunks(plane)).zip(sd) {
                    dx.extend(gp.iter().map(|&gv| gv * k));
                    ds.push(xp.iter().zip(gp).map(|(&a, &b)| a * b).sum());
                }
                vec![(*x, Some(dx)), (*s, Some(ds))]
            }
            Op::ExpandChannels(x) => {
                let [n, c, h, w] = node.value.dims4("expand_channels").unwrap();
                let plane = h * w;
                let mut d = vec![T::zero(); n * plane];
                for b in 0..n {
                    let dst = &mut d[b * plane..][..plane];
                    for ch in 0..c {
                        let src = &g[(b * c + ch) * plane..][..plane];
                        dst.iter_mut().zip(src).for_each(|(a, &v)| *a = *a + v);
                    }
                }
                vec![(*x, Some(d))]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(rule.backward(&ins, &node.value, g, &needs))
                    .collect()
            }
        }
    }

    /// First recorded value containing NaN or infinity, described as
    /// `#index op-name`.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| format!("#{i} {} {:?}", n.op.name(), n.value.shape()))
    }

    /// Hash of every branch decision taken by non-smooth operations (ReLU
    /// sign pattern, max-pool argmax). Two forward passes with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn nonsmooth_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act(x, Activation::Relu) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Floating-point operations of the recorded forward pass, counting
    /// convolutions (`2·k·k·Cin/groups·Cout·H'·W'` plus bias adds), batch
    /// normalization (2 per element) and activations (1 per element).
    pub fn flop_count(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| {
                let out = node.value.numel() as u64;
                match &node.op {
                    Op::Conv2d { b, geom, .. } => {
                        let macs = (geom.kh * geom.kw * geom.cin_g()) as u64 * out;
                        2 * macs + if b.is_some() { out } else { 0 }
                    }
                    Op::BatchNorm { .. } => 2 * out,
                    Op::Act(..) => out,
                    _ => 0,
                }
            })
            .sum()
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn conv1d_channels_forward<T: Scalar>(x: &[T], w: &[T], n: usize, c: usize) -> Vec<T> {
    let pad = (w.len() - 1) / 2;
    let mut y = vec![T::zero(); n * c];
    for b in 0..n {
        let (xs, ys) = (&x[b * c..][..c], &mut y[b * c..][..c]);
        for (o, out) in ys.iter_mut().enumerate() {
            for (j, &wv) in w.iter().enumerate() {
                if let Some(src) = (o + j).checked_sub(pad).filter(|&s| s < c) {
                    *out = *out + wv * xs[src];
                }
            }
        }
    }
    y
}

fn conv1d_channels_backward<T: Scalar>(x: &[T], w: &[T], g: &[T], n: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let pad = (w.len() - 1) / 2;
    let mut dx = vec![T::zero(); n * c];
    let mut dw = vec![T::zero(); w.len()];
    for b in 0..n {
        for o in 0..c {
            let gv = g[b * c + o];
            for (j, &wv) in w.iter().enumerate() {
                if let Some(src) = (o + j).checked_sub(pad).filter(|&s| s < c) {
                    dx[b * c + src] = dx[b * c + src] + wv * gv;
                    dw[j] = dw[j] + x[b * c + src] * gv;
                }
            }
        }
    }
    (dx, dw)
}
