//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every layer primitive appends a node holding its forward value plus
//! whatever it needs for the backward pass (im2col buffers, argmax
//! indices, dropout masks, softmax probabilities). [`Graph::backward`]
//! walks the nodes in reverse creation order, which is a valid
//! topological order because a node can only reference earlier nodes.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Conv2d,
    Dense,
    Add,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Concat,
    Dropout,
    SoftmaxCe,
    WeightedSum,
    Mean,
}

impl OpKind {
    pub const LAYERS: [OpKind; 11] = [
        OpKind::Conv2d,
        OpKind::Dense,
        OpKind::Add,
        OpKind::Relu,
        OpKind::MaxPool2d,
        OpKind::GlobalAvgPool,
        OpKind::Concat,
        OpKind::Dropout,
        OpKind::SoftmaxCe,
        OpKind::WeightedSum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Dense => "dense",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Concat => "concat",
            OpKind::Dropout => "dropout",
            OpKind::SoftmaxCe => "weighted_softmax_ce",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Mean => "mean",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::LAYERS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel offset for (row of the patch matrix, output position),
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, c: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> Option<usize> {
        let ih = (oh * self.stride + kh).checked_sub(self.padding)?;
        let iw = (ow * self.stride + kw).checked_sub(self.padding)?;
        (ih < self.height && iw < self.width).then(|| (c * self.height + ih) * self.width + iw)
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        alpha: T,
        probs: Vec<T>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Mean(Vec<Var>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense { .. } => OpKind::Dense,
            Op::Add(..) => OpKind::Add,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Concat(_) => OpKind::Concat,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCe,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
    force_param_grads: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
            force_param_grads: false,
            fault: None,
        }
    }

    /// Treat frozen parameters as differentiable too (needed when the
    /// gradient with respect to an activation downstream of frozen
    /// weights is the quantity of interest).
    pub fn with_forced_param_grads(mut self) -> Self {
        self.force_param_grads = true;
        self
    }

    /// Test hook: the backward rule of `kind` emits negated gradients.
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a leaf. Binding the same name twice
    /// returns the same node so gradients accumulate in one place.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(p.value.clone(), self.force_param_grads || !p.is_frozen());
        self.bound.insert(name.to_string(), v);
        self.bound_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.bound_order
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
    }

    // ----- layer primitives -------------------------------------------------

    /// Cross-correlation of a `C x H x W` input with `O x C x k x k` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be CHW, got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", format!("kernel must be OxCxkxk, got {ks:?}")));
        }
        if ks[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", ks[1], xs[0]),
            ));
        }
        if bs != [ks[0]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} vs {} output channels", ks[0])));
        }
        ensure(stride >= 1, || "conv2d stride must be >= 1".into())?;
        let k = ks[2];
        if xs[1] + 2 * padding < k || xs[2] + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{} (padding {padding})", xs[1], xs[2]),
            ));
        }
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            out_channels: ks[0],
            kernel: k,
            stride,
            padding,
            out_h: (xs[1] + 2 * padding - k) / stride + 1,
            out_w: (xs[2] + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let (rows, positions) = (geom.patch_len(), geom.positions());
        let mut out = Vec::with_capacity(geom.out_channels * positions);
        for &b in self.value(bias).data() {
            out.extend(std::iter::repeat(b).take(positions));
        }
        T::gemm(
            geom.out_channels,
            rows,
            positions,
            T::one(),
            self.value(kernel).data(),
            (rows as isize, 1),
            &cols,
            (positions as isize, 1),
            T::one(),
            &mut out,
            (positions as isize, 1),
        );
        let value = Tensor::new(vec![geom.out_channels, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &[input, kernel, bias],
        ))
    }

    /// `weight * input + bias` for a rank-1 input and `m x n` weight.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.rank() != 1 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::shape(
                "dense",
                format!("expected vector/matrix/vector, got {:?}/{:?}/{:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if n != x.len() || m != b.len() {
            return Err(Error::shape(
                "dense",
                format!("weight {m}x{n} against input {} and bias {}", x.len(), b.len()),
            ));
        }
        let mut out = b.data().to_vec();
        T::gemm(m, n, 1, T::one(), w.data(), (n as isize, 1), x.data(), (1, 1), T::one(), &mut out, (1, 1));
        Ok(self.push(Tensor::vector(out), Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Non-overlapping `size x size` max pooling; trailing rows/cols that
    /// do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(Error::shape("max_pool2d", format!("input must be CHW, got {:?}", v.shape())));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        if size == 0 || h < size || w < size {
            return Err(Error::shape("max_pool2d", format!("window {size} on {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let data = v.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = (ch * h + i * size + di) * w + j * size + dj;
                            if best == usize::MAX || data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }, &[x]))
    }

    /// Spatial mean per channel: `C x H x W -> C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(Error::shape("global_avg_pool", format!("input must be CHW, got {:?}", v.shape())));
        }
        let c = v.shape()[0];
        let hw = v.shape()[1] * v.shape()[2];
        let scale = T::one() / T::of_usize(hw);
        let out: Vec<T> = v.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * scale).collect();
        debug_assert_eq!(out.len(), c);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool(x), &[x]))
    }

    /// Concatenation along the leading axis, preserving argument order.
    /// Rank-1 inputs give a plain vector concat; CHW inputs with equal
    /// spatial extent give a channel concat.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of an empty list".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing extents {:?} vs {:?}", &v.shape()[1..], tail),
                ));
            }
            lead += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Inverted dropout. Identity in eval mode or with `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { input: x, mask }, &[x]))
    }

    /// Class-weighted softmax cross-entropy `-alpha * ln softmax(logits)[label]`.
    pub fn weighted_softmax_ce(&mut self, logits: Var, label: usize, alpha: T) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 || label >= z.len() {
            return Err(Error::shape(
                "weighted_softmax_ce",
                format!("label {label} against logits {:?}", z.shape()),
            ));
        }
        let probs = softmax(z.data());
        let loss = -alpha * log_softmax_at(z.data(), label);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                label,
                alpha,
                probs,
            },
            &[logits],
        ))
    }

    /// Scalar `sum_i weights[i] * x[i]` over the flattened input.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {} values", weights.len(), v.len())));
        }
        let s = v.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input: x, weights }, &[x]))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        ensure(!xs.is_empty(), || "mean of an empty list".into())?;
        let mut total = T::zero();
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(Error::shape("mean", format!("non-scalar operand {:?}", v.shape())));
            }
            total += v.data()[0];
        }
        let value = Tensor::scalar(total / T::of_usize(xs.len()));
        Ok(self.push(value, Op::Mean(xs.to_vec()), xs))
    }

    // ----- backward ---------------------------------------------------------

    /// Backpropagates from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        self.backward_with_seed(root, vec![T::one()])
    }

    pub fn backward_with_seed(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::shape("backward", "seed gradient length differs from root"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let mut contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, cg) in &mut contributions {
                    cg.iter_mut().for_each(|x| *x = -*x);
                }
            }
            for (v, cg) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs.
    fn local_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (rows, positions) = (geom.patch_len(), geom.positions());
                if self.wants(*kernel) {
                    let mut dk = vec![T::zero(); geom.out_channels * rows];
                    T::gemm(
                        geom.out_channels,
                        positions,
                        rows,
                        T::one(),
                        g,
                        (positions as isize, 1),
                        cols,
                        (1, positions as isize),
                        T::zero(),
                        &mut dk,
                        (rows as isize, 1),
                    );
                    out.push((*kernel, dk));
                }
                if self.wants(*bias) {
                    let db = g.chunks(positions).map(|c| c.iter().copied().sum()).collect();
                    out.push((*bias, db));
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); rows * positions];
                    T::gemm(
                        rows,
                        geom.out_channels,
                        positions,
                        T::one(),
                        self.value(*kernel).data(),
                        (1, rows as isize),
                        g,
                        (positions as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (positions as isize, 1),
                    );
                    out.push((*input, col2im(&dcols, geom)));
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input).data();
                let w = self.value(*weight);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); m * n];
                    for (row, &gi) in dw.chunks_mut(n).zip(g) {
                        row.iter_mut().zip(x).for_each(|(d, &xj)| *d = gi * xj);
                    }
                    out.push((*weight, dw));
                }
                if self.wants(*bias) {
                    out.push((*bias, g.to_vec()));
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n];
                    T::gemm(n, m, 1, T::one(), w.data(), (1, n as isize), g, (1, 1), T::zero(), &mut dx, (1, 1));
                    out.push((*input, dx));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xs = self.value(*x).data();
                    let dx = xs.iter().zip(g).map(|(&a, &gi)| if a > T::zero() { gi } else { T::zero() }).collect();
                    out.push((*x, dx));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); self.value(*input).len()];
                    for (&src, &gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                    out.push((*input, dx));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let v = self.value(*x);
                    let hw = v.shape()[1] * v.shape()[2];
                    let scale = T::one() / T::of_usize(hw);
                    let mut dx = Vec::with_capacity(v.len());
                    for &gi in g {
                        dx.extend(std::iter::repeat(gi * scale).take(hw));
                    }
                    out.push((*x, dx));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Dropout { input, mask } => {
                if self.wants(*input) {
                    out.push((*input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
                }
            }
            Op::SoftmaxCe {
                logits,
                label,
                alpha,
                probs,
            } => {
                if self.wants(*logits) {
                    let scale = g[0] * *alpha;
                    let dz = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| {
                            let target = if k == *label { T::one() } else { T::zero() };
                            scale * (p - target)
                        })
                        .collect();
                    out.push((*logits, dz));
                }
            }
            Op::WeightedSum { input, weights } => {
                if self.wants(*input) {
                    out.push((*input, weights.iter().map(|&w| w * g[0]).collect()));
                }
            }
            Op::Mean(xs) => {
                let share = g[0] / T::of_usize(xs.len());
                for &x in xs {
                    if self.wants(x) {
                        out.push((x, vec![share]));
                    }
                }
            }
        }
        out
    }
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let positions = geom.positions();
    let mut cols = vec![T::zero(); geom.patch_len() * positions];
    let mut row = 0;
    for c in 0..geom.channels {
        for kh in 0..geom.kernel {
            for kw in 0..geom.kernel {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oh in 0..geom.out_h {
                    for ow in 0..geom.out_w {
                        if let Some(src) = geom.source(c, kh, kw, oh, ow) {
                            dst[oh * geom.out_w + ow] = x[src];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], geom: &ConvGeom) -> Vec<T> {
    let positions = geom.positions();
    let mut dx = vec![T::zero(); geom.channels * geom.height * geom.width];
    let mut row = 0;
    for c in 0..geom.channels {
        for kh in 0..geom.kernel {
            for kw in 0..geom.kernel {
                let src = &dcols[row * positions..(row + 1) * positions];
                for oh in 0..geom.out_h {
                    for ow in 0..geom.out_w {
                        if let Some(dst) = geom.source(c, kh, kw, oh, ow) {
                            dx[dst] += src[oh * geom.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at<T: Scalar>(z: &[T], k: usize) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    z[k] - lse
}
