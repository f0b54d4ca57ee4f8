//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! a scalar output with respect to every node that requires them. Graphs are
//! cheap and meant to be rebuilt for every optimization step.

mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{gemm, Float, MatRef, Tensor};
use kernels::ConvGeom;

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    AddChannel { x: usize, b: usize },
    MulChannel { x: usize, g: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: T },
    Relu(usize),
    LeakyRelu { x: usize, slope: T },
    Sigmoid(usize),
    Exp(usize),
    LogClamped { x: usize, lo: T, hi: T },
    Sqrt(usize),
    Square(usize),
    InstanceNorm { x: usize, inv_std: Vec<T> },
    BatchNorm { x: usize, inv_std: Vec<T> },
    GlobalAvgPool(usize),
    MatMul(usize, usize),
    Upsample2x(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    SumRows(usize),
    MeanAll(usize),
    SoftmaxRows(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
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
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, x: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.requires(x);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Gradients of the single-element `output` with respect to every node.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), T::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let needs = |i: usize| nodes[i].requires_grad;
            let acc = |grads: &mut Vec<Option<Tensor<T>>>, i: usize, t: Tensor<T>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let geom = ConvGeom::new(xv.dims4(), wv.shape(), *stride, *pad);
                    let (dx, dw) =
                        kernels::conv2d_backward(&geom, xv.data(), wv.data(), g.data(), needs(*x), needs(*w));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                    }
                }
                Op::AddChannel { x, b } => {
                    if needs(*b) {
                        let c = val(*b).len();
                        acc(&mut grads, *b, Tensor::new(vec![c], channel_sums(&g, c, |v, _| v)));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MulChannel { x, g: gamma } => {
                    let (xv, gv) = (val(*x), val(*gamma));
                    let c = gv.len();
                    if needs(*gamma) {
                        let sums = channel_sums(&g, c, |v, i| v * xv.data()[i]);
                        acc(&mut grads, *gamma, Tensor::new(vec![c], sums));
                    }
                    if needs(*x) {
                        acc(&mut grads, *x, scale_channels(&g, gv.data()));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    acc(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    acc(&mut grads, *x, g.zip_map(xv, |d, v| if v > T::zero() { d } else { T::zero() }));
                }
                Op::LeakyRelu { x, slope } => {
                    let (xv, s) = (val(*x), *slope);
                    acc(&mut grads, *x, g.zip_map(xv, |d, v| if v > T::zero() { d } else { d * s }));
                }
                Op::Sigmoid(x) => {
                    acc(&mut grads, *x, g.zip_map(&node.value, |d, y| d * y * (T::one() - y)));
                }
                Op::Exp(x) => {
                    acc(&mut grads, *x, g.zip_map(&node.value, |d, y| d * y));
                }
                Op::LogClamped { x, lo, hi } => {
                    let (xv, lo, hi) = (val(*x), *lo, *hi);
                    acc(&mut grads, *x, g.zip_map(xv, |d, v| d / v.max(lo).min(hi)));
                }
                Op::Sqrt(x) => {
                    let half = T::lit(0.5);
                    acc(
                        &mut grads,
                        *x,
                        g.zip_map(&node.value, |d, y| if y > T::zero() { d * half / y } else { T::zero() }),
                    );
                }
                Op::Square(x) => {
                    let two = T::lit(2.0);
                    acc(&mut grads, *x, g.zip_map(val(*x), |d, v| d * two * v));
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (_, _, h, w) = node.value.dims4();
                    let dx = kernels::instance_norm_backward(node.value.data(), g.data(), inv_std, h * w);
                    acc(&mut grads, *x, Tensor::new(node.value.shape().to_vec(), dx));
                }
                Op::BatchNorm { x, inv_std } => {
                    let (n, _, h, w) = node.value.dims4();
                    let dx = kernels::batch_norm_backward(node.value.data(), g.data(), inv_std, n, h * w);
                    acc(&mut grads, *x, Tensor::new(node.value.shape().to_vec(), dx));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4();
                    let hw = h * w;
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let mut dx = vec![T::zero(); n * c * hw];
                    for (p, &d) in g.data().iter().enumerate() {
                        dx[p * hw..(p + 1) * hw].fill(d * inv);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[1];
                    if needs(*a) {
                        let mut da = vec![T::zero(); n * k];
                        gemm(
                            MatRef::row_major(g.data(), n, m),
                            MatRef::row_major(bv.data(), k, m).t(),
                            T::zero(),
                            &mut da,
                        );
                        acc(&mut grads, *a, Tensor::new(vec![n, k], da));
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * m];
                        gemm(
                            MatRef::row_major(av.data(), n, k).t(),
                            MatRef::row_major(g.data(), n, m),
                            T::zero(),
                            &mut db,
                        );
                        acc(&mut grads, *b, Tensor::new(vec![k, m], db));
                    }
                }
                Op::Upsample2x(x) => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4();
                    let dx = kernels::upsample2x_backward(g.data(), n * c, h, w);
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::Concat(parts) => {
                    let (n, _, h, w) = node.value.dims4();
                    let hw = h * w;
                    let total_c = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let pc = val(p).shape()[1];
                        if needs(p) {
                            let mut dp = Vec::with_capacity(n * pc * hw);
                            for b in 0..n {
                                let start = (b * total_c + offset) * hw;
                                dp.extend_from_slice(&g.data()[start..start + pc * hw]);
                            }
                            acc(&mut grads, p, Tensor::new(val(p).shape().to_vec(), dp));
                        }
                        offset += pc;
                    }
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape));
                }
                Op::SumRows(x) => {
                    let xv = val(*x);
                    let (rows, cols) = xv.rows_cols();
                    let mut dx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        dx.extend(std::iter::repeat_n(g.data()[r], cols));
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::MeanAll(x) => {
                    let xv = val(*x);
                    let d = g.data()[0] / T::from_usize(xv.len()).unwrap();
                    acc(&mut grads, *x, Tensor::full(xv.shape(), d));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (rows, cols) = y.rows_cols();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gs = &g.data()[r * cols..(r + 1) * cols];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
            }
        }
        Gradients { grads }
    }
}

/// Per-channel sums of `f(value, flat_index)` over an `[N, C, ...]` tensor.
fn channel_sums<T: Float>(t: &Tensor<T>, c: usize, f: impl Fn(T, usize) -> T) -> Vec<T> {
    let n = t.shape()[0];
    let inner = t.len() / (n * c);
    let mut sums = vec![T::zero(); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                *s += f(t.data()[i], i);
            }
        }
    }
    sums
}

fn scale_channels<T: Float>(t: &Tensor<T>, scale: &[T]) -> Tensor<T> {
    let c = scale.len();
    let n = t.shape()[0];
    let inner = t.len() / (n * c);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= scale[(i / inner) % c];
    }
    out
}

fn offset_channels<T: Float>(t: &Tensor<T>, bias: &[T]) -> Tensor<T> {
    let c = bias.len();
    let n = t.shape()[0];
    let inner = t.len() / (n * c);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias[(i / inner) % c];
    }
    out
}

impl<'g, T: Float> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    /// 2-D convolution of an NCHW input with an `[out, in, k, k]` kernel, without bias.
    pub fn conv2d(self, w: Var<'g, T>, stride: usize, pad: usize) -> Self {
        self.same_graph(&w);
        let (xv, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(xv.dims4(), wv.shape(), stride, pad);
        let out = kernels::conv2d_forward(&geom, xv.data(), wv.data());
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out);
        self.graph.binary(self.id, w.id, value, Op::Conv2d { x: self.id, w: w.id, stride, pad })
    }

    /// Adds `b[c]` to channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel(self, b: Var<'g, T>) -> Self {
        self.same_graph(&b);
        let value = offset_channels(&self.value(), b.value().data());
        self.graph.binary(self.id, b.id, value, Op::AddChannel { x: self.id, b: b.id })
    }

    /// Multiplies channel `c` of an `[N, C, ...]` tensor by `g[c]`.
    pub fn mul_channel(self, g: Var<'g, T>) -> Self {
        self.same_graph(&g);
        let value = scale_channels(&self.value(), g.value().data());
        self.graph.binary(self.id, g.id, value, Op::MulChannel { x: self.id, g: g.id })
    }

    pub fn add(self, other: Var<'g, T>) -> Self {
        self.same_graph(&other);
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.binary(self.id, other.id, value, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Self {
        self.same_graph(&other);
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.binary(self.id, other.id, value, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Self {
        self.same_graph(&other);
        let value = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.binary(self.id, other.id, value, Op::Mul(self.id, other.id))
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: T, shift: T) -> Self {
        let value = self.value().map(|v| scale * v + shift);
        self.graph.unary(self.id, value, Op::Affine { x: self.id, scale })
    }

    pub fn scale(self, s: T) -> Self {
        self.affine(s, T::zero())
    }

    pub fn relu(self) -> Self {
        let value = self.value().map(|v| v.max(T::zero()));
        self.graph.unary(self.id, value, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let value = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        self.graph.unary(self.id, value, Op::LeakyRelu { x: self.id, slope })
    }

    pub fn sigmoid(self) -> Self {
        let value = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.graph.unary(self.id, value, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Self {
        let value = self.value().map(|v| v.exp());
        self.graph.unary(self.id, value, Op::Exp(self.id))
    }

    /// `ln(clamp(x, lo, hi))`. The derivative is `1 / clamp(x, lo, hi)` everywhere,
    /// so saturated inputs still pass a finite gradient.
    pub fn log_clamped(self, lo: T, hi: T) -> Self {
        let value = self.value().map(|v| v.max(lo).min(hi).ln());
        self.graph.unary(self.id, value, Op::LogClamped { x: self.id, lo, hi })
    }

    /// Square root with a zero subgradient at 0.
    pub fn sqrt(self) -> Self {
        let value = self.value().map(|v| v.max(T::zero()).sqrt());
        self.graph.unary(self.id, value, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Self {
        let value = self.value().map(|v| v * v);
        self.graph.unary(self.id, value, Op::Square(self.id))
    }

    /// Zero-mean unit-variance normalization of every `(n, c)` plane.
    pub fn instance_norm(self, eps: T) -> Self {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let (y, stats) = kernels::instance_norm_forward(xv.data(), n * c, h * w, eps);
        let value = Tensor::new(xv.shape().to_vec(), y);
        self.graph.unary(self.id, value, Op::InstanceNorm { x: self.id, inv_std: stats.inv_std })
    }

    /// Normalization with the statistics of the current batch, per channel.
    /// Also returns those statistics (biased variance) for running averages.
    pub fn batch_norm(self, eps: T) -> (Self, BatchStats<T>) {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let (y, stats) = kernels::batch_norm_forward(xv.data(), n, c, h * w, eps);
        let value = Tensor::new(xv.shape().to_vec(), y);
        let out = self.graph.unary(self.id, value, Op::BatchNorm { x: self.id, inv_std: stats.inv_std });
        (out, BatchStats { mean: stats.mean, var: stats.var })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(self) -> Self {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = xv.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.graph.unary(self.id, Tensor::new(vec![n, c], data), Op::GlobalAvgPool(self.id))
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(self, other: Var<'g, T>) -> Self {
        self.same_graph(&other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape().len(), 2);
        assert_eq!(bv.shape().len(), 2);
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        assert_eq!(bv.shape()[0], k, "matmul inner dimension");
        let mut out = vec![T::zero(); n * m];
        gemm(MatRef::row_major(av.data(), n, k), MatRef::row_major(bv.data(), k, m), T::zero(), &mut out);
        self.graph.binary(self.id, other.id, Tensor::new(vec![n, m], out), Op::MatMul(self.id, other.id))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(self) -> Self {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], kernels::upsample2x_forward(xv.data(), n * c, h, w));
        self.graph.unary(self.id, value, Op::Upsample2x(self.id))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'g, T>]) -> Self {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let total_c: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for v in &values {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
                data.extend_from_slice(&v.data()[b * vc * h * w..(b + 1) * vc * h * w]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        graph.push(Tensor::new(vec![n, total_c, h, w], data), Op::Concat(ids), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let value = (*self.value()).clone().reshape(shape);
        self.graph.unary(self.id, value, Op::Reshape(self.id))
    }

    /// Sum over everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_rows(self) -> Self {
        let xv = self.value();
        let (rows, cols) = xv.rows_cols();
        let data = xv.data().chunks(cols.max(1)).map(|c| c.iter().copied().sum()).take(rows).collect();
        self.graph.unary(self.id, Tensor::new(vec![rows], data), Op::SumRows(self.id))
    }

    pub fn mean_all(self) -> Self {
        let xv = self.value();
        let mean = xv.sum() / T::from_usize(xv.len()).unwrap();
        self.graph.unary(self.id, Tensor::scalar(mean), Op::MeanAll(self.id))
    }

    /// Row-wise softmax of an `[N, F]` tensor.
    pub fn softmax_rows(self) -> Self {
        let xv = self.value();
        let (rows, cols) = xv.rows_cols();
        let mut data = Vec::with_capacity(rows * cols);
        for r in xv.data().chunks(cols) {
            let max = r.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = r.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        self.graph.unary(self.id, Tensor::new(xv.shape().to_vec(), data), Op::SoftmaxRows(self.id))
    }
}
