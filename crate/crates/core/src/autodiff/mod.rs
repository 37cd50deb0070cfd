//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every op appends one [`Var`] whose value is computed
//! eagerly. Because ops can only refer to earlier vars, tape order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters live outside the graph as plain [`Tensor`]s. Each training step
//! builds a fresh graph, binds the parameters as leaves with
//! [`Graph::param`], runs the forward pass and reads the gradients back with
//! [`Graph::grad`].

mod kernels;

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::SpatialDims;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    StopGradient,
    PointwiseConv { x: Var, w: Var },
    DepthwiseConv { x: Var, k: Var, stride: usize },
    Conv2d { x: Var, w: Var, stride: usize },
    ChannelAffine { x: Var, scale: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, s: Var },
    Affine { x: Var, a: T },
    SumSquares(Var),
    Sum(Var),
    GlobalMeanPool(Var),
    Dense { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

/// One entry of the tape: the op, its eagerly computed output, and the
/// gradient accumulated by the last backward sweep.
#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the most recent [`Graph::backward`], if `v` is tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Hash of the sign pattern of every ReLU input on the tape.
    ///
    /// Two evaluations with equal signatures lie in the same linear region of
    /// all ReLUs, which is what finite differencing needs to be valid.
    pub fn activation_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                let mut word = 0u64;
                for (i, &v) in self.nodes[x.0].value.data().iter().enumerate() {
                    if v > T::zero() {
                        word |= 1 << (i % 64);
                    }
                    if i % 64 == 63 {
                        hasher.write_u64(word);
                        word = 0;
                    }
                }
                hasher.write_u64(word);
            }
        }
        hasher.finish()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    /// Forward value equals `x`; no gradient flows back into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// `out[n,h,w,co] = Σ_ci x[n,h,w,ci] · w[ci,co]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, h, wd, cin] = self.value(x).dims4("pointwise_conv")?;
        let ws = self.value(w).shape();
        let cout = match ws {
            [a, b] if *a == cin => *b,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "pointwise_conv",
                    detail: format!("input has {cin} channels, weight shape {ws:?}"),
                })
            }
        };
        let rows = n * h * wd;
        let out = kernels::matmul(self.value(x).data(), self.value(w).data(), rows, cin, cout);
        let value = Tensor::new(vec![n, h, wd, cout], out)?;
        let rg = self.tracked(&[x, w]);
        Ok(self.push(value, Op::PointwiseConv { x, w }, rg))
    }

    /// Per-channel 2-D correlation with "same" zero padding.
    pub fn depthwise_conv(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4("depthwise_conv")?;
        let ks = self.value(k).shape().to_vec();
        let extent = match ks[..] {
            [kh, kw, kc] if kh == kw && kc == c => kh,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "depthwise_conv",
                    detail: format!("input has {c} channels, kernel shape {ks:?}"),
                })
            }
        };
        if extent != 3 && extent != 5 {
            return Err(Error::UnsupportedKernel(extent));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let d = SpatialDims { n, h, w, k: extent, stride };
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(k).data(), d, c);
        let value = Tensor::new(vec![n, d.oh(), d.ow(), c], out)?;
        let rg = self.tracked(&[x, k]);
        Ok(self.push(value, Op::DepthwiseConv { x, k, stride }, rg))
    }

    /// Full convolution, kernel `k×k×Cin×Cout` with odd `k`, "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [n, h, wd, cin] = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let (k, cout) = match ws[..] {
            [kh, kw, ci, co] if kh == kw && ci == cin && kh % 2 == 1 => (kh, co),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("input has {cin} channels, kernel shape {ws:?}"),
                })
            }
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let d = SpatialDims { n, h, w: wd, k, stride };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), d, cin, cout);
        let value = Tensor::new(vec![n, d.oh(), d.ow(), cout], out)?;
        let rg = self.tracked(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, stride }, rg))
    }

    /// `out[..., c] = x[..., c] · scale[c] + bias[c]` over the last axis.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let c = *xs.last().unwrap_or(&0);
        for (name, v) in [("scale", scale), ("bias", bias)] {
            if self.value(v).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "channel_affine",
                    detail: format!("{name} shape {:?} for {c} channels", self.value(v).shape()),
                });
            }
        }
        let (s, b) = (self.value(scale).data(), self.value(bias).data());
        let data: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &v)| v * s[i % c] + b[i % c]).collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        let rg = self.tracked(&[x, scale, bias]);
        Ok(self.push(value, Op::ChannelAffine { x, scale, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.tracked(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.tracked(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::ln);
        let rg = self.tracked(&[x]);
        self.push(value, Op::Ln(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplies every element of `x` by the scalar `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale",
                detail: format!("factor must be scalar, got {:?}", self.value(s).shape()),
            });
        }
        let f = self.value(s).item();
        let value = self.value(x).map(|v| f * v);
        let rg = self.tracked(&[x, s]);
        Ok(self.push(value, Op::Scale { x, s }, rg))
    }

    /// `a · x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let value = self.value(x).map(|v| a * v + b);
        let rg = self.tracked(&[x]);
        self.push(value, Op::Affine { x, a }, rg)
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::SumSquares(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Sums scalars left to right.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::InvalidArgument("sum of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `N×H×W×C → N×C` spatial mean.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4("global_mean_pool")?;
        let inv = T::one() / T::from_usize_lossy(h * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..h * w {
                let base = (b * h * w + p) * c;
                for ch in 0..c {
                    out[b * c + ch] = out[b * c + ch] + src[base + ch];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::GlobalMeanPool(x), rg))
    }

    /// `x (N×C) · w (C×K) + b (K)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (n, c, k) = match (xs, ws, bs) {
            ([n, c], [wc, k], [bk]) if c == wc && k == bk => (*n, *c, *k),
            _ => return Err(Error::ShapeMismatch { op: "dense", detail: format!("x {xs:?}, w {ws:?}, b {bs:?}") }),
        };
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), n, c, k);
        let bias = self.value(b).data();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bias[i % k];
        }
        let value = Tensor::new(vec![n, k], out)?;
        let rg = self.tracked(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Batch mean of `-log softmax(logits)[label]`, stabilised by subtracting
    /// the row maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] if *n == labels.len() && *k > 0 => (*n, *k),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    detail: format!("logits {s:?} for {} labels", labels.len()),
                })
            }
        };
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z[row * k..(row + 1) * k];
            let max = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = zr.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[row * k..(row + 1) * k].iter_mut().zip(zr) {
                *p = (v - max).exp() / denom;
            }
            total = total + (denom.ln() + max - zr[label]);
        }
        let loss = total / T::from_usize_lossy(n);
        let rg = self.tracked(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into every tracked node reachable from `loss`
    /// (and are zero-filled for tracked leaves the loss does not depend on).
    /// Call [`Graph::zero_grad`] between sweeps to start from zero.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = match grads.get_mut(i).and_then(Option::take) {
                Some(g) => g,
                None if matches!(node.op, Op::Leaf) => Tensor::zeros(node.value.shape()),
                None => continue,
            };
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf | Op::StopGradient => Vec::new(),
            Op::PointwiseConv { x, w } => {
                let (xs, ws) = (val(*x), val(*w));
                let (cin, cout) = (ws.shape()[0], ws.shape()[1]);
                let rows = xs.len() / cin;
                let mut res = Vec::new();
                if want(*x) {
                    let dx = kernels::matmul_bt(g.data(), ws.data(), rows, cin, cout);
                    res.push((*x, Tensor::new(xs.shape().to_vec(), dx)?));
                }
                if want(*w) {
                    let dw = kernels::matmul_at(xs.data(), g.data(), rows, cin, cout);
                    res.push((*w, Tensor::new(ws.shape().to_vec(), dw)?));
                }
                res
            }
            Op::DepthwiseConv { x, k, stride } => {
                let (xs, ks) = (val(*x), val(*k));
                let [n, h, w, c] = xs.dims4("depthwise_conv")?;
                let d = SpatialDims { n, h, w, k: ks.shape()[0], stride: *stride };
                let (dx, dk) = kernels::depthwise_backward(xs.data(), ks.data(), g.data(), d, c);
                vec![(*x, Tensor::new(xs.shape().to_vec(), dx)?), (*k, Tensor::new(ks.shape().to_vec(), dk)?)]
            }
            Op::Conv2d { x, w, stride } => {
                let (xs, ws) = (val(*x), val(*w));
                let [n, h, wd, cin] = xs.dims4("conv2d")?;
                let (k, cout) = (ws.shape()[0], ws.shape()[3]);
                let d = SpatialDims { n, h, w: wd, k, stride: *stride };
                let (dx, dw) = kernels::conv2d_backward(xs.data(), ws.data(), g.data(), d, cin, cout);
                vec![(*x, Tensor::new(xs.shape().to_vec(), dx)?), (*w, Tensor::new(ws.shape().to_vec(), dw)?)]
            }
            Op::ChannelAffine { x, scale, bias } => {
                let (xs, ss) = (val(*x), val(*scale));
                let c = ss.len();
                let s = ss.data();
                let dx = Tensor::from_fn(xs.shape(), |i| g.data()[i] * s[i % c]);
                let mut ds = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (i, (&gv, &xv)) in g.data().iter().zip(xs.data()).enumerate() {
                    ds[i % c] = ds[i % c] + gv * xv;
                    db[i % c] = db[i % c] + gv;
                }
                vec![(*x, dx), (*scale, Tensor::new(vec![c], ds)?), (*bias, Tensor::new(vec![c], db)?)]
            }
            Op::Relu(x) => {
                let dx = val(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s));
                vec![(*x, dx)]
            }
            Op::Ln(x) => vec![(*x, val(*x).zip_map(g, |v, gv| gv / v))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                vec![(*a, g.zip_map(val(*b), |gv, bv| gv * bv)), (*b, g.zip_map(val(*a), |gv, av| gv * av))]
            }
            Op::Scale { x, s } => {
                let f = val(*s).item();
                let ds: T = g.data().iter().zip(val(*x).data()).map(|(&gv, &xv)| gv * xv).sum();
                vec![(*x, g.map(|gv| gv * f)), (*s, Tensor::full(val(*s).shape(), ds))]
            }
            Op::Affine { x, a } => vec![(*x, g.map(|gv| gv * *a))],
            Op::SumSquares(x) => {
                let gv = g.item();
                let two = T::one() + T::one();
                vec![(*x, val(*x).map(|v| two * v * gv))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::GlobalMeanPool(x) => {
                let [n, h, w, c] = val(*x).dims4("global_mean_pool")?;
                let inv = T::one() / T::from_usize_lossy(h * w);
                let dx = Tensor::from_fn(&[n, h, w, c], |i| {
                    let b = i / (h * w * c);
                    g.data()[b * c + i % c] * inv
                });
                vec![(*x, dx)]
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (val(*x), val(*w));
                let (n, c, k) = (xs.shape()[0], ws.shape()[0], ws.shape()[1]);
                let dx = kernels::matmul_bt(g.data(), ws.data(), n, c, k);
                let dw = kernels::matmul_at(xs.data(), g.data(), n, c, k);
                let mut db = vec![T::zero(); k];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % k] = db[i % k] + gv;
                }
                vec![
                    (*x, Tensor::new(vec![n, c], dx)?),
                    (*w, Tensor::new(vec![c, k], dw)?),
                    (*b, Tensor::new(vec![k], db)?),
                ]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let shape = val(*logits).shape().to_vec();
                let k = shape[1];
                let coef = g.item() / T::from_usize_lossy(labels.len());
                let mut d = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] = d[row * k + label] - T::one();
                }
                for v in &mut d {
                    *v = *v * coef;
                }
                vec![(*logits, Tensor::new(shape, d)?)]
            }
        };
        Ok(out)
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

#[cfg(test)]
mod tests;
