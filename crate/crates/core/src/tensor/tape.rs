//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its output value; [`Tape::backward`] walks
//! the nodes in reverse creation order. Nodes only reference earlier nodes, so
//! the creation order is a valid topological order.

use std::collections::HashMap;

use crate::error::{shape_mismatch, MdspError, Result};

use super::kernels::{self, BnSaved, ConvGeom};
use super::store::{ParamId, ParamStore};
use super::{window_out, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    /// Exponential linear unit with alpha = 1.
    Elu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    Concat { xs: Vec<Var> },
    Act { x: Var, kind: Activation },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T>, train: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    BceLogits { x: Var, targets: Vec<T>, denom: T },
    SqErr { x: Var, targets: Vec<T>, denom: T },
    CrossEntropy { x: Var, probs: Vec<T>, labels: Vec<usize>, classes: usize, inner: usize, denom: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, to be folded into
/// the running statistics once the step is done.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), bn_updates: Vec::new(), grad_enabled: true }
    }

    /// A tape that never tracks gradients, for inference.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let mut value = t.clone();
        value.grad = None;
        let v = self.leaf(value, t.requires_grad);
        self.params.insert(id, v);
        v
    }

    pub fn record_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims4(&self, v: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .map_err(|_| MdspError::Shape(format!("{op}: expected (N, C, H, W), got {:?}", self.shape(v))))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.dims4(x, "conv2d input")?;
        let (cout, wcin, kh, kw) = self.dims4(w, "conv2d weight")?;
        if wcin != cin {
            return Err(shape_mismatch("conv2d (input vs weight in_ch)", self.shape(x), self.shape(w)));
        }
        if ![1, 3, 5].contains(&kh) || ![1, 3, 5].contains(&kw) {
            return Err(MdspError::Shape(format!("conv2d: kernel {}x{} not in {{1, 3, 5}}", kh, kw)));
        }
        if stride == 0 {
            return Err(MdspError::InvalidArgument("conv2d: stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_mismatch("conv2d (bias vs out_ch)", self.shape(b), &[cout]));
            }
        }
        let (ho, wo) = match (window_out(h, kh, stride, pad), window_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_mismatch("conv2d (kernel larger than padded input)", self.shape(x), self.shape(w))),
        };
        let geom = ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.any_grad(&[b]));
        Ok(self.push(Tensor::new(vec![n, cout, ho, wo], out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "maxpool2d")?;
        if k == 0 || stride == 0 {
            return Err(MdspError::InvalidArgument("maxpool2d: window and stride must be positive".into()));
        }
        if 2 * pad > k {
            return Err(MdspError::InvalidArgument(format!("maxpool2d: padding {} exceeds half the window {}", pad, k)));
        }
        let (ho, wo) = match (window_out(h, k, stride, pad), window_out(w, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(MdspError::Shape(format!(
                    "maxpool2d: window {} larger than padded input {:?} (pad {})",
                    k,
                    self.shape(x),
                    pad
                )))
            }
        };
        let (out, argmax) = kernels::maxpool2d_forward(self.value(x).data(), n, c, h, w, k, stride, pad, ho, wo);
        let rg = self.any_grad(&[x]);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "upsample_nearest")?;
        if factor < 1 {
            return Err(MdspError::InvalidArgument("upsample_nearest: factor must be >= 1".into()));
        }
        let out = kernels::upsample_nearest_forward(self.value(x).data(), n * c, h, w, factor);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, h * factor, w * factor], out)?, Op::Upsample { x, factor }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| MdspError::InvalidArgument("concat_channels: no inputs".into()))?;
        let (n, _, h, w) = self.dims4(first, "concat_channels")?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.dims4(v, "concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_mismatch("concat_channels", self.shape(first), self.shape(v)));
            }
            total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(vec![n, total, h, w], out)?, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let src = self.value(x);
        let data: Vec<T> = match kind {
            Activation::Identity => unreachable!(),
            Activation::Relu => src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Activation::Elu => src.data().iter().map(|&v| if v > T::zero() { v } else { v.exp() - T::one() }).collect(),
            Activation::Sigmoid => src.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = src.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, data).expect("elementwise shape"), Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Training-mode batch norm over `(N, H, W)` per channel. Returns the
    /// output together with the batch mean and the unbiased batch variance.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = self.dims4(x, "batchnorm2d")?;
        self.check_bn_param(x, gamma, c)?;
        self.check_bn_param(x, beta, c)?;
        let m = n * h * w;
        if m < 2 {
            return Err(MdspError::InvalidArgument(format!(
                "batchnorm2d: training mode needs more than one value per channel, input {:?}",
                self.shape(x)
            )));
        }
        let (y, saved) = kernels::batchnorm_train_forward(
            self.value(x).data(),
            n,
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(eps),
        );
        let corr = T::from_f64(m as f64 / (m - 1) as f64);
        let mean = saved.mean.clone();
        let var_unbiased = saved.var.iter().map(|&v| v * corr).collect();
        let rg = self.any_grad(&[x, gamma, beta]);
        let saved = if rg { saved } else { BnSaved { xhat: Vec::new(), ..saved } };
        let v = self.push(Tensor::new(vec![n, c, h, w], y)?, Op::BatchNorm { x, gamma, beta, saved, train: true }, rg);
        Ok((v, mean, var_unbiased))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "batchnorm2d")?;
        self.check_bn_param(x, gamma, c)?;
        self.check_bn_param(x, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(MdspError::Shape(format!(
                "batchnorm2d: running stats of length {}/{} for {} channels",
                mean.len(),
                var.len(),
                c
            )));
        }
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let rg = self.any_grad(&[x, gamma, beta]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut y = vec![T::zero(); xs.len()];
        let mut xhat = if rg { vec![T::zero(); xs.len()] } else { Vec::new() };
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    if rg {
                        xhat[i] = xh;
                    }
                    y[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let saved = BnSaved { xhat, inv_std, mean: mean.to_vec(), var: var.to_vec() };
        Ok(self.push(Tensor::new(vec![n, c, h, w], y)?, Op::BatchNorm { x, gamma, beta, saved, train: false }, rg))
    }

    fn check_bn_param(&self, x: Var, p: Var, c: usize) -> Result<()> {
        if self.shape(p) != [c] {
            return Err(shape_mismatch("batchnorm2d (input vs channel params)", self.shape(x), self.shape(p)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, data).expect("elementwise shape"), Op::Scale { x, c }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| MdspError::InvalidArgument("add_all: no terms".into()))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Selects elements by flat index into a 1-d tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = idx.len();
        self.gather_as(x, idx, vec![n])
    }

    /// Like [`Tape::gather`] but gives the result the shape `shape`.
    pub fn gather_as(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(MdspError::Shape(format!("gather: {} indices do not fill {:?}", idx.len(), shape)));
        }
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(MdspError::Shape(format!("gather: index {} out of range for {:?}", bad, self.shape(x))));
        }
        let data: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, idx }, rg))
    }

    /// `sum_i bce(sigmoid(x_i), t_i) / denom`, computed stably from logits.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<T>, denom: f64) -> Result<Var> {
        if targets.len() != self.value(x).numel() {
            return Err(MdspError::Shape(format!(
                "bce_with_logits: {} targets for {:?}",
                targets.len(),
                self.shape(x)
            )));
        }
        let denom = T::from_f64(denom);
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln())
            .sum::<T>();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s / denom), Op::BceLogits { x, targets, denom }, rg))
    }

    /// `sum_i (x_i - t_i)^2 / denom`.
    pub fn squared_error(&mut self, x: Var, targets: Vec<T>, denom: f64) -> Result<Var> {
        if targets.len() != self.value(x).numel() {
            return Err(MdspError::Shape(format!(
                "squared_error: {} targets for {:?}",
                targets.len(),
                self.shape(x)
            )));
        }
        let denom = T::from_f64(denom);
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&v, &t)| (v - t) * (v - t))
            .sum::<T>();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s / denom), Op::SqErr { x, targets, denom }, rg))
    }

    /// Softmax cross entropy along `axis`, summed over all other positions and
    /// divided by `denom`. `labels` enumerates positions in row-major order of
    /// the shape with `axis` removed.
    pub fn cross_entropy(&mut self, x: Var, labels: Vec<usize>, axis: usize, denom: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(MdspError::Shape(format!("cross_entropy: axis {} for {:?}", axis, shape)));
        }
        let classes = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        if labels.len() != outer * inner {
            return Err(MdspError::Shape(format!("cross_entropy: {} labels for {:?} (axis {})", labels.len(), shape, axis)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(MdspError::InvalidArgument(format!("cross_entropy: label {} out of range 0..{}", bad, classes)));
        }
        let xs = self.value(x).data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * classes + c) * inner + i;
                let mx = (0..classes).map(|c| xs[at(c)]).fold(T::neg_infinity(), T::max);
                let z = (0..classes).map(|c| (xs[at(c)] - mx).exp()).sum::<T>();
                for c in 0..classes {
                    probs[at(c)] = (xs[at(c)] - mx).exp() / z;
                }
                let l = labels[o * inner + i];
                total += z.ln() + mx - xs[at(l)];
            }
        }
        let denom = T::from_f64(denom);
        let rg = self.any_grad(&[x]);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(Tensor::scalar(total / denom), Op::CrossEntropy { x, probs, labels, classes, inner, denom }, rg))
    }

    /// Reverse pass from a scalar. Gradients are returned for every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(MdspError::Shape(format!("backward: loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    /// Runs [`Tape::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, $v.0, self.nodes[$v.0].value.numel())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if needs(*x) {
                    kernels::conv2d_backward(geom, xv, wv, g, Some(acc!(*x)), None, None);
                }
                if needs(*w) {
                    kernels::conv2d_backward(geom, xv, wv, g, None, Some(acc!(*w)), None);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        kernels::conv2d_backward(geom, xv, wv, g, None, None, Some(acc!(*b)));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = acc!(*x);
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += *gi;
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                kernels::upsample_nearest_backward(g, acc!(*x), s[0] * s[1], s[2], s[3], *factor);
            }
            Op::Concat { xs } => {
                let s = node.value.shape();
                let (n, total, hw) = (s[0], s[1], s[2] * s[3]);
                let mut c0 = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if needs(v) {
                        let dv = acc!(v);
                        for b in 0..n {
                            let src = &g[(b * total + c0) * hw..(b * total + c0 + c) * hw];
                            for (d, &s) in dv[b * c * hw..(b + 1) * c * hw].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    c0 += c;
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = acc!(*x);
                for k in 0..g.len() {
                    let d = match kind {
                        Activation::Identity => T::one(),
                        Activation::Relu => {
                            if xv[k] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Elu => {
                            if xv[k] > T::zero() {
                                T::one()
                            } else {
                                yv[k] + T::one()
                            }
                        }
                        Activation::Sigmoid => yv[k] * (T::one() - yv[k]),
                    };
                    dx[k] += g[k] * d;
                }
            }
            Op::BatchNorm { x, gamma, beta, saved, train } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = self.value(*gamma).data();
                let (dxv, dg, db) = if *train {
                    kernels::batchnorm_train_backward(g, saved, n, c, hw, gv)
                } else {
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for k in off..off + hw {
                                dx[k] = g[k] * gv[ch] * saved.inv_std[ch];
                                dg[ch] += g[k] * saved.xhat[k];
                                db[ch] += g[k];
                            }
                        }
                    }
                    (dx, dg, db)
                };
                for (v, d) in [(*x, dxv), (*gamma, dg), (*beta, db)] {
                    if needs(v) {
                        for (a, b) in acc!(v).iter_mut().zip(d) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        for (d, &s) in acc!(v).iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    for (k, d) in acc!(*a).iter_mut().enumerate() {
                        *d += g[k] * bv[k];
                    }
                }
                if needs(*b) {
                    for (k, d) in acc!(*b).iter_mut().enumerate() {
                        *d += g[k] * av[k];
                    }
                }
            }
            Op::Scale { x, c } => {
                for (d, &s) in acc!(*x).iter_mut().zip(g) {
                    *d += s * *c;
                }
            }
            Op::Sum { x } => {
                for d in acc!(*x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Gather { x, idx } => {
                let dx = acc!(*x);
                for (&k, &s) in idx.iter().zip(g) {
                    dx[k] += s;
                }
            }
            Op::BceLogits { x, targets, denom } => {
                let xv = self.value(*x).data();
                let dx = acc!(*x);
                for k in 0..xv.len() {
                    dx[k] += g[0] * (sigmoid(xv[k]) - targets[k]) / *denom;
                }
            }
            Op::SqErr { x, targets, denom } => {
                let xv = self.value(*x).data();
                let dx = acc!(*x);
                let two = T::one() + T::one();
                for k in 0..xv.len() {
                    dx[k] += g[0] * two * (xv[k] - targets[k]) / *denom;
                }
            }
            Op::CrossEntropy { x, probs, labels, classes, inner, denom } => {
                let dx = acc!(*x);
                let scale = g[0] / *denom;
                for (k, d) in dx.iter_mut().enumerate() {
                    *d += probs[k] * scale;
                }
                for (pos, &l) in labels.iter().enumerate() {
                    let (o, i) = (pos / inner, pos % inner);
                    dx[(o * classes + l) * inner + i] -= scale;
                }
            }
        }
    }
}

fn grad_slot<T: Element>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

#[inline]
pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort();
        for (&id, &v) in ids {
            if let Some(g) = self.get(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}
