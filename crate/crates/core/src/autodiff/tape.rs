//! Reverse-mode tape.
//!
//! Every op appends one node holding its output value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates gradients additively, so a value used twice (a shared RPN
//! head, a parameter read by several levels) receives the sum of both
//! contributions.

use super::kernels::{self, ConvGeom, ConvTGeom};
use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::geometry::BoxXYXY;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Conv2d,
    ConvTranspose2d,
    Relu,
    MaxPool2d,
    BilinearResize,
    Add,
    Linear,
    Reshape,
    AnchorRows,
    Concat,
    GatherRows,
    ObjectnessLogits,
    RoiAlign,
    WeightedSum,
    SoftmaxCrossEntropy,
    SmoothL1,
    SigmoidBce,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::Add => "add",
            OpKind::Linear => "linear",
            OpKind::Reshape => "reshape",
            OpKind::AnchorRows => "anchor_rows",
            OpKind::Concat => "concat",
            OpKind::GatherRows => "gather_rows",
            OpKind::ObjectnessLogits => "objectness_logits",
            OpKind::RoiAlign => "roi_align",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::SigmoidBce => "sigmoid_bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 19] = [
    OpKind::Leaf,
    OpKind::Param,
    OpKind::Conv2d,
    OpKind::ConvTranspose2d,
    OpKind::Relu,
    OpKind::MaxPool2d,
    OpKind::BilinearResize,
    OpKind::Add,
    OpKind::Linear,
    OpKind::Reshape,
    OpKind::AnchorRows,
    OpKind::Concat,
    OpKind::GatherRows,
    OpKind::ObjectnessLogits,
    OpKind::RoiAlign,
    OpKind::WeightedSum,
    OpKind::SoftmaxCrossEntropy,
    OpKind::SmoothL1,
    OpKind::SigmoidBce,
];

/// One region for [`Tape::roi_align`]: which feature map, which batch
/// element, and the box in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiRef {
    pub feature: usize,
    pub batch: usize,
    pub bbox: BoxXYXY,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize },
    Relu(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BilinearResize(Var),
    Add(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    AnchorRows { x: Var, k: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    ObjectnessLogits(Var),
    RoiAlign { features: Vec<Var>, strides: Vec<f64>, rois: Vec<RoiRef>, out: usize, samples: usize },
    WeightedSum { x: Var, weights: Tensor<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<i64> },
    SmoothL1 { pred: Var, target: Tensor<T>, beta: f64 },
    SigmoidBce { logits: Var, targets: Tensor<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::BilinearResize(_) => OpKind::BilinearResize,
            Op::Add(..) => OpKind::Add,
            Op::Linear { .. } => OpKind::Linear,
            Op::Reshape(_) => OpKind::Reshape,
            Op::AnchorRows { .. } => OpKind::AnchorRows,
            Op::Concat { .. } => OpKind::Concat,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ObjectnessLogits(_) => OpKind::ObjectnessLogits,
            Op::RoiAlign { .. } => OpKind::RoiAlign,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::SigmoidBce { .. } => OpKind::SigmoidBce,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    corrupt: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Keeps only the parameter gradients, freeing every other node.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(pid, var)| self.grads[var.0].take().map(|g| (pid, g)))
            .collect()
    }

    /// Adds each parameter's gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn logistic<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            corrupt: None,
        }
    }

    /// A tape whose backward pass doubles every gradient emitted by ops of
    /// `kind`. Only used to show that gradient checking catches bad kernels.
    pub fn with_corruption(kind: OpKind) -> Self {
        Tape {
            corrupt: Some(kind),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding the current value of a parameter. Each parameter gets a
    /// single leaf per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.params.push((id, v));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if self.value(b).len() != g.f {
            return Err(Error::Shape(format!("conv2d: bias {:?} for {} filters", self.value(b).shape(), g.f)));
        }
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g);
        let t = Tensor::new(&[g.n, g.f, g.oh, g.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution, weight shaped `[c_in, c_out, k, k]`, no padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let g = ConvTGeom::new(self.value(x).shape(), self.value(w).shape(), stride)?;
        if self.value(b).len() != g.f {
            return Err(Error::Shape(format!("conv_transpose2d: bias for {} filters", g.f)));
        }
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g);
        let t = Tensor::new(&[g.n, g.f, g.oh, g.ow], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, stride }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("max_pool2d: {h}x{w} input too small")));
        }
        let (out, argmax) = kernels::max_pool2x2_forward(self.value(x).data(), n, c, h, w);
        let t = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }))
    }

    /// Bilinear resize with half-pixel centers (no corner alignment).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("bilinear_resize: empty input or output".into()));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let t = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(t, Op::BilinearResize(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut t = ta.clone();
        t.add_assign(tb);
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// `x [n, k] * w[m, k]^T + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        let (m, wk) = self.value(w).dims2()?;
        if wk != k || self.value(b).len() != m {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let xr = &xv[i * k..][..k];
            for j in 0..m {
                let wr = &wv[j * k..][..k];
                let mut s = bv[j];
                for (&p, &q) in xr.iter().zip(wr) {
                    s += p * q;
                }
                out.push(s);
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reorders a dense head output `[n, a * k, h, w]` into per-anchor rows
    /// `[n, h * w * a, k]`, row `(y * w + x) * a + anchor`.
    pub fn anchor_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, ch, h, w) = self.value(x).dims4()?;
        if k == 0 || ch % k != 0 {
            return Err(Error::Shape(format!("anchor_rows: {ch} channels not divisible by {k}")));
        }
        let a = ch / k;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * h * w];
        for b in 0..n {
            for ai in 0..a {
                for c in 0..k {
                    let plane = &src[((b * ch) + ai * k + c) * h * w..][..h * w];
                    for (p, &v) in plane.iter().enumerate() {
                        out[((b * h * w + p) * a + ai) * k + c] = v;
                    }
                }
            }
        }
        let t = Tensor::new(&[n, h * w * a, k], out)?;
        Ok(self.push(t, Op::AnchorRows { x, k }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..][..block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Selects entries along the leading axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let m = *t.shape().first().ok_or_else(|| Error::Shape("gather_rows on a scalar".into()))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("gather_rows: row {bad} of {m}")));
        }
        let row_len: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * row_len..][..row_len]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Turns `m` objectness logits `z` into two-class logits `[0, z]`, so
    /// softmax cross-entropy on them equals the logistic loss on `z`.
    pub fn objectness_logits(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(2 * src.len());
        for &z in src {
            out.push(T::zero());
            out.push(z);
        }
        let t = Tensor::new(&[src.len(), 2], out).expect("2m elements");
        self.push(t, Op::ObjectnessLogits(x))
    }

    /// ROI-Align over a list of `[n, c, h, w]` feature maps.
    ///
    /// Each ROI reads from `features[roi.feature]` whose stride is
    /// `strides[roi.feature]`; the box is divided by the stride without any
    /// rounding. Output is `[rois, c, out, out]`.
    pub fn roi_align(
        &mut self,
        features: &[Var],
        strides: &[f64],
        rois: &[RoiRef],
        out: usize,
        samples: usize,
    ) -> Result<Var> {
        if features.len() != strides.len() || features.is_empty() || out == 0 || samples == 0 {
            return Err(Error::Shape("roi_align: bad feature/stride/output configuration".into()));
        }
        let dims = features
            .iter()
            .map(|&f| self.value(f).dims4())
            .collect::<Result<Vec<_>>>()?;
        let c = dims[0].1;
        if dims.iter().any(|d| d.1 != c) {
            return Err(Error::Shape("roi_align: feature maps differ in channels".into()));
        }
        let mut data = Vec::with_capacity(rois.len() * c * out * out);
        for roi in rois {
            let (n, _, h, w) = *dims
                .get(roi.feature)
                .ok_or_else(|| Error::Shape(format!("roi_align: feature {} missing", roi.feature)))?;
            if roi.batch >= n {
                return Err(Error::Shape(format!("roi_align: batch {} of {n}", roi.batch)));
            }
            let s = strides[roi.feature];
            let wy = kernels::roi_axis_weights(roi.bbox.y1 / s, roi.bbox.y2 / s, out, samples, h);
            let wx = kernels::roi_axis_weights(roi.bbox.x1 / s, roi.bbox.x2 / s, out, samples, w);
            let feat = &self.value(features[roi.feature]).data()[roi.batch * c * h * w..][..c * h * w];
            data.extend(kernels::roi_align_forward(feat, c, h, w, &wy, &wx));
        }
        let t = Tensor::new(&[rois.len(), c, out, out], data)?;
        Ok(self.push(
            t,
            Op::RoiAlign {
                features: features.to_vec(),
                strides: strides.to_vec(),
                rois: rois.to_vec(),
                out,
                samples,
            },
        ))
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != weights.shape() {
            return Err(Error::Shape(format!("weighted_sum: {:?} vs {:?}", t.shape(), weights.shape())));
        }
        let s = t.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Mean of `-log softmax(logits)[label]` over rows whose label is not -1.
    /// With every row ignored the loss is 0 and so is its gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("softmax_cross_entropy: {n} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < -1 || l >= k as i64) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
        }
        let x = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            let row = &x[i * k..][..k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[l as usize];
            count += 1;
        }
        let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    /// Mean smooth-L1 over all elements: `0.5 d^2 / beta` below `beta`,
    /// `|d| - 0.5 beta` above. Empty inputs give 0.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor<T>, beta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!("smooth_l1: {:?} vs {:?}", p.shape(), target.shape())));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument("smooth_l1 beta must be positive".into()));
        }
        let b = T::of(beta);
        let half = T::of(0.5);
        let mut total = T::zero();
        for (&a, &t) in p.data().iter().zip(target.data()) {
            let d = (a - t).abs();
            total += if d < b { half * d * d / b } else { d - half * b };
        }
        let n = p.len();
        let loss = if n == 0 { T::zero() } else { total / T::of(n as f64) };
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target, beta }))
    }

    /// Mean binary cross-entropy on logits, in the stable
    /// `max(z, 0) - z t + ln(1 + e^-|z|)` form. Empty inputs give 0.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::Shape(format!("sigmoid_bce: {:?} vs {:?}", z.shape(), targets.shape())));
        }
        let mut total = T::zero();
        for (&v, &t) in z.data().iter().zip(targets.data()) {
            total += v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p();
        }
        let n = z.len();
        let loss = if n == 0 { T::zero() } else { total / T::of(n as f64) };
        Ok(self.push(Tensor::scalar(loss), Op::SigmoidBce { logits, targets }))
    }

    /// Backpropagates from `loss` (a one-element node), seeding its gradient
    /// with `seed`.
    pub fn backward(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
            self.node_backward(node, &g, &mut out)?;
            if self.corrupt == Some(node.op.kind()) {
                for (_, t) in &mut out {
                    t.scale_assign(T::of(2.0));
                }
            }
            for (v, t) in out {
                accumulate(&mut grads, v, t);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>, out: &mut Vec<(Var, Tensor<T>)>) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (xt, wt) = (self.value(x), self.value(w));
                let geom = ConvGeom::new(xt.shape(), wt.shape(), stride, pad)?;
                let (dx, dw, db) = kernels::conv2d_backward(xt.data(), wt.data(), &geom, gd);
                out.push((x, Tensor::new(xt.shape(), dx)?));
                out.push((w, Tensor::new(wt.shape(), dw)?));
                out.push((b, Tensor::new(self.value(b).shape(), db)?));
            }
            &Op::ConvTranspose2d { x, w, b, stride } => {
                let (xt, wt) = (self.value(x), self.value(w));
                let geom = ConvTGeom::new(xt.shape(), wt.shape(), stride)?;
                let (dx, dw, db) = kernels::conv_transpose2d_backward(xt.data(), wt.data(), &geom, gd);
                out.push((x, Tensor::new(xt.shape(), dx)?));
                out.push((w, Tensor::new(wt.shape(), dw)?));
                out.push((b, Tensor::new(self.value(b).shape(), db)?));
            }
            &Op::Relu(x) => {
                let xt = self.value(x);
                let d = xt
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((x, Tensor::new(xt.shape(), d)?));
            }
            Op::MaxPool2d { x, argmax } => {
                let xt = self.value(*x);
                let mut d = vec![T::zero(); xt.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                out.push((*x, Tensor::new(xt.shape(), d)?));
            }
            &Op::BilinearResize(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let d = kernels::bilinear_backward(gd, n * c, h, w, oh, ow);
                out.push((x, Tensor::new(&[n, c, h, w], d)?));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Linear { x, w, b } => {
                let (n, k) = self.value(x).dims2()?;
                let (m, _) = self.value(w).dims2()?;
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                let mut dx = vec![T::zero(); n * k];
                let mut dw = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); m];
                for i in 0..n {
                    let xr = &xv[i * k..][..k];
                    let dxr = &mut dx[i * k..][..k];
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        db[j] += gv;
                        let wr = &wv[j * k..][..k];
                        let dwr = &mut dw[j * k..][..k];
                        for t in 0..k {
                            dxr[t] += gv * wr[t];
                            dwr[t] += gv * xr[t];
                        }
                    }
                }
                out.push((x, Tensor::new(&[n, k], dx)?));
                out.push((w, Tensor::new(&[m, k], dw)?));
                out.push((b, Tensor::new(self.value(b).shape(), db)?));
            }
            &Op::Reshape(x) => {
                out.push((x, g.clone().reshape(self.value(x).shape())?));
            }
            &Op::AnchorRows { x, k } => {
                let (n, ch, h, w) = self.value(x).dims4()?;
                let a = ch / k;
                let mut d = vec![T::zero(); n * ch * h * w];
                for b in 0..n {
                    for ai in 0..a {
                        for c in 0..k {
                            let plane = &mut d[((b * ch) + ai * k + c) * h * w..][..h * w];
                            for (p, slot) in plane.iter_mut().enumerate() {
                                *slot = gd[((b * h * w + p) * a + ai) * k + c];
                            }
                        }
                    }
                }
                out.push((x, Tensor::new(&[n, ch, h, w], d)?));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape();
                    let block = s[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[o * total_block + offset..][..block]);
                    }
                    offset += block;
                    out.push((v, Tensor::new(s, d)?));
                }
            }
            Op::GatherRows { x, rows } => {
                let xt = self.value(*x);
                let row_len: usize = xt.shape()[1..].iter().product();
                let mut d = vec![T::zero(); xt.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for (slot, &gv) in d[r * row_len..][..row_len].iter_mut().zip(&gd[k * row_len..][..row_len]) {
                        *slot += gv;
                    }
                }
                out.push((*x, Tensor::new(xt.shape(), d)?));
            }
            &Op::ObjectnessLogits(x) => {
                let d = gd.chunks(2).map(|c| c[1]).collect();
                out.push((x, Tensor::new(self.value(x).shape(), d)?));
            }
            Op::RoiAlign { features, strides, rois, out: p, samples } => {
                let mut dfeat: Vec<Vec<T>> = features.iter().map(|&f| vec![T::zero(); self.value(f).len()]).collect();
                for (r, roi) in rois.iter().enumerate() {
                    let (_, c, h, w) = self.value(features[roi.feature]).dims4()?;
                    let s = strides[roi.feature];
                    let wy = kernels::roi_axis_weights(roi.bbox.y1 / s, roi.bbox.y2 / s, *p, *samples, h);
                    let wx = kernels::roi_axis_weights(roi.bbox.x1 / s, roi.bbox.x2 / s, *p, *samples, w);
                    let dst = &mut dfeat[roi.feature][roi.batch * c * h * w..][..c * h * w];
                    kernels::roi_align_backward(&gd[r * c * p * p..][..c * p * p], dst, c, h, w, &wy, &wx);
                }
                for (&f, d) in features.iter().zip(dfeat) {
                    out.push((f, Tensor::new(self.value(f).shape(), d)?));
                }
            }
            Op::WeightedSum { x, weights } => {
                let s = gd[0];
                out.push((*x, weights.map(|w| w * s)));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (n, k) = self.value(*logits).dims2()?;
                let x = self.value(*logits).data();
                let count = labels.iter().filter(|&&l| l >= 0).count();
                let mut d = vec![T::zero(); n * k];
                if count > 0 {
                    let scale = gd[0] / T::of(count as f64);
                    for (i, &l) in labels.iter().enumerate() {
                        if l < 0 {
                            continue;
                        }
                        let row = &x[i * k..][..k];
                        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j as i64 == l { T::one() } else { T::zero() };
                            d[i * k + j] = (p - onehot) * scale;
                        }
                    }
                }
                out.push((*logits, Tensor::new(&[n, k], d)?));
            }
            Op::SmoothL1 { pred, target, beta } => {
                let p = self.value(*pred);
                let n = p.len().max(1);
                let scale = gd[0] / T::of(n as f64);
                let b = T::of(*beta);
                let d = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &t)| {
                        let diff = a - t;
                        let slope = if diff.abs() < b { diff / b } else { diff.signum() };
                        slope * scale
                    })
                    .collect();
                out.push((*pred, Tensor::new(p.shape(), d)?));
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.value(*logits);
                let n = z.len().max(1);
                let scale = gd[0] / T::of(n as f64);
                let d = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&v, &t)| (logistic(v) - t) * scale)
                    .collect();
                out.push((*logits, Tensor::new(z.shape(), d)?));
            }
        }
        Ok(())
    }
}
