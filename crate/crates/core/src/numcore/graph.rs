//! Eager tape for reverse-mode differentiation.
//!
//! Every op computes its value immediately and appends a node. Nodes are
//! appended after their inputs, so creation order is a topological order and
//! `backward` is a single reverse sweep that visits each node once.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::IGNORE_LABEL;

use super::kernels::{self, ConvSpec};
use super::param::{BufferId, ParamId, ParamStore};
use super::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu(s) => {
                if z >= T::zero() {
                    z
                } else {
                    z * T::of(s)
                }
            }
        }
    }

    #[inline]
    fn slope_at<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::LeakyRelu(s) => {
                if z >= T::zero() {
                    T::one()
                } else {
                    T::of(s)
                }
            }
        }
    }
}

/// Where normalisation statistics come from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Statistics of the current input (training).
    Batch,
    /// Stored running statistics (inference).
    Fixed { mean: &'a [T], var: &'a [T] },
}

pub const NORM_EPS: f64 = 1e-5;

/// Running-statistic refresh requested by a batch-stat normalisation.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One sampled cell of a gather: four `(flat index, weight)` taps.
pub type GatherTaps = [(usize, f64); 4];

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Resize {
        input: Var,
        align_corners: bool,
    },
    NormAct {
        input: Var,
        scale: Var,
        shift: Var,
        act: Activation,
        batch: bool,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Crop {
        input: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Gather {
        input: Var,
        taps: Vec<Option<GatherTaps>>,
    },
    Softmax {
        input: Var,
    },
    WeightedCe {
        logits: Var,
        targets: Vec<u8>,
        weights: Vec<T>,
        total_weight: T,
    },
    Sum(Var),
    Dot {
        input: Var,
        coeffs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: BTreeMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
    counters: BTreeMap<&'static str, usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: BTreeMap::new(),
            stat_updates: Vec::new(),
            counters: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let p = store.param(id);
        let v = self.push(p.tensor.clone(), !p.frozen, Op::Leaf);
        self.param_vars.insert(id, v);
        v
    }

    /// Counts a named structural event (e.g. one fusion module instantiated).
    pub fn count(&mut self, key: &'static str) {
        *self.counters.entry(key).or_insert(0) += 1;
    }

    pub fn counter(&self, key: &str) -> usize {
        self.counters.get(key).copied().unwrap_or(0)
    }

    pub fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let out = kernels::resize_forward(self.value(input), out_h, out_w, align_corners)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            rg,
            Op::Resize {
                input,
                align_corners,
            },
        ))
    }

    /// Per-channel normalisation, affine transform, activation. Returns the
    /// output and, in batch mode, the batch mean and (biased) variance.
    pub fn norm_act(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: NormStats<'_, T>,
        act: Activation,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let s = self.shape(input);
        let affine = Shape::new(1, s.c, 1, 1);
        for (v, what) in [(scale, "norm scale"), (shift, "norm shift")] {
            if self.shape(v) != affine {
                return Err(Error::ShapeMismatch {
                    op: what,
                    expected: affine,
                    found: self.shape(v),
                });
            }
        }
        let p = s.plane();
        let m = s.n * p;
        let eps = T::of(NORM_EPS);
        let x = self.value(input).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); s.c];
                let mut var = vec![T::zero(); s.c];
                let inv_m = T::one() / T::of(m as f64);
                for c in 0..s.c {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        acc += x[(n * s.c + c) * p..][..p].iter().copied().sum::<T>();
                    }
                    let mu = acc * inv_m;
                    let mut sq = T::zero();
                    for n in 0..s.n {
                        for v in &x[(n * s.c + c) * p..][..p] {
                            let d = *v - mu;
                            sq += d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = sq * inv_m;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != s.c || var.len() != s.c {
                    return Err(Error::invalid(
                        "norm_act",
                        format!("running stats have {} entries for {} channels", mean.len(), s.c),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = Tensor::zeros(s);
        {
            let od = out.data_mut();
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * p;
                    for i in off..off + p {
                        let h = (x[i] - mean[c]) * inv_std[c];
                        xhat[i] = h;
                        od[i] = act.apply(sc[c] * h + sh[c]);
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        let v = self.push(
            out,
            rg,
            Op::NormAct {
                input,
                scale,
                shift,
                act,
                batch,
                xhat,
                inv_std,
            },
        );
        Ok((v, batch.then_some((mean, var))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: sa,
                found: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let s = self.shape(a);
        let data = self.value(a).data().iter().map(|x| *x * k).collect();
        let out = Tensor::from_vec(s, data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale(a, k))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: Shape::new(s0.n, s.c, s0.h, s0.w),
                    found: s,
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        let p = s0.plane();
        for n in 0..s0.n {
            for v in inputs {
                let t = self.value(*v);
                let c = t.shape().c;
                data.extend_from_slice(&t.data()[n * c * p..(n + 1) * c * p]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(out, rg, Op::Concat(inputs.to_vec())))
    }

    pub fn crop(&mut self, input: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let s = self.shape(input);
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > s.h || cols.end > s.w {
            return Err(Error::EmptyCrop {
                rows: (rows.start, rows.end),
                cols: (cols.start, cols.end),
            });
        }
        let (h, w) = (rows.len(), cols.len());
        let out_shape = Shape::new(s.n, s.c, h, w);
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(out_shape.numel());
        for nc in 0..s.n * s.c {
            for y in rows.clone() {
                let row = (nc * s.h + y) * s.w;
                data.extend_from_slice(&x[row + cols.start..row + cols.end]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Crop { input, rows, cols }))
    }

    /// Samples `input` (batch 1) at per-cell bilinear taps; cells without taps
    /// get zeros. A trailing channel holds the 1/0 validity mask.
    pub fn gather(&mut self, input: Var, taps: Vec<Option<GatherTaps>>, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.n != 1 {
            return Err(Error::invalid("gather", format!("batch must be 1, got {}", s.n)));
        }
        if taps.len() != out_h * out_w {
            return Err(Error::invalid(
                "gather",
                format!("{} cells for a {out_h}x{out_w} grid", taps.len()),
            ));
        }
        let p_in = s.plane();
        if taps.iter().flatten().flatten().any(|(i, _)| *i >= p_in) {
            return Err(Error::invalid("gather", "tap outside feature map"));
        }
        let p = out_h * out_w;
        let out_shape = Shape::new(1, s.c + 1, out_h, out_w);
        let mut out = Tensor::zeros(out_shape);
        {
            let x = self.value(input).data();
            let od = out.data_mut();
            for (cell, t) in taps.iter().enumerate() {
                let Some(t) = t else { continue };
                for c in 0..s.c {
                    let plane = &x[c * p_in..(c + 1) * p_in];
                    let mut acc = T::zero();
                    for (i, w) in t {
                        acc += plane[*i] * T::of(*w);
                    }
                    od[c * p + cell] = acc;
                }
                od[s.c * p + cell] = T::one();
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Gather { input, taps }))
    }

    pub fn softmax(&mut self, input: Var) -> Var {
        let out = kernels::softmax_channels(self.value(input));
        let rg = self.rg(input);
        self.push(out, rg, Op::Softmax { input })
    }

    /// Weighted mean of per-pixel negative log-likelihood over non-ignored
    /// pixels; `targets` is `n·h·w` class indices with [`IGNORE_LABEL`].
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[u8], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits);
        let p = s.plane();
        if targets.len() != s.n * p {
            return Err(Error::invalid(
                "weighted_ce",
                format!("{} targets for logits {s}", targets.len()),
            ));
        }
        if weights.len() != s.c {
            return Err(Error::invalid(
                "weighted_ce",
                format!("{} weights for {} classes", weights.len(), s.c),
            ));
        }
        if weights.iter().any(|w| !(*w > T::zero())) {
            return Err(Error::invalid("weighted_ce", "class weights must be positive"));
        }
        let x = self.value(logits).data();
        let mut num = T::zero();
        let mut den = T::zero();
        for n in 0..s.n {
            for i in 0..p {
                let y = targets[n * p + i];
                if y == IGNORE_LABEL {
                    continue;
                }
                let y = y as usize;
                if y >= s.c {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: s.c,
                    });
                }
                let base = n * s.c * p + i;
                let mut m = T::neg_infinity();
                for c in 0..s.c {
                    m = m.max(x[base + c * p]);
                }
                let mut z = T::zero();
                for c in 0..s.c {
                    z += (x[base + c * p] - m).exp();
                }
                let nll = m + z.ln() - x[base + y * p];
                num += weights[y] * nll;
                den += weights[y];
            }
        }
        if den == T::zero() {
            return Err(Error::AllIgnored);
        }
        let out = Tensor::full(Shape::scalar(), num / den);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            rg,
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight: den,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.rg(input);
        self.push(Tensor::full(Shape::scalar(), total), rg, Op::Sum(input))
    }

    /// `Σ input ⊙ coeffs` as a scalar.
    pub fn dot(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        let x = self.value(input).data();
        if coeffs.len() != x.len() {
            return Err(Error::invalid(
                "dot",
                format!("{} coefficients for {} values", coeffs.len(), x.len()),
            ));
        }
        let total = x.iter().zip(&coeffs).map(|(a, b)| *a * *b).sum::<T>();
        let rg = self.rg(input);
        Ok(self.push(Tensor::full(Shape::scalar(), total), rg, Op::Dot { input, coeffs }))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.shape().numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Temporarily removes the gradient buffer of `v` (if tracked) so it can be
    /// written while other node values are borrowed.
    fn take_buf(&mut self, v: Var) -> Option<Vec<T>> {
        self.grad_buf(v)?;
        self.grads[v.0].take()
    }

    fn put_buf(&mut self, v: Var, buf: Option<Vec<T>>) {
        if let Some(b) = buf {
            self.grads[v.0] = Some(b);
        }
    }

    fn backward_node(&mut self, i: usize, gy: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let mut gx = self.take_buf(*input);
                let mut gw = self.take_buf(*weight);
                let mut gb = bias.and_then(|b| self.take_buf(b));
                let out_shape = self.nodes[i].value.shape();
                kernels::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    spec,
                    out_shape,
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.put_buf(*input, gx);
                self.put_buf(*weight, gw);
                if let Some(b) = bias {
                    self.put_buf(*b, gb);
                }
            }
            Op::Resize {
                input,
                align_corners,
            } => {
                let in_shape = self.shape(*input);
                let out_shape = self.nodes[i].value.shape();
                if let Some(gx) = self.grad_buf(*input) {
                    kernels::resize_backward(in_shape, out_shape, *align_corners, gy, gx);
                }
            }
            Op::NormAct {
                input,
                scale,
                shift,
                act,
                batch,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*input);
                let p = s.plane();
                let m = T::of((s.n * p) as f64);
                let sc = self.value(*scale).data().to_vec();
                let sh = self.value(*shift).data().to_vec();
                // gradient w.r.t. the pre-activation
                let mut gz = vec![T::zero(); gy.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * p;
                        for j in off..off + p {
                            let z = sc[c] * xhat[j] + sh[c];
                            gz[j] = gy[j] * act.slope_at(z);
                        }
                    }
                }
                let mut sum_gz = vec![T::zero(); s.c];
                let mut sum_gz_xhat = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * p;
                        for j in off..off + p {
                            sum_gz[c] += gz[j];
                            sum_gz_xhat[c] += gz[j] * xhat[j];
                        }
                    }
                }
                if let Some(g) = self.grad_buf(*scale) {
                    for c in 0..s.c {
                        g[c] += sum_gz_xhat[c];
                    }
                }
                if let Some(g) = self.grad_buf(*shift) {
                    for c in 0..s.c {
                        g[c] += sum_gz[c];
                    }
                }
                if let Some(gx) = self.grad_buf(*input) {
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * p;
                            let k = sc[c] * inv_std[c];
                            if *batch {
                                let mean_g = sum_gz[c] / m;
                                let mean_gh = sum_gz_xhat[c] / m;
                                for j in off..off + p {
                                    gx[j] += k * (gz[j] - mean_g - xhat[j] * mean_gh);
                                }
                            } else {
                                for j in off..off + p {
                                    gx[j] += k * gz[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.grad_buf(v) {
                        g.iter_mut().zip(gy).for_each(|(d, s)| *d += *s);
                    }
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                if let Some(g) = self.grad_buf(*a) {
                    g.iter_mut().zip(gy).for_each(|(d, s)| *d += *s * k);
                }
            }
            Op::Concat(inputs) => {
                let out = self.nodes[i].value.shape();
                let p = out.plane();
                let mut c_off = 0;
                for v in inputs {
                    let c = self.shape(*v).c;
                    if let Some(g) = self.grad_buf(*v) {
                        for n in 0..out.n {
                            let src = &gy[(n * out.c + c_off) * p..][..c * p];
                            let dst = &mut g[n * c * p..(n + 1) * c * p];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                        }
                    }
                    c_off += c;
                }
            }
            Op::Crop { input, rows, cols } => {
                let s = self.shape(*input);
                let w = cols.len();
                let h = rows.len();
                if let Some(g) = self.grad_buf(*input) {
                    for nc in 0..s.n * s.c {
                        for (ry, y) in rows.clone().enumerate() {
                            let src = &gy[(nc * h + ry) * w..][..w];
                            let row = (nc * s.h + y) * s.w;
                            let dst = &mut g[row + cols.start..row + cols.end];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                        }
                    }
                }
            }
            Op::Gather { input, taps } => {
                let s = self.shape(*input);
                let p_in = s.plane();
                let p = taps.len();
                if let Some(g) = self.grad_buf(*input) {
                    for (cell, t) in taps.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for c in 0..s.c {
                            let go = gy[c * p + cell];
                            for (idx, w) in t {
                                g[c * p_in + idx] += go * T::of(*w);
                            }
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let s = self.shape(*input);
                let p = s.plane();
                let y = self.nodes[i].value.data().to_vec();
                if let Some(g) = self.grad_buf(*input) {
                    for n in 0..s.n {
                        let base = n * s.c * p;
                        for j in 0..p {
                            let mut dot = T::zero();
                            for c in 0..s.c {
                                dot += gy[base + c * p + j] * y[base + c * p + j];
                            }
                            for c in 0..s.c {
                                let k = base + c * p + j;
                                g[k] += y[k] * (gy[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::WeightedCe {
                logits,
                targets,
                weights,
                total_weight,
            } => {
                let s = self.shape(*logits);
                let p = s.plane();
                let probs = kernels::softmax_channels(&self.nodes[logits.0].value);
                let pd = probs.data();
                let k = gy[0] / *total_weight;
                if let Some(g) = self.grad_buf(*logits) {
                    for n in 0..s.n {
                        for j in 0..p {
                            let y = targets[n * p + j];
                            if y == IGNORE_LABEL {
                                continue;
                            }
                            let y = y as usize;
                            let wk = weights[y] * k;
                            let base = n * s.c * p + j;
                            for c in 0..s.c {
                                let ind = if c == y { T::one() } else { T::zero() };
                                g[base + c * p] += wk * (pd[base + c * p] - ind);
                            }
                        }
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(g) = self.grad_buf(*input) {
                    g.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::Dot { input, coeffs } => {
                if let Some(g) = self.grad_buf(*input) {
                    g.iter_mut().zip(coeffs).for_each(|(d, c)| *d += gy[0] * *c);
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (id, v) in &self.param_vars {
            let Some(g) = self.grad(*v) else { continue };
            let p = store.param_mut(*id);
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += *b),
                None => {
                    p.grad = Some(Tensor::from_vec(p.tensor.shape(), g.to_vec()).expect("grad shape"))
                }
            }
        }
    }

    /// Parameter leaves created in this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(p, v)| (*p, *v))
    }
}
