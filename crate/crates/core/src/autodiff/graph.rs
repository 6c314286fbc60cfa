//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and `backward` walks it from the end. Every shape
//! check happens when an op is recorded; `backward` itself cannot fail on
//! shapes.

use rayon::prelude::*;

use super::tensor::{broadcast_index, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Denominators closer to zero than this trip the division guard.
pub const DIV_GUARD_EPS: f64 = 1e-12;

/// What a division does when its denominator is inside the guard band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuardMode {
    /// Fail the forward pass.
    #[default]
    Error,
    /// Replace the denominator by `±eps` (inference only).
    Clamp,
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    Log10,
    Square,
    Softplus,
    Sigmoid,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        a_index: Vec<usize>,
        b_index: Vec<usize>,
        /// Guarded denominator, for `Div` only.
        denom: Vec<f64>,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        /// Replicate-padded input, kept for the weight gradient.
        padded: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    Variance {
        x: Var,
        axis: usize,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    CropBorder {
        x: Var,
        margin: usize,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A recording of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    guard: GuardMode,
    guard_eps: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            guard: GuardMode::Error,
            guard_eps: DIV_GUARD_EPS,
        }
    }

    pub fn with_guard(mut self, mode: GuardMode) -> Self {
        self.guard = mode;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericalGuard("non-finite leaf value".into()));
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericalGuard(format!(
                "{what} produced a non-finite value"
            )));
        }
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(value, rg, op))
    }

    // -- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let a_index = broadcast_index(&sa, &out_shape);
        let b_index = broadcast_index(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut denom = Vec::new();
        let data: Vec<f64> = match kind {
            Binary::Add => a_index
                .iter()
                .zip(&b_index)
                .map(|(&i, &j)| da[i] + db[j])
                .collect(),
            Binary::Sub => a_index
                .iter()
                .zip(&b_index)
                .map(|(&i, &j)| da[i] - db[j])
                .collect(),
            Binary::Mul => a_index
                .iter()
                .zip(&b_index)
                .map(|(&i, &j)| da[i] * db[j])
                .collect(),
            Binary::Div => {
                denom = Vec::with_capacity(db.len());
                for &d in db {
                    if d.abs() < self.guard_eps {
                        match self.guard {
                            GuardMode::Error => {
                                return Err(Error::NumericalGuard(format!(
                                    "denominator {d:e} inside guard band {:e}",
                                    self.guard_eps
                                )))
                            }
                            GuardMode::Clamp => denom.push(if d < 0.0 {
                                -self.guard_eps
                            } else {
                                self.guard_eps
                            }),
                        }
                    } else {
                        denom.push(d);
                    }
                }
                a_index
                    .iter()
                    .zip(&b_index)
                    .map(|(&i, &j)| da[i] / denom[j])
                    .collect()
            }
        };
        let value = Tensor::new(out_shape, data)?;
        self.record(
            value,
            &[a, b],
            Op::Binary {
                kind,
                a,
                b,
                a_index,
                b_index,
                denom,
            },
            "binary op",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let src = self.value(x);
        if kind == Unary::Log10 {
            if let Some(bad) = src.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::NumericalGuard(format!("log10 of {bad}")));
            }
        }
        let f = |v: f64| match kind {
            Unary::Relu => v.max(0.0),
            Unary::Log10 => v.log10(),
            Unary::Square => v * v,
            Unary::Softplus => softplus(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Scale(s) => v * s,
            Unary::AddScalar(s) => v + s,
        };
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f(v)).collect(),
        )?;
        self.record(value, &[x], Op::Unary { kind, x }, "unary op")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn log10(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log10, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(s), x)
    }

    // -- reductions ----------------------------------------------------------

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        if d.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.record(Tensor::scalar(m), &[x], Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.record(Tensor::scalar(s), &[x], Op::Sum(x), "sum")
    }

    /// Unbiased variance along `axis`; the axis is removed from the shape.
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let n = shape[axis];
        if n < 2 {
            return Err(Error::InsufficientSamples(format!(
                "unbiased variance over axis of size {n}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * n + k) * inner + i];
                let mean = (0..n).map(at).sum::<f64>() / n as f64;
                let ss = (0..n).map(|k| (at(k) - mean).powi(2)).sum::<f64>();
                out[o * inner + i] = ss / (n - 1) as f64;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.record(value, &[x], Op::Variance { x, axis }, "variance")
    }

    /// Drops `margin` pixels from each side of the last two axes.
    pub fn crop_border(&mut self, x: Var, margin: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "crop_border needs rank >= 2, got {shape:?}"
            )));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h <= 2 * margin || w <= 2 * margin {
            return Err(Error::Shape(format!(
                "margin {margin} leaves nothing of {h}x{w}"
            )));
        }
        let (oh, ow) = (h - 2 * margin, w - 2 * margin);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let d = t.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in margin..h - margin {
                let row = p * h * w + y * w;
                out.extend_from_slice(&d[row + margin..row + w - margin]);
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let value = Tensor::new(out_shape, out)?;
        self.record(value, &[x], Op::CropBorder { x, margin }, "crop_border")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.record(value, &[x], Op::Reshape(x), "reshape")
    }

    // -- convolution and pooling ------------------------------------------

    /// Stride-1 cross-correlation with replicate padding of `(k-1)/2`.
    /// `input` is `[C_in, H, W]`, `weight` `[C_out, C_in, k, k]`, `bias` `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if is.len() != 3 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects [C,H,W] input and [O,C,k,k] weight, got {is:?} and {ws:?}"
            )));
        }
        let (cin, h, w) = (is[0], is[1], is[2]);
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be odd and square, got {k}x{k2}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{cout}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let pad = (k - 1) / 2;
        let padded = replicate_pad(self.value(input).data(), cin, h, w, pad);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; cout * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(co, dst)| {
            if let Some(b) = &bd {
                dst.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..cin {
                let src = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let s = &src[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                            let d = &mut dst[y * w..(y + 1) * w];
                            for (o, i) in d.iter_mut().zip(s) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        });
        let value = Tensor::new(vec![cout, h, w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                padded,
            },
            "conv2d",
        )
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Shape(format!(
                "avg_pool2 expects [C,H>=2,W>=2], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.record(value, &[x], Op::AvgPool2(x), "avg_pool2")
    }

    /// `[C, H, W]` to `[C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects [C,H,W], got {s:?}"
            )));
        }
        let hw = s[1] * s[2];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![s[0]], out)?;
        self.record(value, &[x], Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// `weight [O, I] * x [I] + bias [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "linear expects [I] input and [O,I] weight, got {xs:?} and {ws:?}"
            )));
        }
        let (o, i) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::Shape(format!("linear bias must be [{o}]")));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out: Vec<f64> = (0..o)
            .map(|r| {
                wd[r * i..(r + 1) * i]
                    .iter()
                    .zip(xd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if let Some(b) = bias {
            for (v, bv) in out.iter_mut().zip(self.value(b).data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![o], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(value, &inputs, Op::Linear { x, weight, bias }, "linear")
    }

    // -- backward ------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradients of every
    /// `requires_grad` leaf. Calling it again without [`zero_grad`](Self::zero_grad)
    /// sums the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let acc = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.value.numel()]);
            if let Some(g) = &grads[id] {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |target: Var, contrib: Vec<f64>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                a_index,
                b_index,
                denom,
            } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (k, (&i, &j)) in a_index.iter().zip(b_index).enumerate() {
                    match kind {
                        Binary::Add => {
                            ga[i] += g[k];
                            gb[j] += g[k];
                        }
                        Binary::Sub => {
                            ga[i] += g[k];
                            gb[j] -= g[k];
                        }
                        Binary::Mul => {
                            ga[i] += g[k] * db[j];
                            gb[j] += g[k] * da[i];
                        }
                        Binary::Div => {
                            let d = denom[j];
                            ga[i] += g[k] / d;
                            gb[j] -= g[k] * da[i] / (d * d);
                        }
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let out = node.value.data();
                let gx = xd
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&v, &y), &gv)| {
                        gv * match kind {
                            Unary::Relu => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Log10 => 1.0 / (v * std::f64::consts::LN_10),
                            Unary::Square => 2.0 * v,
                            Unary::Softplus => sigmoid(v),
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Scale(s) => *s,
                            Unary::AddScalar(_) => 1.0,
                        }
                    })
                    .collect();
                send(*x, gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0]; n]);
            }
            Op::Variance { x, axis } => {
                let t = self.value(*x);
                let shape = t.shape();
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let d = t.data();
                let mut gx = vec![0.0; d.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let mean = (0..n).map(|k| d[idx(k)]).sum::<f64>() / n as f64;
                        let go = g[o * inner + i];
                        for k in 0..n {
                            gx[idx(k)] = go * 2.0 * (d[idx(k)] - mean) / (n - 1) as f64;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::CropBorder { x, margin } => {
                let shape = self.value(*x).shape();
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let planes: usize = shape[..r - 2].iter().product();
                let ow = w - 2 * margin;
                let mut gx = vec![0.0; self.value(*x).numel()];
                let mut k = 0;
                for p in 0..planes {
                    for y in *margin..h - margin {
                        let row = p * h * w + y * w + margin;
                        gx[row..row + ow].copy_from_slice(&g[k..k + ow]);
                        k += ow;
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g[(ch * oh + y) * ow + xx];
                            let base = ch * h * w + 2 * y * w + 2 * xx;
                            gx[base] += v;
                            gx[base + 1] += v;
                            gx[base + w] += v;
                            gx[base + w + 1] += v;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[1] * s[2];
                let gx = (0..s[0])
                    .flat_map(|c| std::iter::repeat_n(g[c] / hw as f64, hw))
                    .collect();
                send(*x, gx);
            }
            Op::Linear { x, weight, bias } => {
                let xd = self.value(*x).data();
                let wd = self.value(*weight).data();
                let i = xd.len();
                let o = g.len();
                if self.needs(*x) {
                    let mut gx = vec![0.0; i];
                    for r in 0..o {
                        for c in 0..i {
                            gx[c] += g[r] * wd[r * i + c];
                        }
                    }
                    send(*x, gx);
                }
                if self.needs(*weight) {
                    let gw = (0..o * i).map(|k| g[k / i] * xd[k % i]).collect();
                    send(*weight, gw);
                }
                if let Some(b) = bias {
                    send(*b, g.to_vec());
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padded,
            } => {
                let is = self.value(*input).shape();
                let ws = self.value(*weight).shape();
                let (cin, h, w) = (is[0], is[1], is[2]);
                let (cout, k) = (ws[0], ws[2]);
                let pad = (k - 1) / 2;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                if let Some(b) = bias {
                    let gb = g.chunks(h * w).map(|c| c.iter().sum()).collect();
                    send(*b, gb);
                }
                if self.needs(*weight) {
                    let mut gw = vec![0.0; cout * cin * k * k];
                    gw.par_chunks_mut(cin * k * k)
                        .enumerate()
                        .for_each(|(co, gwc)| {
                            let go = &g[co * h * w..(co + 1) * h * w];
                            for ci in 0..cin {
                                let src = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let mut acc = 0.0;
                                        for y in 0..h {
                                            let s =
                                                &src[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                                            let gr = &go[y * w..(y + 1) * w];
                                            acc +=
                                                s.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                                        }
                                        gwc[(ci * k + ky) * k + kx] = acc;
                                    }
                                }
                            }
                        });
                    send(*weight, gw);
                }
                if self.needs(*input) {
                    let wd = self.value(*weight).data();
                    let mut gp = vec![0.0; cin * hp * wp];
                    gp.par_chunks_mut(hp * wp)
                        .enumerate()
                        .for_each(|(ci, gpc)| {
                            for co in 0..cout {
                                let go = &g[co * h * w..(co + 1) * h * w];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        for y in 0..h {
                                            let d = &mut gpc
                                                [(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                                            let gr = &go[y * w..(y + 1) * w];
                                            for (a, b) in d.iter_mut().zip(gr) {
                                                *a += wv * b;
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    send(*input, unpad_replicate(&gp, cin, h, w, pad));
                }
            }
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn replicate_pad(src: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..hp {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..wp {
                let sx = x.saturating_sub(pad).min(w - 1);
                out[(ch * hp + y) * wp + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Adjoint of [`replicate_pad`]: folds padded-position gradients back onto
/// the pixels they were copied from.
fn unpad_replicate(gp: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..hp {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..wp {
                let sx = x.saturating_sub(pad).min(w - 1);
                out[(ch * h + sy) * w + sx] += gp[(ch * hp + y) * wp + x];
            }
        }
    }
    out
}
