//! Reverse-mode gradient tape.
//!
//! The tape records a fixed vocabulary of operations (the ones the coupling
//! network, the noise layer and the losses need) together with their output
//! values. [`GradTape::backward`] walks the records in exact reverse order and
//! accumulates gradients into every node that depends on a parameter.
//!
//! A tape is single-writer; build one per forward pass.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::dct;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        k: usize,
    },
    Sum(Var),
    Mean(Var),
    /// `mean|a − b| + mean (a − b)²`
    L1L2(Var, Var),
    QuantizeSte(Var),
    ApproxRound(Var),
    /// Exact rounding; zero derivative almost everywhere.
    Round,
    Clamp(Var, T, T),
    Window {
        input: Var,
        top: usize,
        left: usize,
    },
    PadEdge(Var),
    /// Per-pixel choice between two equally shaped tensors.
    Select {
        mask: Vec<bool>,
        keep: Var,
        other: Var,
    },
    Blur1d {
        input: Var,
        weights: Vec<T>,
        axis: Axis,
    },
    Dct8Blocks {
        input: Var,
        inverse: bool,
    },
    MulConst(Var, Tensor<T>),
    /// `y_c = Σ_j m[c][j] x_j + offset_c` over 3 channels.
    ColorMix(Var, [[T; 3]; 3]),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    /// Reusable convolution buffers.
    scratch: RefCell<[Vec<T>; 3]>,
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            scratch: RefCell::new([Vec::new(), Vec::new(), Vec::new()]),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers (once) the parameter `id` of `store` on the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `kernel` has shape `k × k × c_in × c_out` (k odd) and `bias` has
    /// shape `c_out`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let (k, cout) = match self.value(kernel).shape()[..] {
            [k, k2, ci, co] if k == k2 && k % 2 == 1 && ci == cin => (k, co),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv2d kernel {s:?} incompatible with input channels {cin} (need odd k×k×{cin}×c_out)"
                )))
            }
        };
        if self.value(bias).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?}, expected [{cout}]",
                self.value(bias).shape()
            )));
        }
        let x = self.value(input).data();
        let kdata = self.value(kernel).data();
        let bdata = self.value(bias).data();
        let kkc = k * k * cin;
        let mut scratch = self.scratch.borrow_mut();
        let out = if k > 1 && cin >= SHIFT_MIN_CHANNELS {
            shifted_conv(x, kdata, bdata, (h, w, cin, cout, k), &mut scratch[0])
        } else {
            let mut out = Vec::with_capacity(h * w * cout);
            for _ in 0..h * w {
                out.extend_from_slice(bdata);
            }
            let a: &[T] = if k == 1 {
                x
            } else {
                im2col(x, h, w, cin, k, &mut scratch[0]);
                &scratch[0][..h * w * kkc]
            };
            T::gemm(h * w, kkc, cout, a, (kkc as isize, 1), kdata, (cout as isize, 1), &mut out, true);
            out
        };
        drop(scratch);
        let value = Tensor::from_vec(&[h, w, cout], out)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                k,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Scalar `mean|a − b| + mean (a − b)²`.
    pub fn l1l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb)?;
        if va.is_empty() {
            return Err(Error::Shape("l1l2 of empty tensors".into()));
        }
        let n = T::lit(va.len() as f64);
        let (mut l1, mut l2) = (T::zero(), T::zero());
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            l1 += d.abs();
            l2 += d * d;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(l1 / n + l2 / n), Op::L1L2(a, b), rg))
    }

    /// Forward: `round(clamp(255x, 0, 255)) / 255`; backward: identity inside `[0, 1]`.
    pub fn quantize_ste(&mut self, a: Var) -> Var {
        let max = T::lit(255.0);
        self.unary(
            a,
            move |x| (x * max).max(T::zero()).min(max).round() / max,
            Op::QuantizeSte(a),
        )
    }

    pub fn approx_round(&mut self, a: Var) -> Var {
        self.unary(a, approx_round, Op::ApproxRound(a))
    }

    pub fn round(&mut self, a: Var) -> Var {
        self.unary(a, T::round, Op::Round)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, move |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// `h × w` spatial window with top-left corner `(top, left)`.
    pub fn window(&mut self, input: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let value = self.value(input).window(top, left, h, w)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Window { input, top, left }, rg))
    }

    /// Extends the bottom/right edges to `h × w` by edge replication.
    pub fn pad_edge(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let src = self.value(input);
        let (sh, sw, c) = src.hwc()?;
        if h < sh || w < sw || sh == 0 || sw == 0 {
            return Err(Error::Shape(format!("cannot edge-pad {sh}×{sw} to {h}×{w}")));
        }
        let value = Tensor::from_fn(h, w, c, |y, x, ch| src.at(y.min(sh - 1), x.min(sw - 1), ch));
        let rg = self.rg(input);
        Ok(self.push(value, Op::PadEdge(input), rg))
    }

    /// Pixel-wise selection: `keep` where `mask` is true, else `other`.
    /// `mask` holds one entry per pixel, shared by all channels.
    pub fn select(&mut self, mask: Vec<bool>, keep: Var, other: Var) -> Result<Var> {
        let (a, b) = (self.value(keep), self.value(other));
        a.check_same_shape(b)?;
        let (h, w, c) = a.hwc()?;
        if mask.len() != h * w {
            return Err(Error::Shape(format!(
                "select mask has {} entries for {h}×{w} pixels",
                mask.len()
            )));
        }
        let mut data = Vec::with_capacity(a.len());
        for (p, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            data.extend_from_slice(&src.data()[p * c..(p + 1) * c]);
        }
        let value = Tensor::from_vec(&[h, w, c], data)?;
        let rg = self.rg(keep) || self.rg(other);
        Ok(self.push(value, Op::Select { mask, keep, other }, rg))
    }

    /// One separable pass of a normalized symmetric filter with reflect
    /// padding. Written as `x_i + Σ_k w_k (x_{i+k} − x_i)` so a constant
    /// signal passes through bit-exactly.
    pub fn blur1d(&mut self, input: Var, weights: Vec<T>, axis: Axis) -> Result<Var> {
        if weights.len().is_multiple_of(2) {
            return Err(Error::Shape("blur kernel length must be odd".into()));
        }
        let value = {
            let src = self.value(input);
            let (h, w, c) = src.hwc()?;
            let r = weights.len() / 2;
            let x = src.data();
            let mut out = x.to_vec();
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let center = x[(y * w + xx) * c + ch];
                        let mut acc = T::zero();
                        for (k, &wk) in weights.iter().enumerate() {
                            let (sy, sx) = tap(axis, y, xx, k, r, h, w);
                            acc += wk * (x[(sy * w + sx) * c + ch] - center);
                        }
                        out[(y * w + xx) * c + ch] = center + acc;
                    }
                }
            }
            Tensor::from_vec(&[h, w, c], out)?
        };
        let rg = self.rg(input);
        Ok(self.push(value, Op::Blur1d { input, weights, axis }, rg))
    }

    /// Blockwise 8×8 DCT (or inverse) of every channel; spatial dims must be
    /// multiples of 8.
    pub fn dct8_blocks(&mut self, input: Var, inverse: bool) -> Result<Var> {
        let src = self.value(input);
        let (h, w, c) = src.hwc()?;
        if h % dct::BLOCK != 0 || w % dct::BLOCK != 0 {
            return Err(Error::Shape(format!("{h}×{w} is not a multiple of 8")));
        }
        let value = Tensor::from_vec(&[h, w, c], dct::blockwise(src.data(), h, w, c, inverse))?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Dct8Blocks { input, inverse }, rg))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, input: Var, factor: Tensor<T>) -> Result<Var> {
        let value = self.value(input).zip_map(&factor, |a, b| a * b)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MulConst(input, factor), rg))
    }

    /// Per-pixel affine colour transform over three channels.
    pub fn color_mix(&mut self, input: Var, matrix: [[T; 3]; 3], offset: [T; 3]) -> Result<Var> {
        let src = self.value(input);
        let (h, w, c) = src.hwc()?;
        if c != 3 {
            return Err(Error::Shape(format!("color_mix needs 3 channels, got {c}")));
        }
        let mut data = Vec::with_capacity(src.len());
        for px in src.data().chunks_exact(3) {
            for (row, off) in matrix.iter().zip(offset) {
                data.push(row[0] * px[0] + row[1] * px[1] + row[2] * px[2] + off);
            }
        }
        let value = Tensor::from_vec(&[h, w, 3], data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::ColorMix(input, matrix), rg))
    }

    /// Which piece of every non-smooth op each element landed on: the sign of
    /// leaky-ReLU inputs and of `a − b` inside l1l2, the clamp side, and the
    /// rounding bucket. Two recordings of the same graph with equal patterns
    /// lie on one smooth piece, so finite differences between them are valid.
    pub fn branch_pattern(&self) -> Vec<i64> {
        let sign = |x: T| i64::from(x > T::zero()) - i64::from(x < T::zero());
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(a, _) => out.extend(self.value(a).data().iter().map(|&x| i64::from(x > T::zero()))),
                Op::L1L2(a, b) => out.extend(self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| sign(x - y))),
                Op::Clamp(a, lo, hi) => out.extend(self.value(a).data().iter().map(|&x| sign(x - lo) + sign(x - hi))),
                Op::QuantizeSte(a) => {
                    let max = T::lit(255.0);
                    out.extend(self.value(a).data().iter().map(|&x| (x * max).round().as_f64() as i64));
                }
                Op::ApproxRound(a) => out.extend(self.value(a).data().iter().map(|&x| x.round().as_f64() as i64)),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut order = Vec::new();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            order.push(Var(idx));
            self.propagate(idx, &g, &mut grads);
            // intermediate gradients are dropped as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            params,
            order,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                add_grad(&self.nodes, grads, a, |i| gd[i]);
                add_grad(&self.nodes, grads, b, |i| gd[i]);
            }
            &Op::Sub(a, b) => {
                add_grad(&self.nodes, grads, a, |i| gd[i]);
                add_grad(&self.nodes, grads, b, |i| -gd[i]);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                add_grad(&self.nodes, grads, a, |i| gd[i] * vb[i]);
                add_grad(&self.nodes, grads, b, |i| gd[i] * va[i]);
            }
            &Op::Scale(a, s) => add_grad(&self.nodes, grads, a, |i| gd[i] * s),
            &Op::AddScalar(a) => add_grad(&self.nodes, grads, a, |i| gd[i]),
            &Op::Exp(a) => {
                let y = node.value.data();
                add_grad(&self.nodes, grads, a, |i| gd[i] * y[i]);
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                add_grad(&self.nodes, grads, a, |i| gd[i] * (T::one() - y[i] * y[i]));
            }
            &Op::LeakyRelu(a, slope) => {
                let x = val(a).data();
                add_grad(&self.nodes, grads, a, |i| if x[i] > T::zero() { gd[i] } else { gd[i] * slope });
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                k,
            } => self.conv2d_backward(input, kernel, bias, k, g, grads),
            &Op::Sum(a) => {
                let g0 = gd[0];
                add_grad(&self.nodes, grads, a, |_| g0);
            }
            &Op::Mean(a) => {
                let g0 = gd[0] / T::lit(val(a).len() as f64);
                add_grad(&self.nodes, grads, a, |_| g0);
            }
            &Op::L1L2(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                let scale = gd[0] / T::lit(va.len() as f64);
                let two = T::lit(2.0);
                let da = |i: usize| {
                    let d = va[i] - vb[i];
                    scale * (d.signum0() + two * d)
                };
                add_grad(&self.nodes, grads, a, da);
                add_grad(&self.nodes, grads, b, |i| -da(i));
            }
            &Op::QuantizeSte(a) => {
                let x = val(a).data();
                add_grad(&self.nodes, grads, a, |i| {
                    if x[i] >= T::zero() && x[i] <= T::one() {
                        gd[i]
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::ApproxRound(a) => {
                let x = val(a).data();
                let three = T::lit(3.0);
                add_grad(&self.nodes, grads, a, |i| {
                    let f = x[i] - x[i].round();
                    gd[i] * three * f * f
                });
            }
            Op::Round => {}
            &Op::Clamp(a, lo, hi) => {
                let x = val(a).data();
                add_grad(&self.nodes, grads, a, |i| if x[i] >= lo && x[i] <= hi { gd[i] } else { T::zero() });
            }
            &Op::Window { input, top, left } => {
                if !self.rg(input) {
                    return;
                }
                let (_, sw, c) = val(input).hwc().expect("window input is 3-D");
                let (h, w, _) = node.value.hwc().expect("window output is 3-D");
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(val(input).shape()));
                let sd = slot.data_mut();
                for y in 0..h {
                    let src = (y * w) * c;
                    let dst = ((top + y) * sw + left) * c;
                    for j in 0..w * c {
                        sd[dst + j] += gd[src + j];
                    }
                }
            }
            &Op::PadEdge(input) => {
                if !self.rg(input) {
                    return;
                }
                let (sh, sw, c) = val(input).hwc().expect("pad input is 3-D");
                let (h, w, _) = node.value.hwc().expect("pad output is 3-D");
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(val(input).shape()));
                let sd = slot.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        let s = (y.min(sh - 1) * sw + x.min(sw - 1)) * c;
                        let d = (y * w + x) * c;
                        for ch in 0..c {
                            sd[s + ch] += gd[d + ch];
                        }
                    }
                }
            }
            Op::Select { mask, keep, other } => {
                let c = node.value.channels();
                add_grad(&self.nodes, grads, *keep, |i| if mask[i / c] { gd[i] } else { T::zero() });
                add_grad(&self.nodes, grads, *other, |i| if mask[i / c] { T::zero() } else { gd[i] });
            }
            Op::Blur1d {
                input,
                weights,
                axis,
            } => {
                let input = *input;
                if !self.rg(input) {
                    return;
                }
                let (h, w, c) = val(input).hwc().expect("blur input is 3-D");
                let r = weights.len() / 2;
                let total: T = weights.iter().copied().sum();
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(val(input).shape()));
                let sd = slot.data_mut();
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            let gi = gd[(y * w + xx) * c + ch];
                            sd[(y * w + xx) * c + ch] += gi * (T::one() - total);
                            for (k, &wk) in weights.iter().enumerate() {
                                let (sy, sx) = tap(*axis, y, xx, k, r, h, w);
                                sd[(sy * w + sx) * c + ch] += wk * gi;
                            }
                        }
                    }
                }
            }
            &Op::Dct8Blocks { input, inverse } => {
                let (h, w, c) = node.value.hwc().expect("dct output is 3-D");
                // orthonormal: the adjoint of each transform is the other one
                let back = dct::blockwise(gd, h, w, c, !inverse);
                add_grad(&self.nodes, grads, input, |i| back[i]);
            }
            Op::MulConst(a, factor) => {
                let f = factor.data();
                add_grad(&self.nodes, grads, *a, |i| gd[i] * f[i]);
            }
            Op::ColorMix(a, m) => {
                add_grad(&self.nodes, grads, *a, |i| {
                    let (p, j) = (i / 3, i % 3);
                    m[0][j] * gd[p * 3] + m[1][j] * gd[p * 3 + 1] + m[2][j] * gd[p * 3 + 2]
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        k: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = &self.nodes[input.0].value;
        let kv = &self.nodes[kernel.0].value;
        let (h, w, cin) = xv.hwc().expect("conv input is 3-D");
        let cout = g.channels();
        let kkc = k * k * cin;
        let hw = h * w;
        let gd = g.data();
        if self.rg(bias) {
            let slot = grads[bias.0].get_or_insert_with(|| Tensor::zeros(&[cout]));
            let sd = slot.data_mut();
            for row in gd.chunks_exact(cout) {
                for (s, &v) in sd.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let mut scratch = self.scratch.borrow_mut();
        let [cols, dcols, dpad] = &mut *scratch;
        if k > 1 && cin >= SHIFT_MIN_CHANNELS {
            let geo = Shift::new(h, w, k);
            pad_into(xv.data(), h, w, cin, k / 2, cols);
            // dY laid out on the padded row grid; the wrap-around rows stay zero
            grow(dcols, geo.m * cout);
            let dyp = &mut dcols[..geo.m * cout];
            dyp.fill(T::zero());
            for y in 0..h {
                let dst = y * geo.wp * cout;
                dyp[dst..dst + w * cout].copy_from_slice(&gd[y * w * cout..(y + 1) * w * cout]);
            }
            let taps = cin * cout;
            if self.rg(kernel) {
                let slot = grads[kernel.0].get_or_insert_with(|| Tensor::zeros(kv.shape()));
                for (t, off) in geo.offsets().enumerate() {
                    let dk = &mut slot.data_mut()[t * taps..(t + 1) * taps];
                    T::gemm(cin, geo.m, cout, &cols[off * cin..], (1, cin as isize), dyp, (cout as isize, 1), dk, true);
                }
            }
            if self.rg(input) {
                let padded = geo.hp * geo.wp * cin;
                grow(dpad, padded);
                let dxp = &mut dpad[..padded];
                dxp.fill(T::zero());
                for (t, off) in geo.offsets().enumerate() {
                    let kt = &kv.data()[t * taps..(t + 1) * taps];
                    T::gemm(geo.m, cout, cin, dyp, (cout as isize, 1), kt, (1, cout as isize), &mut dxp[off * cin..], true);
                }
                let r = k / 2;
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(xv.shape()));
                let dx = slot.data_mut();
                for y in 0..h {
                    let src = &dxp[((y + r) * geo.wp + r) * cin..][..w * cin];
                    for (d, &v) in dx[y * w * cin..(y + 1) * w * cin].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            return;
        }
        if self.rg(kernel) {
            let a: &[T] = if k == 1 {
                xv.data()
            } else {
                im2col(xv.data(), h, w, cin, k, cols);
                &cols[..hw * kkc]
            };
            let slot = grads[kernel.0].get_or_insert_with(|| Tensor::zeros(kv.shape()));
            // dK = colsᵀ · dY
            T::gemm(kkc, hw, cout, a, (1, kkc as isize), gd, (cout as isize, 1), slot.data_mut(), true);
        }
        if self.rg(input) {
            // dcols = dY · Kᵀ
            let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(xv.shape()));
            if k == 1 {
                T::gemm(hw, cout, cin, gd, (cout as isize, 1), kv.data(), (1, cout as isize), slot.data_mut(), true);
            } else {
                grow(dcols, hw * kkc);
                let dcols = &mut dcols[..hw * kkc];
                T::gemm(hw, cout, kkc, gd, (cout as isize, 1), kv.data(), (1, cout as isize), dcols, false);
                col2im_add(dcols, slot.data_mut(), h, w, cin, k);
            }
        }
    }
}

/// Inputs with at least this many channels are convolved tap by tap on a
/// zero-padded copy instead of through an im2col matrix.
const SHIFT_MIN_CHANNELS: usize = 16;

/// Geometry of the tap-by-tap convolution. Output pixel `(y, x)` lives at
/// row `y·wp + x` of a grid as wide as the padded input, so every tap is a
/// constant row offset into the padded input. Rows with `x ≥ w` wrap around
/// and are ignored.
struct Shift {
    k: usize,
    wp: usize,
    hp: usize,
    m: usize,
}

impl Shift {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let wp = w + k - 1;
        Self { k, wp, hp: h + k - 1, m: (h - 1) * wp + w }
    }

    fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k * self.k).map(move |t| (t / self.k) * self.wp + t % self.k)
    }
}

fn grow<T: Real>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
}

fn pad_into<T: Real>(x: &[T], h: usize, w: usize, c: usize, r: usize, out: &mut Vec<T>) {
    let wp = w + 2 * r;
    let len = (h + 2 * r) * wp * c;
    grow(out, len);
    let out = &mut out[..len];
    out[..r * wp * c].fill(T::zero());
    for y in 0..h {
        let row = &mut out[(y + r) * wp * c..(y + r + 1) * wp * c];
        row[..r * c].fill(T::zero());
        row[r * c..(r + w) * c].copy_from_slice(&x[y * w * c..(y + 1) * w * c]);
        row[(r + w) * c..].fill(T::zero());
    }
    out[(h + r) * wp * c..].fill(T::zero());
}

fn shifted_conv<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    (h, w, cin, cout, k): (usize, usize, usize, usize, usize),
    padded: &mut Vec<T>,
) -> Vec<T> {
    let geo = Shift::new(h, w, k);
    pad_into(x, h, w, cin, k / 2, padded);
    let mut grid = Vec::with_capacity(geo.m * cout);
    for _ in 0..geo.m {
        grid.extend_from_slice(bias);
    }
    let taps = cin * cout;
    for (t, off) in geo.offsets().enumerate() {
        let kt = &kernel[t * taps..(t + 1) * taps];
        T::gemm(geo.m, cin, cout, &padded[off * cin..], (cin as isize, 1), kt, (cout as isize, 1), &mut grid, true);
    }
    let mut out = Vec::with_capacity(h * w * cout);
    for y in 0..h {
        out.extend_from_slice(&grid[y * geo.wp * cout..][..w * cout]);
    }
    out
}

/// Adds `f(i)` into the gradient slot of `v`, creating it on first use.
fn add_grad<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(slot) => {
            for (i, s) in slot.data_mut().iter_mut().enumerate() {
                *s += f(i);
            }
        }
        slot @ None => {
            let data = (0..node.value.len()).map(f).collect();
            *slot = Some(Tensor::from_vec(node.value.shape(), data).expect("length matches value"));
        }
    }
}

/// Source coordinate of tap `k` (of `2r + 1`) around `(y, x)` with reflect padding.
#[inline]
fn tap(axis: Axis, y: usize, x: usize, k: usize, r: usize, h: usize, w: usize) -> (usize, usize) {
    match axis {
        Axis::Rows => (reflect(y as isize + k as isize - r as isize, h), x),
        Axis::Cols => (y, reflect(x as isize + k as isize - r as isize, w)),
    }
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`),
/// folded repeatedly for offsets larger than the signal.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// `(h·w) × (k·k·cin)` patch matrix for zero "same" padding; columns are
/// ordered `(ky, kx, ci)` to match the kernel layout.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, cin: usize, k: usize, cols: &mut Vec<T>) {
    let r = (k / 2) as isize;
    let kkc = k * k * cin;
    // every entry is written below, so stale contents need no clearing
    grow(cols, h * w * kkc);
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * kkc..(y * w + xx + 1) * kkc];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    let dst = &mut row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * cin;
                        dst.copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], dx: &mut [T], h: usize, w: usize, cin: usize, k: usize) {
    let r = (k / 2) as isize;
    let kkc = k * k * cin;
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * kkc..(y * w + xx + 1) * kkc];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * cin;
                    let src = (ky * k + kx) * cin;
                    for c in 0..cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// `⌊x⌉ + (x − ⌊x⌉)³` with round-half-away-from-zero.
#[inline]
pub fn approx_round<T: Real>(x: T) -> T {
    let r = x.round();
    let f = x - r;
    r + f * f * f
}

/// Result of [`GradTape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
    order: Vec<Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a recorded value, if any flowed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a stored parameter; `None` when the parameter never
    /// reached the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// One gradient per stored parameter, zero-filled for unused ones.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    /// Nodes in the order the reverse pass visited them.
    pub fn visit_order(&self) -> &[Var] {
        &self.order
    }
}
