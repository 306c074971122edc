//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its output value and the parents
//! it read. Nodes are only ever appended, so recording order is a
//! topological order and [`Tape::backward`] replays it in reverse,
//! accumulating parent gradients additively in a fixed order.

use crate::error::{Error, Result};
use crate::kernels;
use crate::ops::{self, check_conv_params, check_field, conv_geom, ConvKernel};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    /// Concatenation along axis 0; `sizes` are the element counts per part.
    Concat { parts: Vec<Var>, sizes: Vec<usize> },
    /// Element range `[start, start + len)` of the flat buffer (axis-0 slice).
    Slice { src: Var, start: usize, len: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    SqMean(Var),
    Conv2d { x: Var, w: Var, b: Var, dilation: usize },
    PixelShuffle(Var, usize),
    Softmax { x: Var, axis: usize },
    Bilinear { feat: Var, coords: Var },
    Deform { x: Var, offsets: Var, modulation: Var, w: Var, b: Var, dilation: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | LeakyRelu(a, _) | Sigmoid(a) | Transpose(a) | Reshape(a) | Sum(a) | Mean(a)
            | AbsMean(a) | SqMean(a) | PixelShuffle(a, _) => vec![*a],
            Concat { parts, .. } => parts.clone(),
            Slice { src, .. } => vec![*src],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Softmax { x, .. } => vec![*x],
            Bilinear { feat, coords } => vec![*feat, *coords],
            Deform { x, offsets, modulation, w, b, .. } => vec![*x, *offsets, *modulation, *w, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar w.r.t. the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of a leaf, `None` if it does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        t.zero_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `x` for positive inputs, `slope·x` otherwise; slope 0 is the plain rectifier.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Concatenates along axis 0 (channels of a `(C,H,W)` map).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} does not stack onto trailing {:?}", t.shape(), tail)));
            }
            lead += t.shape()[0];
            sizes.push(t.numel());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), sizes }))
    }

    /// Indices `[start, start+len)` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let lead = *t.shape().first().ok_or_else(|| Error::shape("slice", "rank-0 input"))?;
        if start + len > lead {
            return Err(Error::shape("slice", format!("range {start}..{} exceeds extent {lead}", start + len)));
        }
        let inner = numel(&t.shape()[1..]);
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, t.data()[start * inner..(start + len) * inner].to_vec())?;
        Ok(self.push(out, Op::Slice { src: a, start: start * inner, len: len * inner }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?} must both be rank 2", ta.shape(), tb.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[m, n] = t.shape() else {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", t.shape())));
        };
        let out = Tensor::new(&[n, m], transpose(t.data(), m, n))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn abs_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::AbsMean(a))
    }

    pub fn sq_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::SqMean(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        check_conv_params(self.shape(w), self.shape(b), dilation)?;
        let g = conv_geom("conv2d", self.shape(x), self.shape(w), dilation)?;
        let out_ch = self.shape(w)[0];
        let out =
            kernels::conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g, out_ch);
        let out = Tensor::new(&[out_ch, g.height, g.width], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, dilation }))
    }

    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(a), r)?;
        Ok(self.push(out, Op::PixelShuffle(a, r)))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax_axis(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax { x: a, axis }))
    }

    /// Bilinear read of a `(C,H,W)` map at `coords = [y, x]`, giving `(C)`.
    pub fn bilinear_sample(&mut self, feat: Var, coords: Var) -> Result<Var> {
        let c = self.value(coords);
        if c.shape() != [2] {
            return Err(Error::shape("bilinear_sample", format!("coords must be [y, x], got {:?}", c.shape())));
        }
        let out = ops::bilinear_sample(self.value(feat), c.data()[0], c.data()[1])?;
        Ok(self.push(out, Op::Bilinear { feat, coords }))
    }

    /// Modulated deformable convolution; see [`ops::deform_conv`].
    pub fn deform_conv(&mut self, x: Var, offsets: Var, modulation: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        check_conv_params(self.shape(w), self.shape(b), dilation)?;
        let g = conv_geom("deform_conv", self.shape(x), self.shape(w), dilation)?;
        check_field(self.shape(x), self.shape(offsets), self.shape(modulation), self.shape(w))?;
        if !self.value(offsets).all_finite() {
            return Err(Error::NonFinite("deform_conv offsets".into()));
        }
        let kernel = ConvKernel { weight: self.value(w).clone(), bias: self.value(b).clone(), dilation };
        let out = ops::deform_forward(
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(modulation).data(),
            &kernel,
            &g,
        );
        let out = Tensor::new(&[kernel.out_channels(), g.height, g.width], out)?;
        Ok(self.push(out, Op::Deform { x, offsets, modulation, w, b, dilation }))
    }

    /// Gradients of the scalar `loss` w.r.t. every grad-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Runs `f` on the gradient slot of `v`, allocating it if needed.
    fn with_slot(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.needs(v) {
            let n = self.nodes[v.0].value.numel();
            f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
        }
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        self.with_slot(grads, v, |slot| {
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        });
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                self.with_slot(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, d)| *s -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.with_slot(grads, *a, |s| s.iter_mut().zip(g).zip(vb).for_each(|((s, d), y)| *s += d * y));
                self.with_slot(grads, *b, |s| s.iter_mut().zip(g).zip(va).for_each(|((s, d), x)| *s += d * x));
            }
            Op::Scale(a, k) => {
                self.with_slot(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, d)| *s += k * d));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                self.with_slot(grads, *a, |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(x) {
                        *s += if *x > 0.0 { *d } else { slope * d };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.with_slot(grads, *a, |s| {
                    s.iter_mut().zip(g).zip(y).for_each(|((s, d), y)| *s += d * y * (1.0 - y))
                });
            }
            Op::Concat { parts, sizes } => {
                let mut at = 0;
                for (p, n) in parts.iter().zip(sizes) {
                    self.add_into(grads, *p, &g[at..at + n]);
                    at += n;
                }
            }
            Op::Slice { src, start, len } => {
                self.with_slot(grads, *src, |s| {
                    s[*start..start + len].iter_mut().zip(g).for_each(|(s, d)| *s += d)
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.with_slot(grads, *a, |s| kernels::gemm(m, n, k, g, false, tb.data(), true, 1.0, s));
                self.with_slot(grads, *b, |s| kernels::gemm(k, m, n, ta.data(), true, g, false, 1.0, s));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gt = transpose(g, m, n);
                self.add_into(grads, *a, &gt);
            }
            Op::Reshape(a) => self.add_into(grads, *a, g),
            Op::Sum(a) => self.with_slot(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / self.value(*a).numel() as f64;
                self.with_slot(grads, *a, |s| s.iter_mut().for_each(|s| *s += scale));
            }
            Op::AbsMean(a) => {
                let x = self.value(*a).data();
                let scale = g[0] / x.len() as f64;
                self.with_slot(grads, *a, |s| {
                    for (s, x) in s.iter_mut().zip(x) {
                        // subgradient 0 at the kink
                        let sign = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *s += scale * sign;
                    }
                });
            }
            Op::SqMean(a) => {
                let x = self.value(*a).data();
                let scale = 2.0 * g[0] / x.len() as f64;
                self.with_slot(grads, *a, |s| s.iter_mut().zip(x).for_each(|(s, x)| *s += scale * x));
            }
            Op::Conv2d { x, w, b, dilation } => {
                let geom = conv_geom("conv2d", self.shape(*x), self.shape(*w), *dilation)?;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let oc = self.shape(*w)[0];
                self.with_slot(grads, *b, |s| kernels::conv_backward(xv, wv, g, &geom, oc, None, None, Some(s)));
                self.with_slot(grads, *w, |s| kernels::conv_backward(xv, wv, g, &geom, oc, None, Some(s), None));
                self.with_slot(grads, *x, |s| kernels::conv_backward(xv, wv, g, &geom, oc, Some(s), None, None));
            }
            Op::PixelShuffle(a, r) => {
                let (c, h, w) = (out.shape()[0], out.shape()[1] / r, out.shape()[2] / r);
                let back = kernels::pixel_unshuffle(g, c, h, w, *r);
                self.add_into(grads, *a, &back);
            }
            Op::Softmax { x, axis } => {
                let (o, l, n) = ops::axis_split(out.shape(), *axis)?;
                self.with_slot(grads, *x, |s| kernels::softmax_backward(out.data(), g, o, l, n, s));
            }
            Op::Bilinear { feat, coords } => {
                let f = self.value(*feat);
                let (c, h, w) = f.dims3()?;
                let (y, x) = (self.value(*coords).data()[0], self.value(*coords).data()[1]);
                let corners = kernels::BilinearCorners::new(h, w, y, x);
                self.with_slot(grads, *feat, |s| {
                    for ch in 0..c {
                        for (idx, wt, _, _) in corners.taps() {
                            s[ch * h * w + idx] += g[ch] * wt;
                        }
                    }
                });
                self.with_slot(grads, *coords, |s| {
                    for (ch, gc) in g.iter().enumerate().take(c) {
                        let plane = f.channel(ch);
                        for (idx, _, wy, wx) in corners.taps() {
                            s[0] += gc * wy * plane[idx];
                            s[1] += gc * wx * plane[idx];
                        }
                    }
                });
            }
            Op::Deform { x, offsets, modulation, w, b, dilation } => {
                let geom = conv_geom("deform_conv", self.shape(*x), self.shape(*w), *dilation)?;
                let (hw, ck) = (geom.plane(), geom.channels * geom.taps());
                let oc = self.shape(*w)[0];
                let (xv, ov, mv) = (self.value(*x).data(), self.value(*offsets).data(), self.value(*modulation).data());
                let wv = self.value(*w).data();
                self.with_slot(grads, *b, |s| {
                    for (o, so) in s.iter_mut().enumerate() {
                        *so += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                });
                if self.needs(*w) {
                    let mut cols = vec![0.0; ck * hw];
                    kernels::deform_im2col(xv, ov, mv, &geom, &mut cols);
                    self.with_slot(grads, *w, |s| kernels::gemm(oc, hw, ck, g, false, &cols, true, 1.0, s));
                }
                if self.needs(*x) || self.needs(*offsets) || self.needs(*modulation) {
                    let mut gcols = vec![0.0; ck * hw];
                    kernels::gemm(ck, oc, hw, wv, true, g, false, 0.0, &mut gcols);
                    let mut gx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                    let mut go = self.needs(*offsets).then(|| vec![0.0; ov.len()]);
                    let mut gm = self.needs(*modulation).then(|| vec![0.0; mv.len()]);
                    kernels::deform_col2im(
                        xv,
                        ov,
                        mv,
                        &geom,
                        &gcols,
                        gx.as_deref_mut(),
                        go.as_deref_mut(),
                        gm.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        self.add_into(grads, *x, &gx);
                    }
                    if let Some(go) = go {
                        self.add_into(grads, *offsets, &go);
                    }
                    if let Some(gm) = gm {
                        self.add_into(grads, *modulation, &gm);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

fn transpose(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}
