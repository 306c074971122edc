//! Validated eager operators. The tape in [`crate::autodiff`] records these
//! same forward paths and adds their adjoints.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Convolution weights `(out, in, kh, kw)`, bias `(out)` and dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl ConvKernel {
    pub fn new(weight: Tensor, bias: Tensor, dilation: usize) -> Result<Self> {
        let k = ConvKernel { weight, bias, dilation };
        k.validate()?;
        Ok(k)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, dilation: usize) -> Self {
        ConvKernel { weight: Tensor::zeros(&[out_ch, in_ch, k, k]), bias: Tensor::zeros(&[out_ch]), dilation }
    }

    /// Kernel mapping every channel to itself through the centre tap.
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut kern = Self::zeros(channels, channels, k, 1);
        for c in 0..channels {
            kern.weight.set(&[c, c, k / 2, k / 2], 1.0);
        }
        kern
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        check_conv_params(self.weight.shape(), self.bias.shape(), self.dilation)
    }
}

pub(crate) fn check_conv_params(w: &[usize], b: &[usize], dilation: usize) -> Result<()> {
    if w.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight must be (out,in,kh,kw), got {w:?}")));
    }
    if b != [w[0]] {
        return Err(Error::shape("conv2d", format!("bias {b:?} does not match {} output channels", w[0])));
    }
    if dilation == 0 {
        return Err(Error::invalid("conv2d", "dilation must be positive"));
    }
    if w[2] % 2 == 0 || w[3] % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel {}x{} must have odd extents for same padding", w[2], w[3])));
    }
    Ok(())
}

pub(crate) fn conv_geom(op: &'static str, input: &[usize], weight: &[usize], dilation: usize) -> Result<ConvGeom> {
    let [c, h, w] = input[..] else {
        return Err(Error::shape(op, format!("input must be (C,H,W), got {input:?}")));
    };
    if weight[1] != c {
        return Err(Error::shape(op, format!("input has {c} channels, kernel expects {}", weight[1])));
    }
    Ok(ConvGeom { channels: c, height: h, width: w, kh: weight[2], kw: weight[3], dilation })
}

/// Stride-1 zero-padded "same" convolution.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    kernel.validate()?;
    let g = conv_geom("conv2d", input.shape(), kernel.weight.shape(), kernel.dilation)?;
    let out_ch = kernel.out_channels();
    let out = kernels::conv_forward(input.data(), kernel.weight.data(), kernel.bias.data(), &g, out_ch);
    Tensor::new(&[out_ch, g.height, g.width], out)
}

/// Bilinear read of every channel of `feat` at `(y, x)`.
pub fn bilinear_sample(feat: &Tensor, y: f64, x: f64) -> Result<Tensor> {
    let (c, h, w) = feat.dims3()?;
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite(format!("bilinear_sample coordinate ({y}, {x})")));
    }
    let corners = kernels::BilinearCorners::new(h, w, y, x);
    let out = (0..c)
        .map(|ch| {
            let plane = feat.channel(ch);
            corners.taps().map(|(i, wt, _, _)| wt * plane[i]).sum()
        })
        .collect();
    Tensor::new(&[c], out)
}

/// Per-pixel sampling displacements and modulation scalars for a
/// deformable kernel with `K` taps.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingField {
    /// `(2K, H, W)`: channel `2k` holds Δy and `2k+1` holds Δx of tap `k`.
    pub offsets: Tensor,
    /// `(K, H, W)`, expected in `[0, 1]`.
    pub modulation: Tensor,
}

impl SamplingField {
    /// Zero offsets with constant modulation.
    pub fn uniform(taps: usize, h: usize, w: usize, modulation: f64) -> Self {
        SamplingField { offsets: Tensor::zeros(&[2 * taps, h, w]), modulation: Tensor::full(&[taps, h, w], modulation) }
    }

    pub fn taps(&self) -> usize {
        self.modulation.shape()[0]
    }
}

pub(crate) fn check_field(
    feat: &[usize],
    offsets: &[usize],
    modulation: &[usize],
    weight: &[usize],
) -> Result<()> {
    let taps = weight[2] * weight[3];
    if modulation.len() != 3 || modulation[0] != taps {
        return Err(Error::shape("deform_conv", format!("modulation {modulation:?} must have {taps} tap channels")));
    }
    if offsets.len() != 3 || offsets[0] != 2 * taps {
        return Err(Error::shape("deform_conv", format!("offsets {offsets:?} must have {} channels", 2 * taps)));
    }
    if offsets[1..] != feat[1..] || modulation[1..] != feat[1..] {
        return Err(Error::shape(
            "deform_conv",
            format!("field extents {:?}/{:?} differ from features {:?}", &offsets[1..], &modulation[1..], &feat[1..]),
        ));
    }
    Ok(())
}

/// Modulated deformable convolution: each tap reads the feature map at
/// `p + p_k + Δp_k(p)` by bilinear interpolation and is scaled by `Δm_k(p)`.
pub fn deform_conv(feat: &Tensor, field: &SamplingField, kernel: &ConvKernel) -> Result<Tensor> {
    kernel.validate()?;
    let g = conv_geom("deform_conv", feat.shape(), kernel.weight.shape(), kernel.dilation)?;
    check_field(feat.shape(), field.offsets.shape(), field.modulation.shape(), kernel.weight.shape())?;
    if !field.offsets.all_finite() {
        return Err(Error::NonFinite("deform_conv offsets".into()));
    }
    let out = deform_forward(feat.data(), field.offsets.data(), field.modulation.data(), kernel, &g);
    Tensor::new(&[kernel.out_channels(), g.height, g.width], out)
}

pub(crate) fn deform_forward(feat: &[f64], offsets: &[f64], modulation: &[f64], kernel: &ConvKernel, g: &ConvGeom) -> Vec<f64> {
    let (hw, ck) = (g.plane(), g.channels * g.taps());
    let mut cols = vec![0.0; ck * hw];
    kernels::deform_im2col(feat, offsets, modulation, g, &mut cols);
    let out_ch = kernel.out_channels();
    let mut out = vec![0.0; out_ch * hw];
    for (o, b) in kernel.bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    kernels::gemm(out_ch, ck, hw, kernel.weight.data(), false, &cols, false, 1.0, &mut out);
    out
}

/// `(C·r², H, W) -> (C, H·r, W·r)`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape("pixel_shuffle", format!("{c} channels not divisible by r²={}", r * r)));
    }
    let c_out = c / (r * r);
    Tensor::new(&[c_out, h * r, w * r], kernels::pixel_shuffle(input.data(), c_out, h, w, r))
}

/// Inverse re-indexing of [`pixel_shuffle`]: `(C, H·r, W·r) -> (C·r², H, W)`.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, hr, wr) = input.dims3()?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("extents {hr}x{wr} not divisible by {r}")));
    }
    let (h, w) = (hr / r, wr / r);
    Tensor::new(&[c * r * r, h, w], kernels::pixel_unshuffle(input.data(), c, h, w, r))
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid("softmax_axis", format!("axis {axis} out of range for rank {}", shape.len())));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

/// Numerically stabilised softmax along `axis`.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax_axis input".into()));
    }
    Tensor::new(x.shape(), kernels::softmax(x.data(), outer, len, inner))
}
