use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Frame;

/// Coefficient of the cubic convolution kernel.
pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`; zero for `|x| >= 2`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample `(source index, weight)` taps along one axis.
///
/// Downscaling stretches the kernel by `1/scale` (antialiasing). Sample
/// centres follow the half-pixel convention, source indices past either end
/// are clamped (border replication), and each tap set is normalised to sum 1.
fn axis_taps(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let span = width.ceil() as i64 + 2;
    (0..out_len)
        .map(|i| {
            // one-based positions keep the arithmetic identical to the usual formulation
            let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(span as usize);
            for j in 0..span {
                let idx = left + j;
                let wt = kscale * cubic_kernel(kscale * (u - idx as f64));
                if wt == 0.0 {
                    continue;
                }
                let src = (idx.clamp(1, in_len as i64) - 1) as usize;
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += wt,
                    None => taps.push((src, wt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable cubic resampling of a `(C, H, W)` tensor to `(C, out_h, out_w)`.
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("cubic_resize", format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    let rows = axis_taps(h, out_h, out_h as f64 / h as f64);
    let cols = axis_taps(w, out_w, out_w as f64 / w as f64);
    let mut out = vec![0.0; c * out_h * out_w];
    let mut tmp = vec![0.0; out_h * w];
    for ch in 0..c {
        let src = t.channel(ch);
        tmp.fill(0.0);
        for (oy, taps) in rows.iter().enumerate() {
            let dst = &mut tmp[oy * w..(oy + 1) * w];
            for &(sy, wt) in taps {
                for (d, s) in dst.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                    *d += wt * s;
                }
            }
        }
        let plane = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let row = &tmp[oy * w..(oy + 1) * w];
            for (ox, taps) in cols.iter().enumerate() {
                plane[oy * out_w + ox] = taps.iter().map(|&(sx, wt)| wt * row[sx]).sum();
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Resizes a frame by `scale` (output extents `ceil(scale · input)`).
pub fn cubic_resize(frame: &Frame, scale: f64) -> Result<Frame> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid("cubic_resize", format!("scale must be positive, got {scale}")));
    }
    let dim = |n: usize| ((n as f64 * scale) - 1e-9).ceil().max(1.0) as usize;
    cubic_resize_to(frame, dim(frame.height()), dim(frame.width()))
}

pub fn cubic_resize_to(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    Frame::with_space(resize_tensor(frame.pixels(), out_h, out_w)?, frame.color_space())
}
