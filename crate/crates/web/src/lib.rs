//! WebAssembly bindings for the demo page in `www/`.
//!
//! Images cross the boundary as tightly packed RGBA bytes; alpha is ignored
//! on input and written as opaque.

use wasm_bindgen::prelude::*;

use dnln::ops::{self, ConvKernel, SamplingField};
use dnln::pipeline::cubic_resize;
use dnln::{Frame, Tensor};

/// Demo failures as plain messages; the exports turn them into JS errors.
pub type DemoResult<T> = Result<T, String>;

fn msg(e: dnln::Error) -> String {
    e.to_string()
}

fn to_frame(rgba: &[u8], width: usize, height: usize) -> DemoResult<Frame> {
    if rgba.len() != 4 * width * height {
        return Err(format!("expected {} bytes for {width}x{height}, got {}", 4 * width * height, rgba.len()));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, height, width], data).and_then(Frame::rgb).map_err(msg)
}

fn to_rgba(t: &Tensor) -> Vec<u8> {
    let plane = t.shape()[1] * t.shape()[2];
    let mut out = vec![255u8; 4 * plane];
    for c in 0..3 {
        for (i, &v) in t.channel(c).iter().enumerate() {
            out[4 * i + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Cubic upscaling by an integer factor.
pub fn upscale(rgba: &[u8], width: usize, height: usize, scale: usize) -> DemoResult<Vec<u8>> {
    let frame = to_frame(rgba, width, height)?;
    let up = cubic_resize(&frame, scale as f64).map_err(msg)?;
    Ok(to_rgba(up.pixels()))
}

/// A 1×1 deformable convolution with identity weights: every pixel reads
/// the image at `(y + dy, x + dx)` by bilinear interpolation and scales the
/// result by `modulation`.
pub fn shift(rgba: &[u8], width: usize, height: usize, dy: f64, dx: f64, modulation: f64) -> DemoResult<Vec<u8>> {
    let frame = to_frame(rgba, width, height)?;
    let mut offsets = Vec::with_capacity(2 * width * height);
    offsets.extend(std::iter::repeat_n(dy, width * height));
    offsets.extend(std::iter::repeat_n(dx, width * height));
    let field = SamplingField {
        offsets: Tensor::new(&[2, height, width], offsets).map_err(msg)?,
        modulation: Tensor::full(&[1, height, width], modulation),
    };
    let out = ops::deform_conv(frame.pixels(), &field, &ConvKernel::identity(3, 1)).map_err(msg)?;
    Ok(to_rgba(&out))
}

/// Attention weights of pixel `(y, x)` over every pixel: a softmax of the
/// dot products of mean-removed colours divided by `temperature`. Returned
/// row-major, summing to one.
pub fn attention(rgba: &[u8], width: usize, height: usize, y: usize, x: usize, temperature: f64) -> DemoResult<Vec<f32>> {
    if y >= height || x >= width {
        return Err(format!("query ({y}, {x}) outside {width}x{height}"));
    }
    if !(temperature > 0.0) {
        return Err("temperature must be positive".into());
    }
    let frame = to_frame(rgba, width, height)?;
    let px = frame.pixels();
    let q = y * width + x;
    let logits: Vec<f64> = (0..width * height)
        .map(|n| (0..3).map(|c| (px.channel(c)[q] - 0.5) * (px.channel(c)[n] - 0.5)).sum::<f64>() / temperature)
        .collect();
    let weights = ops::softmax_axis(&Tensor::new(&[logits.len()], logits).map_err(msg)?, 0).map_err(msg)?;
    Ok(weights.data().iter().map(|&w| w as f32).collect())
}

fn js(r: DemoResult<Vec<u8>>) -> Result<Vec<u8>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn upscale_bicubic(rgba: &[u8], width: usize, height: usize, scale: usize) -> Result<Vec<u8>, JsError> {
    js(upscale(rgba, width, height, scale))
}

#[wasm_bindgen]
pub fn deform_shift(rgba: &[u8], width: usize, height: usize, dy: f64, dx: f64, modulation: f64) -> Result<Vec<u8>, JsError> {
    js(shift(rgba, width, height, dy, dx, modulation))
}

#[wasm_bindgen]
pub fn attention_map(rgba: &[u8], width: usize, height: usize, y: usize, x: usize, temperature: f64) -> Result<Vec<f32>, JsError> {
    attention(rgba, width, height, y, x, temperature).map_err(|e| JsError::new(&e))
}
