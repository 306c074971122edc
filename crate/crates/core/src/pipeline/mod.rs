//! Frame ingestion, color conversion, cubic degradation, augmentation and
//! temporal windowing.

mod augment;
mod color;
#[cfg(feature = "io")]
pub mod io;
mod resize;
mod window;

pub use augment::{augment, AugmentOp};
pub use color::{rgb_to_y, rgb_to_ycbcr};
pub use resize::{cubic_kernel, cubic_resize, cubic_resize_to, resize_tensor, CUBIC_A};
pub use window::{window_clip, window_indices};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// A `(3, H, W)` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor,
    color_space: ColorSpace,
}

impl Frame {
    /// Wraps an RGB tensor, clamping values into `[0, 1]`.
    pub fn rgb(pixels: Tensor) -> Result<Self> {
        Self::with_space(pixels, ColorSpace::Rgb)
    }

    pub fn with_space(pixels: Tensor, color_space: ColorSpace) -> Result<Self> {
        let (c, _, _) = pixels.dims3()?;
        if c != 3 {
            return Err(Error::shape("Frame", format!("expected 3 channels, got {c}")));
        }
        if !pixels.all_finite() {
            return Err(Error::NonFinite("frame pixels".into()));
        }
        Ok(Frame { pixels: pixels.map(|v| v.clamp(0.0, 1.0)), color_space })
    }

    pub fn constant(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let plane = h * w;
        let pixels = Tensor::from_fn(&[3, h, w], |i| rgb[i / plane].clamp(0.0, 1.0));
        Frame { pixels, color_space: ColorSpace::Rgb }
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Rounds every value to the nearest multiple of 1/255, as an 8-bit
    /// round trip would.
    pub fn quantized(&self) -> Frame {
        Frame { pixels: self.pixels.map(|v| (v * 255.0).round() / 255.0), color_space: self.color_space }
    }
}

/// `2N+1` low-resolution frames centred on a reference, plus the
/// high-resolution target of the reference when one is known.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub lr_frames: Vec<Frame>,
    pub hr_target: Option<Frame>,
    pub radius: usize,
    pub scale: usize,
}

impl FrameSequence {
    pub fn new(lr_frames: Vec<Frame>, hr_target: Option<Frame>, radius: usize, scale: usize) -> Result<Self> {
        let seq = FrameSequence { lr_frames, hr_target, radius, scale };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_frames.len() != 2 * self.radius + 1 {
            return Err(Error::shape(
                "FrameSequence",
                format!("{} frames for radius {} (need {})", self.lr_frames.len(), self.radius, 2 * self.radius + 1),
            ));
        }
        let shape = self.lr_frames[0].pixels().shape();
        if self.lr_frames.iter().any(|f| f.pixels().shape() != shape) {
            return Err(Error::shape("FrameSequence", "low-resolution frames differ in shape"));
        }
        if let Some(hr) = &self.hr_target {
            let want = [3, shape[1] * self.scale, shape[2] * self.scale];
            if hr.pixels().shape() != want {
                return Err(Error::shape(
                    "FrameSequence",
                    format!("target {:?} is not {}x the inputs {:?}", hr.pixels().shape(), self.scale, shape),
                ));
            }
        }
        Ok(())
    }

    /// Index of the reference frame within `lr_frames`.
    pub fn center(&self) -> usize {
        self.radius
    }

    pub fn reference(&self) -> &Frame {
        &self.lr_frames[self.radius]
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.lr_frames[0].height(), self.lr_frames[0].width())
    }
}
