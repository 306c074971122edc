//! Scoring and inference over clips.

mod metrics;

pub use metrics::{format_db, psnr_y, ssim_y, EvalProtocol};

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::Dnln;
use crate::nn::ParamStore;
use crate::pipeline::{cubic_resize, window_clip, Frame, FrameSequence};
use crate::tensor::Tensor;

/// Largest low-resolution tile (in pixels) run through the network at once;
/// bounds the `(H·W)²` attention matrix at about 42 MiB.
pub const MAX_ATTENTION_POSITIONS: usize = 48 * 48;
/// Context kept around each tile and discarded after upscaling.
pub const TILE_MARGIN: usize = 8;

/// What produces a high-resolution frame from a window.
#[derive(Clone, Debug)]
pub enum Upscaler {
    Model { model: Dnln, params: ParamStore },
    /// Cubic upscaling of the reference frame alone.
    Bicubic { scale: usize },
}

impl Upscaler {
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = Dnln::new(ck.config)?;
        model.check_params(&ck.params)?;
        Ok(Upscaler::Model { model, params: ck.params })
    }

    pub fn scale(&self) -> usize {
        match self {
            Upscaler::Model { model, .. } => model.config.scale,
            Upscaler::Bicubic { scale } => *scale,
        }
    }

    pub fn radius(&self) -> usize {
        match self {
            Upscaler::Model { model, .. } => model.config.radius,
            Upscaler::Bicubic { .. } => 0,
        }
    }

    pub fn upscale(&self, seq: &FrameSequence) -> Result<Frame> {
        match self {
            Upscaler::Model { model, params } => {
                let frames: Vec<Tensor> = seq.lr_frames.iter().map(|f| f.pixels().clone()).collect();
                Frame::rgb(upscale_tiled(model, params, &frames, MAX_ATTENTION_POSITIONS)?)
            }
            Upscaler::Bicubic { scale } => cubic_resize(seq.reference(), *scale as f64),
        }
    }
}

/// Runs the network tile by tile when a frame exceeds `max_positions`
/// pixels. Tiles overlap by [`TILE_MARGIN`], so attention and the outer
/// receptive field only see a neighbourhood of each output region.
pub fn upscale_tiled(model: &Dnln, params: &ParamStore, frames: &[Tensor], max_positions: usize) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::invalid("upscale", "no frames"))?;
    let (_, h, w) = first.dims3()?;
    if h * w <= max_positions {
        return model.upscale(params, frames);
    }
    let side = (max_positions as f64).sqrt() as usize;
    if side <= 2 * TILE_MARGIN {
        return Err(Error::invalid("upscale", format!("tile budget {max_positions} too small for margin {TILE_MARGIN}")));
    }
    let core = side - 2 * TILE_MARGIN;
    let s = model.config.scale;
    let (sh, sw) = (h * s, w * s);
    let mut out = vec![0.0; 3 * sh * sw];
    for y0 in (0..h).step_by(core) {
        for x0 in (0..w).step_by(core) {
            let (y1, x1) = ((y0 + core).min(h), (x0 + core).min(w));
            let (ty0, tx0) = (y0.saturating_sub(TILE_MARGIN), x0.saturating_sub(TILE_MARGIN));
            let (ty1, tx1) = ((y1 + TILE_MARGIN).min(h), (x1 + TILE_MARGIN).min(w));
            let (th, tw) = (ty1 - ty0, tx1 - tx0);
            let tiles: Vec<Tensor> = frames
                .iter()
                .map(|f| {
                    Tensor::from_fn(&[3, th, tw], |i| {
                        let (c, r) = (i / (th * tw), i % (th * tw));
                        f.data()[(c * h + ty0 + r / tw) * w + tx0 + r % tw]
                    })
                })
                .collect();
            let sr = model.upscale(params, &tiles)?;
            let (srh, srw) = (th * s, tw * s);
            for c in 0..3 {
                for y in y0 * s..y1 * s {
                    let src = (c * srh + y - ty0 * s) * srw;
                    let dst = (c * sh + y) * sw;
                    let (a, b) = (x0 * s, x1 * s);
                    out[dst + a..dst + b].copy_from_slice(&sr.data()[src + a - tx0 * s..src + b - tx0 * s]);
                }
            }
        }
    }
    Tensor::new(&[3, sh, sw], out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipReport {
    pub name: String,
    pub frames: Vec<FrameScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ClipReport {
    pub fn psnr(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.psnr))
    }

    pub fn ssim(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.ssim))
    }
}

/// Per-clip scores; the average row is the mean of clip means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub clips: Vec<ClipReport>,
}

impl Report {
    pub fn psnr(&self) -> f64 {
        mean(self.clips.iter().map(ClipReport::psnr))
    }

    pub fn ssim(&self) -> f64 {
        mean(self.clips.iter().map(ClipReport::ssim))
    }

    /// `clip,frame,psnr,ssim` rows, then one `<clip>,mean,...` row per clip
    /// and a final `average,mean,...` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,frame,psnr,ssim\n");
        for c in &self.clips {
            for f in &c.frames {
                writeln!(s, "{},{},{},{:.6}", c.name, f.index, fmt_csv(f.psnr), f.ssim).unwrap();
            }
        }
        for c in &self.clips {
            writeln!(s, "{},mean,{},{:.6}", c.name, fmt_csv(c.psnr()), c.ssim()).unwrap();
        }
        writeln!(s, "average,mean,{},{:.6}", fmt_csv(self.psnr()), self.ssim()).unwrap();
        s
    }

    /// Clip / PSNR / SSIM table with an average row.
    pub fn to_table(&self) -> String {
        let width = self.clips.iter().map(|c| c.name.len()).max().unwrap_or(0).max("Average".len());
        let mut s = format!("{:<width$}  {:>8}  {:>7}\n", "Clip", "PSNR", "SSIM");
        for c in &self.clips {
            writeln!(s, "{:<width$}  {:>8}  {:>7.4}", c.name, format_db(c.psnr()), c.ssim()).unwrap();
        }
        writeln!(s, "{:<width$}  {:>8}  {:>7.4}", "Average", format_db(self.psnr()), self.ssim()).unwrap();
        s
    }
}

fn fmt_csv(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Scores the protocol frames of one clip held in memory.
pub fn eval_frames(up: &Upscaler, name: &str, lr: &[Frame], hr: &[Frame], proto: &EvalProtocol) -> Result<ClipReport> {
    let windows = window_clip(lr, Some(hr), up.radius(), up.scale())?;
    let frames = proto
        .scored(lr.len())
        .map(|i| {
            let seq = &windows[i];
            let sr = up.upscale(seq)?;
            let gt = seq.hr_target.as_ref().expect("targets were supplied");
            Ok(FrameScore { index: i, psnr: psnr_y(&sr, gt, proto)?, ssim: ssim_y(&sr, gt, proto)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipReport { name: name.to_string(), frames })
}

/// Crops a frame to a multiple of `scale` in both extents.
pub fn mod_crop(frame: &Frame, scale: usize) -> Result<Frame> {
    let (h, w) = (frame.height() / scale * scale, frame.width() / scale * scale);
    if h == 0 || w == 0 {
        return Err(Error::invalid("mod_crop", format!("frame smaller than scale {scale}")));
    }
    if (h, w) == (frame.height(), frame.width()) {
        return Ok(frame.clone());
    }
    let (fh, fw) = (frame.height(), frame.width());
    let p = frame.pixels();
    Frame::with_space(
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, r) = (i / (h * w), i % (h * w));
            p.data()[(c * fh + r / w) * fw + r % w]
        }),
        frame.color_space(),
    )
}

/// Cubic `1/scale` degradation rounded to 8 bits, as if written to PNG.
pub fn degrade(hr: &Frame, scale: usize) -> Result<Frame> {
    Ok(cubic_resize(hr, 1.0 / scale as f64)?.quantized())
}

#[cfg(feature = "io")]
mod files;
#[cfg(feature = "io")]
pub use files::{degrade_dir, eval_dataset, infer, load_clip, DegradeMode};
