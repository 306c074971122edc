use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Frame, FrameSequence};

/// Geometric augmentation applied identically to every frame of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Quarter turn clockwise.
    Rot90,
    /// Crop in low-resolution coordinates; the target is cropped at `scale×`.
    Crop { x: usize, y: usize, w: usize, h: usize },
}

fn remap(t: &Tensor, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (c, _, w) = t.dims3().expect("frames are rank 3");
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = t.channel(ch);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src(y, x);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).unwrap()
}

fn apply(frame: &Frame, op: AugmentOp, factor: usize) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    let t = frame.pixels();
    let out = match op {
        AugmentOp::HFlip => remap(t, h, w, |y, x| (y, w - 1 - x)),
        AugmentOp::VFlip => remap(t, h, w, |y, x| (h - 1 - y, x)),
        AugmentOp::Rot90 => remap(t, w, h, |y, x| (h - 1 - x, y)),
        AugmentOp::Crop { x, y, w: cw, h: ch } => {
            let (x, y, cw, ch) = (x * factor, y * factor, cw * factor, ch * factor);
            if cw == 0 || ch == 0 || x + cw > w || y + ch > h {
                return Err(Error::invalid(
                    "augment",
                    format!("crop {cw}x{ch} at ({x},{y}) outside {w}x{h} frame"),
                ));
            }
            remap(t, ch, cw, |yy, xx| (y + yy, x + xx))
        }
    };
    Frame::with_space(out, frame.color_space())
}

/// Applies `ops` in order to all low-resolution frames and the target.
pub fn augment(seq: &FrameSequence, ops: &[AugmentOp]) -> Result<FrameSequence> {
    let mut lr = seq.lr_frames.clone();
    let mut hr = seq.hr_target.clone();
    for &op in ops {
        lr = lr.iter().map(|f| apply(f, op, 1)).collect::<Result<_>>()?;
        hr = hr.map(|f| apply(&f, op, seq.scale)).transpose()?;
    }
    FrameSequence::new(lr, hr, seq.radius, seq.scale)
}
