use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ColorSpace, Frame};

/// BT.601 studio-swing luma on the 0–255 scale:
/// `Y = 16 + 65.481·R + 128.553·G + 24.966·B` for RGB in `[0, 1]`.
pub fn rgb_to_y(frame: &Frame) -> Result<Tensor> {
    if frame.color_space() != ColorSpace::Rgb {
        return Err(Error::invalid("rgb_to_y", "frame is not RGB"));
    }
    let p = frame.pixels();
    let (_, h, w) = p.dims3()?;
    let (r, g, b) = (p.channel(0), p.channel(1), p.channel(2));
    let y = (0..h * w).map(|i| 16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]).collect();
    Tensor::new(&[1, h, w], y)
}

/// Full YCbCr conversion, each channel rescaled to `[0, 1]` by 1/255.
pub fn rgb_to_ycbcr(frame: &Frame) -> Result<Frame> {
    let y = rgb_to_y(frame)?;
    let p = frame.pixels();
    let (_, h, w) = p.dims3()?;
    let (r, g, b) = (p.channel(0), p.channel(1), p.channel(2));
    let mut data = Vec::with_capacity(3 * h * w);
    data.extend(y.data().iter().map(|v| v / 255.0));
    data.extend((0..h * w).map(|i| (128.0 - 37.797 * r[i] - 74.203 * g[i] + 112.0 * b[i]) / 255.0));
    data.extend((0..h * w).map(|i| (128.0 + 112.0 * r[i] - 93.786 * g[i] - 18.214 * b[i]) / 255.0));
    Frame::with_space(Tensor::new(&[3, h, w], data)?, ColorSpace::YCbCr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_white_gray() {
        let y = |rgb| rgb_to_y(&Frame::constant(1, 1, rgb)).unwrap().item();
        assert!((y([0.0; 3]) - 16.0).abs() < 1e-12);
        assert!((y([1.0; 3]) - 235.0).abs() < 1e-12);
        for g in [0.1, 0.37, 0.5, 0.93] {
            assert!((y([g; 3]) - (16.0 + 219.0 * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_space() {
        let f = rgb_to_ycbcr(&Frame::constant(2, 2, [0.2, 0.4, 0.6])).unwrap();
        assert!(rgb_to_y(&f).is_err());
        // neutral colours carry no chroma
        let grey = rgb_to_ycbcr(&Frame::constant(1, 1, [0.5; 3])).unwrap();
        assert!((grey.pixels().data()[1] - 128.0 / 255.0).abs() < 1e-12);
        assert!((grey.pixels().data()[2] - 128.0 / 255.0).abs() < 1e-12);
    }
}
