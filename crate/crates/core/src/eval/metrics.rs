use crate::error::{Error, Result};
use crate::pipeline::{rgb_to_y, Frame};
use crate::tensor::Tensor;

/// Frame selection and cropping rules for scoring a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    /// Frames dropped at each end of a clip.
    pub exclude_boundary_frames: usize,
    /// Pixels removed from every image edge before scoring.
    pub border_crop: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { exclude_boundary_frames: 2, border_crop: 0 }
    }
}

impl EvalProtocol {
    /// Scored frame indices of a clip of `len` frames.
    pub fn scored(&self, len: usize) -> std::ops::Range<usize> {
        let e = self.exclude_boundary_frames;
        if len <= 2 * e {
            return 0..0;
        }
        e..len - e
    }
}

/// Luma planes of `pred` and `gt` (0–255), border-cropped.
fn luma_pair(op: &'static str, pred: &Frame, gt: &Frame, crop: usize) -> Result<(Tensor, Tensor)> {
    if pred.pixels().shape() != gt.pixels().shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.pixels().shape(), gt.pixels().shape())));
    }
    let (h, w) = (gt.height(), gt.width());
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::invalid(op, format!("border crop {crop} leaves nothing of {h}x{w}")));
    }
    let cut = |t: Tensor| {
        let (oh, ow) = (h - 2 * crop, w - 2 * crop);
        Tensor::from_fn(&[oh, ow], |i| t.data()[(i / ow + crop) * w + i % ow + crop])
    };
    Ok((cut(rgb_to_y(pred)?), cut(rgb_to_y(gt)?)))
}

/// `10·log10(255² / MSE)` on luma; `+∞` for identical images.
pub fn psnr_y(pred: &Frame, gt: &Frame, proto: &EvalProtocol) -> Result<f64> {
    let (a, b) = luma_pair("psnr_y", pred, gt, proto.border_crop)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity on luma with an 11×11 Gaussian window
/// (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, `L = 255`, over valid windows only.
pub fn ssim_y(pred: &Frame, gt: &Frame, proto: &EvalProtocol) -> Result<f64> {
    let (a, b) = luma_pair("ssim_y", pred, gt, proto.border_crop)?;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim_y", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Decibels with two decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Frame {
        Frame::rgb(Tensor::from_fn(&[3, h, w], |i| {
            let p = i % (h * w);
            (((p / w) * 7 + (p % w) * 3) % 23) as f64 / 22.0
        }))
        .unwrap()
    }

    #[test]
    fn psnr_closed_form() {
        let a = Frame::constant(16, 16, [0.3; 3]);
        assert_eq!(psnr_y(&a, &a, &EvalProtocol::default()).unwrap(), f64::INFINITY);
        // grey steps move luma by 219 per unit
        let b = Frame::constant(16, 16, [0.3 + 10.0 / 219.0; 3]);
        let p = psnr_y(&a, &b, &EvalProtocol::default()).unwrap();
        assert!((p - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-9);
        assert!((p - 28.13).abs() < 0.01);
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert_eq!(format_db(p), "28.13");
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = ramp(20, 24);
        let proto = EvalProtocol::default();
        assert_eq!(ssim_y(&a, &a, &proto).unwrap(), 1.0);
        let inv = Frame::rgb(a.pixels().map(|v| 1.0 - v)).unwrap();
        let s = ssim_y(&inv, &a, &proto).unwrap();
        assert!(s < 1.0 && s >= -1.0);
        assert!(ssim_y(&a, &ramp(20, 23), &proto).is_err());
        assert!(ssim_y(&ramp(8, 8), &ramp(8, 8), &proto).is_err());
    }

    #[test]
    fn border_crop_ignores_edges() {
        let a = ramp(20, 20);
        let mut t = a.pixels().clone();
        t.set(&[0, 0, 0], 1.0 - t.at(&[0, 0, 0]));
        let b = Frame::rgb(t).unwrap();
        let cropped = EvalProtocol { border_crop: 8, ..EvalProtocol::default() };
        assert_eq!(psnr_y(&a, &b, &cropped).unwrap(), f64::INFINITY);
        assert!(psnr_y(&a, &b, &EvalProtocol::default()).unwrap().is_finite());
        assert!(psnr_y(&a, &b, &EvalProtocol { border_crop: 10, ..cropped }).is_err());
    }

    #[test]
    fn scored_range() {
        let p = EvalProtocol::default();
        assert_eq!(p.scored(31).len(), 27);
        assert_eq!(p.scored(31), 2..29);
        assert_eq!(p.scored(4).len(), 0);
    }
}
