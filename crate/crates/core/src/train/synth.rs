//! Translated-texture clips: a smooth random pattern is rendered at high
//! resolution, shifted by whole pixels per frame, and degraded with the
//! cubic downscaler.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sub_seed;
use crate::error::{Error, Result};
use crate::pipeline::{cubic_resize, Frame, FrameSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Largest per-frame displacement in high-resolution pixels.
    pub shift_range: usize,
    pub seed: u64,
    pub lr_height: usize,
    pub lr_width: usize,
    pub radius: usize,
    pub scale: usize,
}

impl SynthSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        SynthSpec { count, shift_range: 3, seed, lr_height: 24, lr_width: 24, radius: 1, scale: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub seq: FrameSequence,
    /// High-resolution frames before degradation.
    pub hr_frames: Vec<Frame>,
    /// `(dy, dx)` per frame: frame `i` at `(y, x)` shows the reference
    /// content at `(y + dy, x + dx)`.
    pub shifts: Vec<(i64, i64)>,
}

#[derive(Clone, Debug)]
struct Wave {
    amp: [f64; 3],
    fy: f64,
    fx: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct Disc {
    cy: f64,
    cx: f64,
    r: f64,
    delta: [f64; 3],
}

/// A continuous RGB pattern on the plane.
#[derive(Clone, Debug)]
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
    discs: Vec<Disc>,
}

impl Texture {
    /// Draws a pattern sized for roughly `h × w` pixels.
    pub fn random(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let mut rgb = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let base = rgb(0.25, 0.75);
        let waves = (0..4)
            .map(|_| {
                let period = rng.random_range(6.0..40.0);
                let angle = rng.random_range(0.0..TAU);
                Wave {
                    amp: [0.0; 3].map(|_| rng.random_range(0.03..0.12)),
                    fy: angle.sin() / period,
                    fx: angle.cos() / period,
                    phase: rng.random_range(0.0..TAU),
                }
            })
            .collect();
        let (hf, wf) = (h as f64, w as f64);
        let discs = (0..6)
            .map(|_| Disc {
                cy: rng.random_range(-0.1 * hf..1.1 * hf),
                cx: rng.random_range(-0.1 * wf..1.1 * wf),
                r: rng.random_range(0.08..0.3) * hf.min(wf),
                delta: [0.0; 3].map(|_| rng.random_range(-0.35..0.35)),
            })
            .collect();
        Texture { base, waves, discs }
    }

    pub fn sample(&self, y: f64, x: f64) -> [f64; 3] {
        let mut out = self.base;
        for wv in &self.waves {
            let s = (TAU * (wv.fy * y + wv.fx * x) + wv.phase).sin();
            for c in 0..3 {
                out[c] += wv.amp[c] * s;
            }
        }
        for d in &self.discs {
            let dist = ((y - d.cy).powi(2) + (x - d.cx).powi(2)).sqrt();
            // soft edge about one pixel wide
            let inside = 1.0 / (1.0 + ((dist - d.r) * 2.0).exp());
            for c in 0..3 {
                out[c] += d.delta[c] * inside;
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }

    /// Renders pixel `(y, x)` from the pattern at `(y + dy, x + dx)`.
    pub fn render(&self, h: usize, w: usize, dy: i64, dx: i64) -> Frame {
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = self.sample((y as i64 + dy) as f64, (x as i64 + dx) as f64);
                for c in 0..3 {
                    data[(c * h + y) * w + x] = v[c];
                }
            }
        }
        Frame::rgb(Tensor::new(&[3, h, w], data).expect("sized buffer")).expect("clamped values")
    }
}

/// Renders `spec.count` windows of `2N+1` frames under constant integer
/// motion drawn from `[-shift_range, shift_range]²`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    if spec.lr_height == 0 || spec.lr_width == 0 || spec.scale == 0 {
        return Err(Error::invalid("synth_dataset", "frame size and scale must be positive"));
    }
    let (hh, hw) = (spec.lr_height * spec.scale, spec.lr_width * spec.scale);
    let r = spec.shift_range as i64;
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "texture", i as u64));
            let tex = Texture::random(&mut rng, hh, hw);
            let vy = rng.random_range(-r..=r);
            let vx = rng.random_range(-r..=r);
            let shifts: Vec<(i64, i64)> =
                (0..=2 * spec.radius as i64).map(|k| ((k - spec.radius as i64) * vy, (k - spec.radius as i64) * vx)).collect();
            let hr_frames: Vec<Frame> = shifts.iter().map(|&(dy, dx)| tex.render(hh, hw, dy, dx)).collect();
            let lr = hr_frames.iter().map(|f| cubic_resize(f, 1.0 / spec.scale as f64)).collect::<Result<Vec<_>>>()?;
            let seq = FrameSequence::new(lr, Some(hr_frames[spec.radius].clone()), spec.radius, spec.scale)?;
            Ok(SynthSample { seq, hr_frames, shifts })
        })
        .collect()
}
