//! Brute-force reference implementations, written as directly as possible
//! from the operator definitions.
#![allow(dead_code)]

use dnln::Tensor;

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, dil: usize) -> Tensor {
    let (c, h, wd) = x.dims3().unwrap();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pad = (dil * (k - 1) / 2) as isize;
    let mut out = Tensor::zeros(&[o, h, wd]);
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + (ky * dil) as isize - pad;
                            let sx = xx as isize + (kx * dil) as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += w.at(&[oc, ic, ky, kx]) * x.at(&[ic, sy as usize, sx as usize]);
                            }
                        }
                    }
                }
                out.set(&[oc, y, xx], acc);
            }
        }
    }
    out
}

/// Value of channel `c` at a real position; outside pixels read zero.
pub fn bilinear(x: &Tensor, c: usize, py: f64, px: f64) -> f64 {
    let (_, h, w) = x.dims3().unwrap();
    let (y0, x0) = (py.floor(), px.floor());
    let mut acc = 0.0;
    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let (yy, xx) = (y0 + dy, x0 + dx);
        let weight = (1.0 - (py - yy).abs()) * (1.0 - (px - xx).abs());
        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
            acc += weight * x.at(&[c, yy as usize, xx as usize]);
        }
    }
    acc
}

pub fn deform_conv(x: &Tensor, offsets: &Tensor, modulation: &Tensor, w: &Tensor, b: &Tensor, dil: usize) -> Tensor {
    let (c, h, wd) = x.dims3().unwrap();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pad = (dil * (k - 1) / 2) as f64;
    let mut out = Tensor::zeros(&[o, h, wd]);
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[oc];
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let py = y as f64 + (ky * dil) as f64 - pad + offsets.at(&[2 * tap, y, xx]);
                        let px = xx as f64 + (kx * dil) as f64 - pad + offsets.at(&[2 * tap + 1, y, xx]);
                        let m = modulation.at(&[tap, y, xx]);
                        for ic in 0..c {
                            acc += w.at(&[oc, ic, ky, kx]) * m * bilinear(x, ic, py, px);
                        }
                    }
                }
                out.set(&[oc, y, xx], acc);
            }
        }
    }
    out
}

pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let co = c / (r * r);
    let mut out = Tensor::zeros(&[co, h * r, w * r]);
    for oc in 0..co {
        for y in 0..h {
            for xx in 0..w {
                for i in 0..r {
                    for j in 0..r {
                        out.set(&[oc, y * r + i, xx * r + j], x.at(&[oc * r * r + i * r + j, y, xx]));
                    }
                }
            }
        }
    }
    out
}

pub fn leaky_relu(t: &Tensor, slope: f64) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

/// `x + fuse(concat(s_1..s_R))` with `s_r = Σ_{j<=r} lrelu(conv_{d=j}(x))`.
pub fn hffb(x: &Tensor, branches: &[(Tensor, Tensor)], fuse_w: &Tensor, fuse_b: &Tensor) -> Tensor {
    let (_, h, w) = x.dims3().unwrap();
    let mut sums: Vec<Tensor> = Vec::new();
    for (r, (bw, bb)) in branches.iter().enumerate() {
        let d = leaky_relu(&conv2d(x, bw, bb, r + 1), 0.2);
        let s = match sums.last() {
            Some(prev) => add(prev, &d),
            None => d,
        };
        sums.push(s);
    }
    let mut cat = Vec::new();
    for s in &sums {
        cat.extend_from_slice(s.data());
    }
    let cat = Tensor::new(&[cat.len() / (h * w), h, w], cat).unwrap();
    add(x, &conv2d(&cat, fuse_w, fuse_b, 1))
}

/// Applies a 1×1 convolution at one position.
fn pointwise(w: &Tensor, b: &Tensor, x: &Tensor, y: usize, xx: usize) -> Vec<f64> {
    let (o, c) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|oc| b.data()[oc] + (0..c).map(|ic| w.at(&[oc, ic, 0, 0]) * x.at(&[ic, y, xx])).sum::<f64>()).collect()
}

/// Double loop over positions with an explicit softmax per row.
#[allow(clippy::too_many_arguments)]
pub fn nonlocal(
    x: &Tensor,
    y: &Tensor,
    (uw, ub): (&Tensor, &Tensor),
    (vw, vb): (&Tensor, &Tensor),
    (gw, gb): (&Tensor, &Tensor),
    (zw, zb): (&Tensor, &Tensor),
) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let pos: Vec<(usize, usize)> = (0..h).flat_map(|a| (0..w).map(move |b| (a, b))).collect();
    let u: Vec<Vec<f64>> = pos.iter().map(|&(a, b)| pointwise(uw, ub, x, a, b)).collect();
    let v: Vec<Vec<f64>> = pos.iter().map(|&(a, b)| pointwise(vw, vb, y, a, b)).collect();
    let g: Vec<Vec<f64>> = pos.iter().map(|&(a, b)| pointwise(gw, gb, y, a, b)).collect();
    let e = u[0].len();
    let mut out = x.clone();
    for (p, &(py, px)) in pos.iter().enumerate() {
        let logits: Vec<f64> = v.iter().map(|vn| u[p].iter().zip(vn).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        let agg: Vec<f64> = (0..e).map(|k| (0..pos.len()).map(|n| ex[n] / z * g[n][k]).sum()).collect();
        for oc in 0..c {
            let val = zb.data()[oc] + (0..e).map(|k| zw.at(&[oc, k, 0, 0]) * agg[k]).sum::<f64>();
            out.set(&[oc, py, px], x.at(&[oc, py, px]) + val);
        }
    }
    out
}
