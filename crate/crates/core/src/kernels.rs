//! Unchecked numeric kernels on flat row-major buffers.
//!
//! Callers validate shapes; everything here assumes consistent extents.
//! Convolutions use a column buffer (`im2col`) and a dense matrix product,
//! with stride 1 and zero "same" padding of `dilation * (k - 1) / 2`.

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// `trans_a` / `trans_b` read the stored buffer transposed (`a` stored as
/// `k×m`, `b` stored as `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strided views touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Integer displacement of tap `(ky, kx)` relative to the output pixel.
    pub fn tap_offset(&self, ky: usize, kx: usize) -> (isize, isize) {
        let d = self.dilation as isize;
        let py = d * (self.kh as isize - 1) / 2;
        let px = d * (self.kw as isize - 1) / 2;
        (ky as isize * d - py, kx as isize * d - px)
    }

    /// Output column range `[lo, hi)` for which `x + dx` stays inside the row.
    fn valid_cols(&self, dx: isize) -> (usize, usize) {
        let w = self.width as isize;
        let lo = (-dx).clamp(0, w) as usize;
        let hi = (w - dx).clamp(0, w) as usize;
        (lo, hi.max(lo))
    }
}

/// Gathers a `(C·kh·kw, H·W)` column buffer; out-of-bounds taps read zero.
pub fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, hw) = (g.height, g.width, g.plane());
    cols.fill(0.0);
    for c in 0..g.channels {
        let src = &input[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (dy, dx) = g.tap_offset(ky, kx);
                let (x0, x1) = g.valid_cols(dx);
                if x0 == x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let xs = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s + xs..s + xs + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let (h, w, hw) = (g.height, g.width, g.plane());
    for c in 0..g.channels {
        let dst = &mut grad_input[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (dy, dx) = g.tap_offset(ky, kx);
                let (x0, x1) = g.valid_cols(dx);
                if x0 == x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w + (x0 as isize + dx) as usize;
                    for (d, s) in dst[base..base + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Forward convolution: `out (O, H·W) = weight (O, C·kh·kw) · cols + bias`.
pub fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom, out_channels: usize) -> Vec<f64> {
    let hw = g.plane();
    let ck = g.channels * g.taps();
    let mut out = vec![0.0; out_channels * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    if g.taps() == 1 {
        gemm(out_channels, ck, hw, weight, false, input, false, 1.0, &mut out);
    } else {
        let mut cols = vec![0.0; ck * hw];
        im2col(input, g, &mut cols);
        gemm(out_channels, ck, hw, weight, false, &cols, false, 1.0, &mut out);
    }
    out
}

/// Gradients of [`conv_forward`] w.r.t. input, weight and bias, each added
/// into the provided buffer when present.
pub fn conv_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    out_channels: usize,
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let hw = g.plane();
    let ck = g.channels * g.taps();
    if let Some(gb) = grad_bias {
        for (o, gbo) in gb.iter_mut().enumerate() {
            *gbo += grad_out[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    let pointwise = g.taps() == 1;
    if let Some(gw) = grad_weight {
        if pointwise {
            gemm(out_channels, hw, ck, grad_out, false, input, true, 1.0, gw);
        } else {
            let mut cols = vec![0.0; ck * hw];
            im2col(input, g, &mut cols);
            gemm(out_channels, hw, ck, grad_out, false, &cols, true, 1.0, gw);
        }
    }
    if let Some(gi) = grad_input {
        if pointwise {
            gemm(ck, out_channels, hw, weight, true, grad_out, false, 1.0, gi);
        } else {
            let mut gcols = vec![0.0; ck * hw];
            gemm(ck, out_channels, hw, weight, true, grad_out, false, 0.0, &mut gcols);
            col2im(&gcols, g, gi);
        }
    }
}

/// Bilinear read of one `H×W` plane at a real coordinate. Each of the four
/// integer neighbours outside the plane contributes zero.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let corners = BilinearCorners::new(h, w, y, x);
    corners.taps().map(|(idx, wt, _, _)| wt * plane[idx]).sum()
}

/// The four neighbours of a sampling position, their weights, and the
/// partial derivatives of each weight w.r.t. `y` and `x`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearCorners {
    idx: [usize; 4],
    valid: [bool; 4],
    wt: [f64; 4],
    dwy: [f64; 4],
    dwx: [f64; 4],
}

impl BilinearCorners {
    pub fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        let (y0, x0) = (y0 as i64, x0 as i64);
        let mut out = BilinearCorners {
            idx: [0; 4],
            valid: [false; 4],
            wt: [hy * hx, hy * lx, ly * hx, ly * lx],
            dwy: [-hx, -lx, hx, lx],
            dwx: [-hy, hy, -ly, ly],
        };
        let pts = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        for (i, &(py, px)) in pts.iter().enumerate() {
            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                out.valid[i] = true;
                out.idx[i] = py as usize * w + px as usize;
            }
        }
        out
    }

    /// `(flat index, weight, dweight/dy, dweight/dx)` of in-bounds neighbours.
    pub fn taps(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..4).filter(|&i| self.valid[i]).map(|i| (self.idx[i], self.wt[i], self.dwy[i], self.dwx[i]))
    }
}

/// Deformable column buffer: `cols[(c·K + k), p] = m_k(p) · X_c(p + p_k + Δp_k(p))`.
///
/// `offsets` is `(2K, H, W)` holding `(Δy, Δx)` pairs per tap, `modulation`
/// is `(K, H, W)`.
pub fn deform_im2col(input: &[f64], offsets: &[f64], modulation: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, hw, k_taps) = (g.height, g.width, g.plane(), g.taps());
    for k in 0..k_taps {
        let (dy, dx) = g.tap_offset(k / g.kw, k % g.kw);
        for p in 0..hw {
            let y = (p / w) as f64 + dy as f64 + offsets[(2 * k) * hw + p];
            let x = (p % w) as f64 + dx as f64 + offsets[(2 * k + 1) * hw + p];
            let m = modulation[k * hw + p];
            let corners = BilinearCorners::new(h, w, y, x);
            for c in 0..g.channels {
                let plane = &input[c * hw..(c + 1) * hw];
                let s: f64 = corners.taps().map(|(i, wt, _, _)| wt * plane[i]).sum();
                cols[(c * k_taps + k) * hw + p] = m * s;
            }
        }
    }
}

/// Adjoint of [`deform_im2col`] given column gradients.
pub fn deform_col2im(
    input: &[f64],
    offsets: &[f64],
    modulation: &[f64],
    g: &ConvGeom,
    grad_cols: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_offsets: Option<&mut [f64]>,
    mut grad_modulation: Option<&mut [f64]>,
) {
    let (h, w, hw, k_taps) = (g.height, g.width, g.plane(), g.taps());
    for k in 0..k_taps {
        let (dy, dx) = g.tap_offset(k / g.kw, k % g.kw);
        for p in 0..hw {
            let y = (p / w) as f64 + dy as f64 + offsets[(2 * k) * hw + p];
            let x = (p % w) as f64 + dx as f64 + offsets[(2 * k + 1) * hw + p];
            let m = modulation[k * hw + p];
            let corners = BilinearCorners::new(h, w, y, x);
            let (mut gy, mut gx, mut gm) = (0.0, 0.0, 0.0);
            for c in 0..g.channels {
                let gc = grad_cols[(c * k_taps + k) * hw + p];
                if gc == 0.0 {
                    continue;
                }
                let base = c * hw;
                let plane = &input[base..base + hw];
                let mut s = 0.0;
                for (i, wt, wy, wx) in corners.taps() {
                    let v = plane[i];
                    s += wt * v;
                    gy += gc * m * wy * v;
                    gx += gc * m * wx * v;
                    if let Some(gi) = grad_input.as_deref_mut() {
                        gi[base + i] += gc * m * wt;
                    }
                }
                gm += gc * s;
            }
            if let Some(go) = grad_offsets.as_deref_mut() {
                go[(2 * k) * hw + p] += gy;
                go[(2 * k + 1) * hw + p] += gx;
            }
            if let Some(gmod) = grad_modulation.as_deref_mut() {
                gmod[k * hw + p] += gm;
            }
        }
    }
}

/// `out(c, h·r+dy, w·r+dx) = in(c·r² + dy·r + dx, h, w)`.
pub fn pixel_shuffle(input: &[f64], c_out: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    let (ow, hw) = (w * r, h * w);
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let src = &input[(c * r * r + dy * r + dx) * hw..][..hw];
                for y in 0..h {
                    let row = (c * h * r + y * r + dy) * ow;
                    for x in 0..w {
                        out[row + x * r + dx] = src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`] (`h`, `w` are the low-resolution extents).
pub fn pixel_unshuffle(input: &[f64], c_out: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    let (ow, hw) = (w * r, h * w);
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let dst = &mut out[(c * r * r + dy * r + dx) * hw..][..hw];
                for y in 0..h {
                    let row = (c * h * r + y * r + dy) * ow;
                    for x in 0..w {
                        dst[y * w + x] = input[row + x * r + dx];
                    }
                }
            }
        }
    }
    out
}

/// Softmax over the middle extent of an `(outer, len, inner)` view.
pub fn softmax(input: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| input[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (input[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// Gradient of softmax given its output `y`: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_backward(y: &[f64], grad_out: &[f64], outer: usize, len: usize, inner: usize, grad_in: &mut [f64]) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| grad_out[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                grad_in[at(j)] += y[at(j)] * (grad_out[at(j)] - dot);
            }
        }
    }
}
