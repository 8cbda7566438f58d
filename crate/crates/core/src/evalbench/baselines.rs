use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::degradation::{convolve_downsample, Kernel};
use crate::error::{domain, Result};
use crate::image::{ImagePlane, ValueRange};

/// Keys cubic convolution weight with `a = -0.5`.
fn keys(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(index, weight)` for output coordinate `x` at scale `s`; HR pixel
/// `x` sits at LR coordinate `x / s`, the lattice the degradation samples.
fn taps(x: usize, s: usize, n: usize) -> [(usize, f64); 4] {
    let u = x as f64 / s as f64;
    let base = u.floor() as isize;
    let mut out = [(0, 0.0); 4];
    for (j, o) in out.iter_mut().enumerate() {
        let i = base - 1 + j as isize;
        *o = (i.clamp(0, n as isize - 1) as usize, keys(u - i as f64));
    }
    out
}

/// Bicubic interpolation by an integer factor, edges clamped. Keeps the
/// input's range tag.
pub fn bicubic_upscale(lr: &ImagePlane, s: usize) -> Result<ImagePlane> {
    if s == 0 {
        return Err(domain!("scale factor must be >= 1"));
    }
    let (h, w, c) = (lr.height(), lr.width(), lr.channels());
    let (ho, wo) = (h * s, w * s);
    let ty: Vec<_> = (0..ho).map(|y| taps(y, s, h)).collect();
    let tx: Vec<_> = (0..wo).map(|x| taps(x, s, w)).collect();
    let mut data = Vec::with_capacity(ho * wo * c);
    for ch in 0..c {
        // rows first, then columns
        let mut tmp = vec![0.0; h * wo];
        for y in 0..h {
            for (x, t) in tx.iter().enumerate() {
                tmp[y * wo + x] = t.iter().map(|&(i, wt)| wt * lr.get(ch, y, i)).sum();
            }
        }
        for t in &ty {
            for x in 0..wo {
                data.push(t.iter().map(|&(i, wt)| wt * tmp[i * wo + x]).sum());
            }
        }
    }
    ImagePlane::new(ho, wo, c, data, lr.range())
}

/// In-place 2D DFT of a row-major `h x w` buffer.
fn fft2(buf: &mut [Complex64], h: usize, w: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    if inverse {
        let n = (h * w) as f64;
        buf.iter_mut().for_each(|v| *v /= n);
    }
}

/// Truncated pseudo-inverse of the periodic model `A = S C_k`, applied to
/// LR residuals: `u = A^H (A A^H)^+ r`. `A A^H` is diagonal in the LR
/// Fourier domain, with entries the alias-averaged kernel power.
struct PseudoInverse {
    kf: Vec<Complex64>,
    inv_d: Vec<f64>,
    lr: (usize, usize),
    s: usize,
    planner: FftPlanner<f64>,
}

/// Relative singular-value cutoff of the pseudo-inverse.
const PINV_CUTOFF: f64 = 1e-3;

impl PseudoInverse {
    fn new(k: &Kernel, h: usize, w: usize, s: usize) -> Result<Self> {
        let (hh, ww) = (h * s, w * s);
        if k.height() > hh || k.width() > ww {
            return Err(domain!("kernel larger than the output image"));
        }
        let mut planner = FftPlanner::new();
        let mut kf = vec![Complex64::default(); hh * ww];
        let (ay, ax) = k.anchor();
        for y in 0..k.height() {
            for x in 0..k.width() {
                let py = (y as isize - ay as isize).rem_euclid(hh as isize) as usize;
                let px = (x as isize - ax as isize).rem_euclid(ww as isize) as usize;
                kf[py * ww + px] += k.at(y, x);
            }
        }
        fft2(&mut kf, hh, ww, &mut planner, false);
        let mut d = vec![0.0; h * w];
        for fy in 0..hh {
            for fx in 0..ww {
                d[(fy % h) * w + fx % w] += kf[fy * ww + fx].norm_sqr() / (s * s) as f64;
            }
        }
        let max_sv = d.iter().cloned().fold(0.0, f64::max).sqrt();
        let inv_d =
            d.iter().map(|&v| if v.sqrt() < PINV_CUTOFF * max_sv || v == 0.0 { 0.0 } else { 1.0 / v }).collect();
        Ok(Self { kf, inv_d, lr: (h, w), s, planner })
    }

    fn apply(&mut self, r: &[f64]) -> Vec<f64> {
        let (h, w) = self.lr;
        let (hh, ww) = (h * self.s, w * self.s);
        let mut rf: Vec<Complex64> = r.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut rf, h, w, &mut self.planner, false);
        for (v, d) in rf.iter_mut().zip(&self.inv_d) {
            *v *= d;
        }
        let mut uf = vec![Complex64::default(); hh * ww];
        for fy in 0..hh {
            for fx in 0..ww {
                uf[fy * ww + fx] = self.kf[fy * ww + fx].conj() * rf[(fy % h) * w + fx % w];
            }
        }
        fft2(&mut uf, hh, ww, &mut self.planner, true);
        uf.iter().map(|v| v.re).collect()
    }
}

/// Iterative backprojection with the kernel's pseudo-inverse.
///
/// Starts from [`bicubic_upscale`] and applies `x += A^+ (lr - (x * k)↓s)`
/// with the exact (reflect-boundary) degradation for the residual and a
/// periodic, frequency-domain truncated pseudo-inverse for the update.
/// Stops early once the residual has grown three times in a row and returns
/// the iterate with the smallest residual, clamped to the unit range.
pub fn pinv_backproject(lr: &ImagePlane, k: &Kernel, s: usize, iters: usize) -> Result<ImagePlane> {
    if lr.range() != ValueRange::Unit {
        return Err(domain!("pinv_backproject expects a unit-range image"));
    }
    let mut x = bicubic_upscale(lr, s)?;
    if iters == 0 {
        return Ok(x.clamped());
    }
    let k = k.normalized()?;
    let (h, w) = (lr.height(), lr.width());
    let mut pinv = PseudoInverse::new(&k, h, w, s)?;

    let residual = |x: &ImagePlane| -> Result<(ImagePlane, f64)> {
        let mut r = convolve_downsample(x, &k, s)?;
        for (rv, l) in r.data_mut().iter_mut().zip(lr.data()) {
            *rv = l - *rv;
        }
        let norm = r.data().iter().map(|v| v * v).sum();
        Ok((r, norm))
    };
    let (mut r, mut norm) = residual(&x)?;
    let mut best = (norm, x.clone());
    let mut growth = 0;
    for _ in 0..iters {
        if norm == 0.0 {
            break;
        }
        let n_hr = x.height() * x.width();
        for c in 0..x.channels() {
            let u = pinv.apply(r.plane(c));
            for (xv, uv) in x.data_mut()[c * n_hr..(c + 1) * n_hr].iter_mut().zip(&u) {
                *xv += uv;
            }
        }
        let prev = norm;
        (r, norm) = residual(&x)?;
        if norm < best.0 {
            best = (norm, x.clone());
        }
        growth = if norm > prev { growth + 1 } else { 0 };
        if growth >= 3 {
            log::warn!("backprojection diverging; returning best iterate");
            break;
        }
    }
    Ok(best.1.clamped())
}
