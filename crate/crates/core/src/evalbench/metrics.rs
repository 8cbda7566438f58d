use crate::degradation::Kernel;
use crate::error::{domain, Result};
use crate::image::{ImagePlane, ValueRange};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEFAULT_BORDER_FRACTION: f64 = 0.05;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Pixels cropped from each side: `ceil(fraction * dim)`, with a small
/// tolerance so products like `0.05 * 60` do not round up past the integer.
pub fn border_pixels(dim: usize, fraction: f64) -> usize {
    (fraction * dim as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Cropped luminance planes of both images, checked for compatibility.
fn prepared(pred: &ImagePlane, gt: &ImagePlane, border_fraction: f64) -> Result<(ImagePlane, ImagePlane)> {
    if !pred.same_shape(gt) {
        return Err(domain!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        ));
    }
    if pred.range() != ValueRange::Unit || gt.range() != ValueRange::Unit {
        return Err(domain!("metrics expect unit-range images"));
    }
    if !(0.0..0.5).contains(&border_fraction) {
        return Err(domain!("border fraction {border_fraction} outside [0, 0.5)"));
    }
    let (h, w) = (gt.height(), gt.width());
    let (by, bx) = (border_pixels(h, border_fraction), border_pixels(w, border_fraction));
    if 2 * by >= h || 2 * bx >= w {
        return Err(domain!("border crop leaves nothing of a {h}x{w} image"));
    }
    let crop = |im: &ImagePlane| im.luminance().crop(by, bx, h - 2 * by, w - 2 * bx);
    Ok((crop(pred)?, crop(gt)?))
}

/// PSNR in dB on the luminance channel after border cropping, peak 1.
pub fn psnr_y(pred: &ImagePlane, gt: &ImagePlane, border_fraction: f64) -> Result<f64> {
    let (p, g) = prepared(pred, gt, border_fraction)?;
    let n = p.data().len() as f64;
    let mse = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM on the luminance channel: 11x11 Gaussian window (sigma 1.5),
/// valid windows only, dynamic range 1.
pub fn ssim_y(pred: &ImagePlane, gt: &ImagePlane, border_fraction: f64) -> Result<f64> {
    let (p, g) = prepared(pred, gt, border_fraction)?;
    let (h, w) = (p.height(), p.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(domain!("cropped image {h}x{w} smaller than the SSIM window"));
    }
    let win = gaussian_window();
    let (a, b) = (p.data(), g.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &win);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &win);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &win);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Kernel agreement: `(mse, centroid_err_px)`.
///
/// The centroid error compares the centroids' offsets from their canvas
/// centers. For the MSE, `k_est` is translated (bilinearly) so its centroid
/// lands on `k_gt`'s, then compared weight-by-weight on `k_gt`'s canvas.
pub fn kernel_similarity(k_est: &Kernel, k_gt: &Kernel) -> Result<(f64, f64)> {
    let est = k_est.normalized()?;
    let gt = k_gt.normalized()?;
    let (ey, ex) = est.centroid().ok_or_else(|| domain!("estimated kernel has no mass"))?;
    let (gy, gx) = gt.centroid().ok_or_else(|| domain!("ground-truth kernel has no mass"))?;
    let (ecy, ecx) = est.canvas_center();
    let (gcy, gcx) = gt.canvas_center();
    let err = ((ey - ecy) - (gy - gcy)).hypot((ex - ecx) - (gx - gcx));

    let sample = |y: f64, x: f64| -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= est.height() as f64 || xx >= est.width() as f64 {
                0.0
            } else {
                est.at(yy as usize, xx as usize)
            }
        };
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
            + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
    };
    let mut sq = 0.0;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let v = sample(y as f64 - gy + ey, x as f64 - gx + ex);
            sq += (v - gt.at(y, x)).powi(2);
        }
    }
    Ok((sq / (gt.height() * gt.width()) as f64, err))
}
