//! Inputs shared by the benchmarks.

use blindsr_core::degradation::Kernel;
use blindsr_core::{ImagePlane, ValueRange};

/// Deterministic textured image in unit range.
pub fn textured(size: usize) -> ImagePlane {
    ImagePlane::from_fn(size, size, 3, ValueRange::Unit, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        (0.5 + 0.3 * (0.3 * xf + 0.11 * yf).sin() + 0.1 * (0.05 * xf * yf).cos() + 0.03 * c as f64).clamp(0.0, 1.0)
    })
    .expect("valid dimensions")
}

/// Normalized isotropic Gaussian on a `size x size` canvas.
pub fn gaussian(size: usize, sigma: f64) -> Kernel {
    let c = (size as f64 - 1.0) / 2.0;
    Kernel::from_fn(size, size, |y, x| {
        let r2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
        (-r2 / (2.0 * sigma * sigma)).exp()
    })
    .and_then(|k| k.normalized())
    .expect("valid kernel")
}
