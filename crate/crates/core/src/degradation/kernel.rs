use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// A 2D SR-kernel stored row-major.
///
/// The anchor pixel `((h-1)/2, (w-1)/2)` is the tap that maps an input pixel
/// onto itself: a delta at `anchor + d` shifts the image by `+d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(domain!("kernel dimensions must be >= 1, got {height}x{width}"));
        }
        if values.len() != height * width {
            return Err(domain!("kernel buffer of {} values does not match {height}x{width}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel weights".into()));
        }
        Ok(Self { height, width, values })
    }

    /// Unit impulse at `anchor + (dy, dx)`.
    pub fn delta(height: usize, width: usize, dy: isize, dx: isize) -> Result<Self> {
        let (ay, ax) = (Self::anchor_of(height) as isize + dy, Self::anchor_of(width) as isize + dx);
        if ay < 0 || ax < 0 || ay >= height as isize || ax >= width as isize {
            return Err(domain!("delta offset ({dy},{dx}) outside {height}x{width} canvas"));
        }
        let mut values = vec![0.0; height * width];
        values[ay as usize * width + ax as usize] = 1.0;
        Self::new(height, width, values)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, values)
    }

    fn anchor_of(n: usize) -> usize {
        (n - 1) / 2
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Integer tap aligned with the output pixel.
    pub fn anchor(&self) -> (usize, usize) {
        (Self::anchor_of(self.height), Self::anchor_of(self.width))
    }

    /// Geometric canvas center `((h-1)/2, (w-1)/2)`, possibly half-integer.
    pub fn canvas_center(&self) -> (f64, f64) {
        ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Intensity-weighted centroid `(row, col)` in pixel units; `None` when the
    /// total mass is not positive.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let total = self.sum();
        if total <= 0.0 {
            return None;
        }
        let (mut cy, mut cx) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.at(y, x);
                cy += v * y as f64;
                cx += v * x as f64;
            }
        }
        Some((cy / total, cx / total))
    }

    /// Scales to unit sum.
    pub fn normalized(&self) -> Result<Kernel> {
        let s = self.sum();
        if s.abs() < 1e-12 {
            return Err(domain!("cannot normalize a kernel with zero sum"));
        }
        Kernel::new(self.height, self.width, self.values.iter().map(|v| v / s).collect())
    }

    /// Clamps negative weights to zero and rescales to unit sum. This is the
    /// export path for learned kernels, never used inside a loss.
    pub fn export(&self) -> Result<Kernel> {
        let clamped: Vec<f64> = self.values.iter().map(|v| v.max(0.0)).collect();
        let s: f64 = clamped.iter().sum();
        if s <= 0.0 {
            return Err(domain!("kernel has no positive mass to export"));
        }
        Kernel::new(self.height, self.width, clamped.into_iter().map(|v| v / s).collect())
    }

    /// Bilinear resampling onto an `h x w` canvas (pixel-center aligned),
    /// renormalized to unit sum.
    pub fn resized(&self, height: usize, width: usize) -> Result<Kernel> {
        if height == 0 || width == 0 {
            return Err(domain!("resize target must be non-empty"));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |u: f64, n: usize| -> (usize, usize, f64) {
            let u = u.clamp(0.0, (n - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, u - i0 as f64)
        };
        let out = Kernel::from_fn(height, width, |y, x| {
            let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, self.height);
            let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, self.width);
            let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
            let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        })?;
        out.normalized()
    }

    /// Text format: `h w` on the first line, then `h` rows of `w` floats.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for y in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|x| format!("{:e}", self.at(y, x))).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn parse_text(text: &str, path: &Path) -> Result<Kernel> {
        let bad = |msg: &str| Error::KernelFormat { path: path.to_path_buf(), msg: msg.to_string() };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("header must be `h w`"))?;
        let [h, w] = dims[..] else { return Err(bad("header must be `h w`")) };
        let mut values = Vec::with_capacity(h * w);
        for (i, line) in lines.enumerate() {
            if i >= h {
                return Err(bad("more rows than declared"));
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(&format!("row {} is not numeric", i + 1)))?;
            if row.len() != w {
                return Err(bad(&format!("row {} has {} values, expected {w}", i + 1, row.len())));
            }
            values.extend(row);
        }
        if values.len() != h * w {
            return Err(bad("fewer rows than declared"));
        }
        Kernel::new(h, w, values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Kernel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Parameters of a kernel generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum KernelGenerator {
    /// Rotated anisotropic Gaussian. Unset parameters are drawn from the
    /// entry seed: sigmas uniform in `[sigma_min, sigma_max]`, angle in `[0, pi)`.
    AnisotropicGaussian {
        size: usize,
        sigma_x: Option<f64>,
        sigma_y: Option<f64>,
        theta: Option<f64>,
        #[serde(default = "default_sigma_min")]
        sigma_min: f64,
        #[serde(default = "default_sigma_max")]
        sigma_max: f64,
    },
    /// A kernel file in the text format, resized to `size x size`.
    MeasuredFile {
        path: PathBuf,
        size: usize,
    },
    /// Two perpendicular bars of length `arm` and width `thickness`.
    LShape {
        size: usize,
        arm: usize,
        thickness: usize,
    },
    FilledSquare {
        size: usize,
        side: usize,
    },
    /// Square outline of width `thickness`.
    EmptySquare {
        size: usize,
        side: usize,
        thickness: usize,
    },
    Delta {
        size: usize,
        #[serde(default)]
        dy: isize,
        #[serde(default)]
        dx: isize,
    },
}

fn default_sigma_min() -> f64 {
    0.6
}

fn default_sigma_max() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBankEntry {
    pub id: String,
    #[serde(flatten)]
    pub generator: KernelGenerator,
    #[serde(default)]
    pub seed: u64,
}

/// Places a `side x side` box centered on a `size x size` canvas.
fn centered_box(size: usize, side: usize) -> Result<usize> {
    if side == 0 || side > size {
        return Err(domain!("shape side {side} must be in 1..={size}"));
    }
    Ok((size - side) / 2)
}

/// Builds the kernel described by `entry`, normalized to unit sum.
pub fn make_kernel(entry: &KernelBankEntry) -> Result<Kernel> {
    use KernelGenerator::*;
    let nonzero = |size: usize| {
        if size == 0 {
            Err(domain!("kernel `{}` has an empty canvas", entry.id))
        } else {
            Ok(size)
        }
    };
    let k = match &entry.generator {
        AnisotropicGaussian { size, sigma_x, sigma_y, theta, sigma_min, sigma_max } => {
            let size = nonzero(*size)?;
            let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
            if !(*sigma_min > 0.0 && sigma_max >= sigma_min) {
                return Err(domain!("invalid sigma range [{sigma_min}, {sigma_max}]"));
            }
            let mut draw = |v: Option<f64>, lo: f64, hi: f64| v.unwrap_or_else(|| rng.random_range(lo..=hi));
            let sx = draw(*sigma_x, *sigma_min, *sigma_max);
            let sy = draw(*sigma_y, *sigma_min, *sigma_max);
            let th = draw(*theta, 0.0, std::f64::consts::PI);
            if sx <= 0.0 || sy <= 0.0 {
                return Err(domain!("gaussian sigmas must be positive, got ({sx}, {sy})"));
            }
            let c = (size as f64 - 1.0) / 2.0;
            let (sin, cos) = th.sin_cos();
            Kernel::from_fn(size, size, |y, x| {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                (-(u * u) / (2.0 * sx * sx) - (v * v) / (2.0 * sy * sy)).exp()
            })?
        }
        MeasuredFile { path, size } => Kernel::load(path)?.resized(nonzero(*size)?, *size)?,
        LShape { size, arm, thickness } => {
            let off = centered_box(nonzero(*size)?, *arm)?;
            if *thickness == 0 || thickness > arm {
                return Err(domain!("L-shape thickness must be in 1..={arm}"));
            }
            Kernel::from_fn(*size, *size, |y, x| {
                let inside = y >= off && y < off + arm && x >= off && x < off + arm;
                let vertical = x < off + thickness;
                let horizontal = y >= off + arm - thickness;
                if inside && (vertical || horizontal) {
                    1.0
                } else {
                    0.0
                }
            })?
        }
        FilledSquare { size, side } => {
            let off = centered_box(nonzero(*size)?, *side)?;
            Kernel::from_fn(*size, *size, |y, x| {
                if (off..off + side).contains(&y) && (off..off + side).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })?
        }
        EmptySquare { size, side, thickness } => {
            let off = centered_box(nonzero(*size)?, *side)?;
            if *thickness == 0 || 2 * thickness >= *side {
                return Err(domain!("empty-square thickness must leave a hole"));
            }
            Kernel::from_fn(*size, *size, |y, x| {
                let inside = (off..off + side).contains(&y) && (off..off + side).contains(&x);
                let hole = (off + thickness..off + side - thickness).contains(&y)
                    && (off + thickness..off + side - thickness).contains(&x);
                if inside && !hole {
                    1.0
                } else {
                    0.0
                }
            })?
        }
        Delta { size, dy, dx } => Kernel::delta(nonzero(*size)?, *size, *dy, *dx)?,
    };
    k.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(generator: KernelGenerator) -> KernelBankEntry {
        KernelBankEntry { id: "k".into(), generator, seed: 7 }
    }

    #[test]
    fn delta_has_unit_tap_at_center() {
        let k = make_kernel(&entry(KernelGenerator::Delta { size: 5, dy: 0, dx: 0 })).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(k.at(y, x), if (y, x) == (2, 2) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn filled_square_is_uniform() {
        let k = make_kernel(&entry(KernelGenerator::FilledSquare { size: 24, side: 4 })).unwrap();
        let nonzero: Vec<f64> = k.values().iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero.len(), 16);
        assert!(nonzero.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn isotropic_gaussian_matches_closed_form() {
        let k = make_kernel(&entry(KernelGenerator::AnisotropicGaussian {
            size: 7,
            sigma_x: Some(1.0),
            sigma_y: Some(1.0),
            theta: Some(0.3),
            sigma_min: 0.6,
            sigma_max: 5.0,
        }))
        .unwrap();
        let g = |y: f64, x: f64| (-(x * x + y * y) / 2.0).exp();
        let z: f64 = (0..49).map(|i| g((i / 7) as f64 - 3.0, (i % 7) as f64 - 3.0)).sum();
        for y in 0..7 {
            for x in 0..7 {
                let expect = g(y as f64 - 3.0, x as f64 - 3.0) / z;
                assert!((k.at(y, x) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn random_gaussian_is_seed_deterministic() {
        let gen = KernelGenerator::AnisotropicGaussian {
            size: 13,
            sigma_x: None,
            sigma_y: None,
            theta: None,
            sigma_min: 0.6,
            sigma_max: 5.0,
        };
        let a = make_kernel(&entry(gen.clone())).unwrap();
        let b = make_kernel(&entry(gen.clone())).unwrap();
        assert_eq!(a, b);
        let c = make_kernel(&KernelBankEntry { seed: 8, ..entry(gen) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stress_shapes_are_normalized_and_nonnegative() {
        for g in [
            KernelGenerator::LShape { size: 24, arm: 12, thickness: 2 },
            KernelGenerator::EmptySquare { size: 24, side: 12, thickness: 1 },
            KernelGenerator::FilledSquare { size: 24, side: 9 },
        ] {
            let k = make_kernel(&entry(g)).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
            assert!(k.values().iter().all(|v| *v >= 0.0));
        }
        let hollow = make_kernel(&entry(KernelGenerator::EmptySquare { size: 24, side: 12, thickness: 1 })).unwrap();
        assert_eq!(hollow.at(12, 12), 0.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(make_kernel(&entry(KernelGenerator::AnisotropicGaussian {
            size: 7,
            sigma_x: Some(-1.0),
            sigma_y: Some(1.0),
            theta: Some(0.0),
            sigma_min: 0.6,
            sigma_max: 5.0,
        }))
        .is_err());
        assert!(make_kernel(&entry(KernelGenerator::FilledSquare { size: 4, side: 5 })).is_err());
        assert!(
            make_kernel(&entry(KernelGenerator::MeasuredFile { path: "/nonexistent/k.txt".into(), size: 24 })).is_err()
        );
    }

    #[test]
    fn unknown_generator_fails_to_parse() {
        let json = r#"{"id":"x","generator":"spiral","size":5}"#;
        assert!(serde_json::from_str::<KernelBankEntry>(json).is_err());
        let ok = r#"{"id":"x","generator":"delta","size":5}"#;
        assert!(serde_json::from_str::<KernelBankEntry>(ok).is_ok());
    }

    #[test]
    fn text_format_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let k = Kernel::from_fn(5, 3, |y, x| (y * 3 + x) as f64 / 105.0).unwrap();
        let p = dir.path().join("k.txt");
        k.save(&p).unwrap();
        let back = Kernel::load(&p).unwrap();
        for (a, b) in k.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let measured = make_kernel(&KernelBankEntry {
            id: "m".into(),
            generator: KernelGenerator::MeasuredFile { path: p, size: 24 },
            seed: 0,
        })
        .unwrap();
        assert_eq!(measured.size(), (24, 24));
        assert!((measured.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_text_is_rejected() {
        let p = Path::new("k.txt");
        assert!(Kernel::parse_text("2 2\n1 2\n", p).is_err());
        assert!(Kernel::parse_text("2 2\n1 2\n3\n", p).is_err());
        assert!(Kernel::parse_text("2\n1 2\n", p).is_err());
        assert!(Kernel::parse_text("1 2\n1 x\n", p).is_err());
    }

    #[test]
    fn export_clamps_and_renormalizes() {
        let k = Kernel::new(1, 3, vec![-1e-4, 0.5, 0.5]).unwrap();
        let e = k.export().unwrap();
        assert_eq!(e.at(0, 0), 0.0);
        assert!((e.sum() - 1.0).abs() < 1e-15);
        let doubled = Kernel::new(1, 2, vec![1.2, 0.8]).unwrap().export().unwrap();
        assert!((doubled.at(0, 0) - 0.6).abs() < 1e-15);
        assert!(Kernel::new(1, 2, vec![-1.0, 0.0]).unwrap().export().is_err());
    }
}
