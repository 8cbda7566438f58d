//! Planar image buffers with an explicit value-range tag.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Declared value range of an [`ImagePlane`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// Values in `[0, 1]`; the I/O range.
    Unit,
    /// Values in `[-1, 1]`; the diffusion range.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// An `H x W x C` real image stored channel-major (`C` planes of `H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(domain!("images must have 1 or 3 channels, got {channels}"));
        }
        if height == 0 || width == 0 {
            return Err(domain!("empty image {height}x{width}"));
        }
        if data.len() != height * width * channels {
            return Err(domain!("buffer of {} values does not match {height}x{width}x{channels}", data.len()));
        }
        Ok(Self { height, width, channels, data, range })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, range: ValueRange) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels], range)
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data, range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Exact affine map `x -> 2x - 1`.
    pub fn to_signed(&self) -> Result<ImagePlane> {
        if self.range != ValueRange::Unit {
            return Err(domain!("to_signed expects a unit-range image"));
        }
        let data = self.data.iter().map(|v| 2.0 * v - 1.0).collect();
        Ok(self.with_data(data, ValueRange::Signed))
    }

    /// Exact affine map `x -> (x + 1) / 2`.
    pub fn to_unit(&self) -> Result<ImagePlane> {
        if self.range != ValueRange::Signed {
            return Err(domain!("to_unit expects a signed-range image"));
        }
        let data = self.data.iter().map(|v| (v + 1.0) / 2.0).collect();
        Ok(self.with_data(data, ValueRange::Unit))
    }

    fn with_data(&self, data: Vec<f64>, range: ValueRange) -> ImagePlane {
        ImagePlane { height: self.height, width: self.width, channels: self.channels, data, range }
    }

    /// Clamps every value into the declared range.
    pub fn clamped(mut self) -> ImagePlane {
        let (lo, hi) = self.range.bounds();
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImagePlane> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(domain!("crop {height}x{width}@({top},{left}) outside {}x{}", self.height, self.width));
        }
        ImagePlane::from_fn(height, width, self.channels, self.range, |c, y, x| self.get(c, y + top, x + left))
    }

    /// Center-crops so both sides are multiples of `s`.
    pub fn center_crop_to_multiple(&self, s: usize) -> Result<ImagePlane> {
        if s == 0 {
            return Err(domain!("scale factor must be >= 1"));
        }
        let h = self.height / s * s;
        let w = self.width / s * s;
        if h == 0 || w == 0 {
            return Err(domain!("image {}x{} smaller than scale {s}", self.height, self.width));
        }
        if h == self.height && w == self.width {
            return Ok(self.clone());
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// Luminance plane with BT.601 full-range weights; single-channel images
    /// are returned unchanged.
    pub fn luminance(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let data = r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect();
        ImagePlane { height: self.height, width: self.width, channels: 1, data, range: self.range }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`ImagePlane::to_tensor`]; accepts `(1, C, H, W)` or `(C, H, W)`.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<ImagePlane> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(domain!("expected a rank-3/4 image tensor, got rank {r}")),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        ImagePlane::new(h, w, c, data, range)
    }

    /// Loads an 8-bit PNG (RGB or grayscale) into the unit range.
    pub fn load_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let path = path.as_ref();
        let img = image::open(path)?;
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let buf = img.to_luma8();
            let (w, h) = buf.dimensions();
            ImagePlane::from_fn(h as usize, w as usize, 1, ValueRange::Unit, |_, y, x| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        } else {
            let buf = img.to_rgb8();
            let (w, h) = buf.dimensions();
            ImagePlane::from_fn(h as usize, w as usize, 3, ValueRange::Unit, |c, y, x| {
                buf.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            })
        }
    }

    /// Writes an 8-bit PNG. Signed images are mapped to unit range first.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let unit = match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => self.to_unit()?,
        };
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if self.channels == 1 {
            let buf = image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(unit.get(0, y as usize, x as usize))]));
            buf.save(path)?;
        } else {
            let buf = image::RgbImage::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([q(unit.get(0, y, x)), q(unit.get(1, y, x)), q(unit.get(2, y, x))])
            });
            buf.save(path)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_maps_are_exact_inverses() {
        let img =
            ImagePlane::from_fn(3, 4, 3, ValueRange::Unit, |c, y, x| ((c * 12 + y * 4 + x) as f64) / 35.0).unwrap();
        let back = img.to_signed().unwrap().to_unit().unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(img.to_unit().is_err());
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(ImagePlane::filled(2, 2, 2, 0.0, ValueRange::Unit).is_err());
    }

    #[test]
    fn center_crop_to_multiple_trims_evenly() {
        let img = ImagePlane::from_fn(10, 7, 1, ValueRange::Unit, |_, y, x| (y * 7 + x) as f64).unwrap();
        let c = img.center_crop_to_multiple(4).unwrap();
        assert_eq!((c.height(), c.width()), (8, 4));
        assert_eq!(c.get(0, 0, 0), img.get(0, 1, 1));
    }

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img =
            ImagePlane::from_fn(5, 6, 3, ValueRange::Unit, |c, y, x| ((c * 30 + y * 6 + x) as f64) / 255.0).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImagePlane::load_png(&p).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImagePlane::from_fn(4, 5, 3, ValueRange::Signed, |c, y, x| {
            (c as f64 - 1.0) * 0.3 + y as f64 * 0.01 - x as f64 * 0.02
        })
        .unwrap();
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 5]);
        assert_eq!(ImagePlane::from_tensor(&t, ValueRange::Signed).unwrap(), img);
    }
}
