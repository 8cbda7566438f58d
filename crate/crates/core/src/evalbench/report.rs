use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::baselines::{bicubic_upscale, pinv_backproject};
use super::metrics::{kernel_similarity, psnr_y, ssim_y, DEFAULT_BORDER_FRACTION};
use crate::degradation::{Kernel, Manifest, ManifestRecord};
use crate::error::{domain, Error, Result};
use crate::image::ImagePlane;

pub const BICUBIC: &str = "bicubic";
pub const PINV: &str = "pinv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub border_fraction: f64,
    /// Metrics on the BT.601 luminance channel (always true for this harness).
    pub luminance: bool,
    /// Backprojection iterations for the pseudo-inverse baseline.
    pub pinv_iters: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { border_fraction: DEFAULT_BORDER_FRACTION, luminance: true, pinv_iters: 10 }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub kernel_id: String,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub kernel_mse: Option<f64>,
    pub centroid_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub count: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub protocol: EvalProtocol,
    pub per_image: Vec<EvalRecord>,
}

impl EvalReport {
    /// Arithmetic means per method, in method-name order.
    pub fn aggregates(&self) -> Vec<MethodSummary> {
        let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
        for r in &self.per_image {
            groups.entry(&r.method).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(m, rs)| {
                let n = rs.len() as f64;
                MethodSummary {
                    method: m.to_string(),
                    count: rs.len(),
                    mean_psnr_db: rs.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                    mean_ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.per_image {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, dataset: &str, protocol: EvalProtocol) -> Result<EvalReport> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let per_image =
            r.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>().map_err(|e| csv_error(path, e))?;
        Ok(EvalReport { dataset: dataset.to_string(), protocol, per_image })
    }

    /// Fixed-width summary table followed by the per-image rows.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset {} | border {:.3} | luminance {}",
            self.dataset, self.protocol.border_fraction, self.protocol.luminance
        );
        let _ = writeln!(s, "{:<16} {:>6} {:>10} {:>8}", "method", "n", "PSNR(dB)", "SSIM");
        for a in self.aggregates() {
            let _ = writeln!(s, "{:<16} {:>6} {:>10.3} {:>8.4}", a.method, a.count, a.mean_psnr_db, a.mean_ssim);
        }
        let _ = writeln!(s);
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
        for r in &self.per_image {
            let _ = writeln!(
                s,
                "{:<20} {:<12} {:<16} {:>8.3} {:>7.4} {:>10} {:>10}",
                r.image_id,
                r.kernel_id,
                r.method,
                r.psnr_db,
                r.ssim,
                opt(r.kernel_mse),
                opt(r.centroid_err)
            );
        }
        s
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// `<dir>/<lr_stem>_<method>.png`.
pub fn output_path(dir: &Path, record: &ManifestRecord, method: &str) -> PathBuf {
    dir.join(format!("{}_{method}.png", record.lr_stem()))
}

/// `<dir>/<lr_stem>_<method>_kernel.txt`, the optional estimated kernel.
pub fn kernel_output_path(dir: &Path, record: &ManifestRecord, method: &str) -> PathBuf {
    dir.join(format!("{}_{method}_kernel.txt", record.lr_stem()))
}

fn image_id(record: &ManifestRecord) -> String {
    record.hr_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes the bicubic and ground-truth-kernel backprojection outputs for
/// every record under the evaluation naming scheme.
pub fn write_baselines(manifest: &Manifest, out_dir: &Path, protocol: &EvalProtocol) -> Result<()> {
    for rec in &manifest.records {
        let lr = ImagePlane::load_png(manifest.resolve(&rec.lr_path))?;
        let k = Kernel::load(manifest.resolve(&rec.kernel_path))?;
        bicubic_upscale(&lr, rec.scale)?.clamped().save_png(output_path(out_dir, rec, BICUBIC))?;
        pinv_backproject(&lr, &k, rec.scale, protocol.pinv_iters)?.save_png(output_path(out_dir, rec, PINV))?;
    }
    Ok(())
}

/// Scores `<lr_stem>_<method>.png` in `outputs` against each record's HR
/// image, and estimated kernels when present.
pub fn evaluate_manifest(
    manifest: &Manifest,
    outputs: &Path,
    methods: &[String],
    dataset: &str,
    protocol: EvalProtocol,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(domain!("no methods to evaluate"));
    }
    let mut per_image = Vec::new();
    for rec in &manifest.records {
        let gt = ImagePlane::load_png(manifest.resolve(&rec.hr_path))?;
        for m in methods {
            let pred = ImagePlane::load_png(output_path(outputs, rec, m))?;
            let kpath = kernel_output_path(outputs, rec, m);
            let (kernel_mse, centroid_err) = if kpath.exists() {
                let gt_k = Kernel::load(manifest.resolve(&rec.kernel_path))?;
                let (mse, err) = kernel_similarity(&Kernel::load(&kpath)?, &gt_k)?;
                (Some(mse), Some(err))
            } else {
                (None, None)
            };
            per_image.push(EvalRecord {
                image_id: image_id(rec),
                kernel_id: rec.kernel_id.clone(),
                method: m.clone(),
                psnr_db: psnr_y(&pred, &gt, protocol.border_fraction)?,
                ssim: ssim_y(&pred, &gt, protocol.border_fraction)?,
                kernel_mse,
                centroid_err,
            });
        }
    }
    Ok(EvalReport { dataset: dataset.to_string(), protocol, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, psnr: f64, ssim: f64) -> EvalRecord {
        EvalRecord {
            image_id: "img".into(),
            kernel_id: "k".into(),
            method: method.into(),
            psnr_db: psnr,
            ssim,
            kernel_mse: None,
            centroid_err: Some(0.5),
        }
    }

    #[test]
    fn aggregates_are_arithmetic_means() {
        let report = EvalReport {
            dataset: "d".into(),
            protocol: EvalProtocol::default(),
            per_image: vec![rec("a", 20.0, 0.5), rec("b", 30.0, 0.9), rec("a", 25.5, 0.7)],
        };
        let agg = report.aggregates();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].method, "a");
        assert!((agg[0].mean_psnr_db - 22.75).abs() < 1e-9);
        assert!((agg[0].mean_ssim - 0.6).abs() < 1e-9);
        assert_eq!(agg[1].count, 1);
        assert!(report.table().contains("22.750"));
    }

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let report = EvalReport {
            dataset: "d".into(),
            protocol: EvalProtocol::default(),
            per_image: vec![rec("a", 20.0, 0.5), rec("b", 31.25, 0.875)],
        };
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "image_id,kernel_id,method,psnr_db,ssim,kernel_mse,centroid_err");
        let back = EvalReport::read_csv(&path, "d", EvalProtocol::default()).unwrap();
        assert_eq!(back, report);
    }
}
