use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{convolve_downsample, make_kernel, KernelBankEntry};
use crate::error::{domain, Error, Result};
use crate::image::ImagePlane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Each image gets one kernel drawn uniformly from the bank.
    RandomPerImage,
    /// Every image with every kernel.
    FullMatrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub hr_source: PathBuf,
    pub kernel_bank: Vec<KernelBankEntry>,
    pub scale: usize,
    pub pairing: Pairing,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// One degraded image. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub lr_path: PathBuf,
    pub hr_path: PathBuf,
    pub kernel_id: String,
    pub kernel_path: PathBuf,
    pub scale: usize,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn lr_stem(&self) -> String {
        self.lr_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Writes one JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, records })
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Degrades every selected (image, kernel) pair and writes LR images, GT
/// kernels, cropped HR references and `manifest.jsonl` into `output_dir`.
pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<Manifest> {
    if spec.scale == 0 {
        return Err(domain!("scale factor must be >= 1"));
    }
    if spec.kernel_bank.is_empty() {
        return Err(domain!("kernel bank is empty"));
    }
    let images = list_pngs(&spec.hr_source)?;
    if images.is_empty() {
        return Err(domain!("no PNG images in {}", spec.hr_source.display()));
    }
    let out = &spec.output_dir;
    for sub in ["lr", "hr", "kernels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut kernels = BTreeMap::new();
    for entry in &spec.kernel_bank {
        if kernels.contains_key(&entry.id) {
            return Err(domain!("duplicate kernel id `{}`", entry.id));
        }
        let k = make_kernel(entry)?;
        let rel = PathBuf::from("kernels").join(format!("{}.txt", entry.id));
        k.save(out.join(&rel))?;
        kernels.insert(entry.id.clone(), (k, rel));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for img_path in &images {
        let hr = ImagePlane::load_png(img_path)?.center_crop_to_multiple(spec.scale)?;
        let name = stem(img_path);
        let hr_rel = PathBuf::from("hr").join(format!("{name}.png"));
        hr.save_png(out.join(&hr_rel))?;

        let chosen: Vec<&KernelBankEntry> = match spec.pairing {
            Pairing::FullMatrix => spec.kernel_bank.iter().collect(),
            Pairing::RandomPerImage => {
                vec![&spec.kernel_bank[rng.random_range(0..spec.kernel_bank.len())]]
            }
        };
        for entry in chosen {
            let (k, k_rel) = &kernels[&entry.id];
            let lr = convolve_downsample(&hr, k, spec.scale)?;
            let lr_rel = PathBuf::from("lr").join(format!("{name}_{}.png", entry.id));
            lr.save_png(out.join(&lr_rel))?;
            records.push(ManifestRecord {
                lr_path: lr_rel,
                hr_path: hr_rel.clone(),
                kernel_id: entry.id.clone(),
                kernel_path: k_rel.clone(),
                scale: spec.scale,
                seed: spec.seed,
            });
        }
    }
    log::info!("synthesized {} LR images into {}", records.len(), out.display());
    let manifest = Manifest { root: out.clone(), records };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
