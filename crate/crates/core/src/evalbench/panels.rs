use std::path::Path;

use super::report::{output_path, EvalReport};
use crate::degradation::{Kernel, Manifest};
use crate::error::{domain, Result};
use crate::image::{ImagePlane, ValueRange};

const GAP: usize = 2;

/// Grayscale grid with one row per inner vector. Each kernel is min-max
/// normalized and enlarged (nearest neighbour) to a `cell x cell` tile.
pub fn render_kernel_grid(rows: &[Vec<Kernel>], cell: usize) -> Result<ImagePlane> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if cols == 0 || cell == 0 {
        return Err(domain!("nothing to render"));
    }
    let h = rows.len() * (cell + GAP) + GAP;
    let w = cols * (cell + GAP) + GAP;
    let mut img = ImagePlane::filled(h, w, 1, 1.0, ValueRange::Unit)?;
    for (r, row) in rows.iter().enumerate() {
        for (c, k) in row.iter().enumerate() {
            let (lo, hi) =
                k.values().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (oy, ox) = (GAP + r * (cell + GAP), GAP + c * (cell + GAP));
            for y in 0..cell {
                for x in 0..cell {
                    let v = k.at(y * k.height() / cell, x * k.width() / cell);
                    img.set(0, oy + y, ox + x, (v - lo) / span);
                }
            }
        }
    }
    Ok(img)
}

/// Images side by side, all of the same height and channel count.
pub fn side_by_side(images: &[ImagePlane]) -> Result<ImagePlane> {
    let first = images.first().ok_or_else(|| domain!("no images to tile"))?;
    let (h, c) = (first.height(), first.channels());
    if images.iter().any(|im| im.height() != h || im.channels() != c) {
        return Err(domain!("strip images differ in height or channels"));
    }
    let w = images.iter().map(|im| im.width()).sum::<usize>() + GAP * (images.len() - 1);
    let mut out = ImagePlane::filled(h, w, c, 1.0, ValueRange::Unit)?;
    let mut ox = 0;
    for im in images {
        let im = if im.range() == ValueRange::Signed { im.to_unit()? } else { im.clone() };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..im.width() {
                    out.set(ch, y, ox + x, im.get(ch, y, x));
                }
            }
        }
        ox += im.width() + GAP;
    }
    Ok(out)
}

/// Writes `report.csv`, `report.txt`, a `kernels_<method>.png` grid (ground
/// truth above estimate) for each method with estimated kernels, and one
/// `strip_<lr_stem>.png` per record (ground truth, then each method).
pub fn emit_panels(report: &EvalReport, manifest: &Manifest, outputs: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::io(out_dir, e))?;
    report.write_csv(&out_dir.join("report.csv"))?;
    let txt = out_dir.join("report.txt");
    std::fs::write(&txt, report.table()).map_err(|e| crate::error::Error::io(&txt, e))?;

    let mut methods: Vec<&str> = report.per_image.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();

    for m in &methods {
        let (mut gt_row, mut est_row) = (Vec::new(), Vec::new());
        for rec in &manifest.records {
            let est = super::report::kernel_output_path(outputs, rec, m);
            if est.exists() {
                gt_row.push(Kernel::load(manifest.resolve(&rec.kernel_path))?);
                est_row.push(Kernel::load(&est)?);
            }
        }
        if !est_row.is_empty() {
            render_kernel_grid(&[gt_row, est_row], 48)?.save_png(out_dir.join(format!("kernels_{m}.png")))?;
        }
    }

    for rec in &manifest.records {
        let mut tiles = vec![ImagePlane::load_png(manifest.resolve(&rec.hr_path))?];
        for m in &methods {
            let p = output_path(outputs, rec, m);
            if p.exists() {
                tiles.push(ImagePlane::load_png(&p)?);
            }
        }
        side_by_side(&tiles)?.save_png(out_dir.join(format!("strip_{}.png", rec.lr_stem())))?;
    }
    Ok(())
}
