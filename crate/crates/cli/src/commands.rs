use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use blindsr_core::degradation::{synthesize_dataset, DatasetSpec, Manifest};
use blindsr_core::evalbench::{emit_panels, evaluate_manifest, output_path, render_kernel_grid, write_baselines};
use blindsr_core::fusion::run_fusion_with;
use blindsr_core::patch_diffusion::{pd_train_with, ModelCheckpoint};
use blindsr_core::{ImagePlane, Kernel, NoiseSchedule};
use serde::Serialize;

use crate::config::{sha256_hex, RunConfig};
use crate::error::CliError;

/// Method name used for super-resolved outputs.
pub const METHOD: &str = "fusion";

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(p, contents).map_err(|e| CliError::io(p, e))
}

fn version_string() -> String {
    let describe = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match describe {
        Some(d) if !d.is_empty() => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Writes the merged config and provenance into the run directory.
pub fn echo_run(out: &Path, cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;
    let info = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "version": version_string(),
        "args": std::env::args().collect::<Vec<_>>(),
    });
    write_file(&out.join("run.json"), serde_json::to_string_pretty(&info)?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let spec = DatasetSpec {
        hr_source: cfg.synth.hr_source.clone(),
        kernel_bank: cfg.synth.kernel_bank.clone(),
        scale: cfg.fusion.scale,
        pairing: cfg.synth.pairing,
        output_dir: out.to_path_buf(),
        seed: cfg.seed,
    };
    let manifest = synthesize_dataset(&spec)?;
    log::info!("wrote {} LR images and {}", manifest.records.len(), out.join("manifest.jsonl").display());
    Ok(())
}

/// One LR image to process and the scale it was degraded with.
struct Job {
    lr_path: PathBuf,
    stem: String,
    scale: usize,
}

fn jobs(cfg: &RunConfig, input: Option<&Path>, manifest: Option<&Path>) -> Result<Vec<Job>, CliError> {
    match (input, manifest) {
        (Some(p), None) => Ok(vec![Job {
            lr_path: p.to_path_buf(),
            stem: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into()),
            scale: cfg.fusion.scale,
        }]),
        (None, Some(m)) => {
            let manifest = Manifest::load(m)?;
            Ok(manifest
                .records
                .iter()
                .map(|r| Job { lr_path: manifest.resolve(&r.lr_path), stem: r.lr_stem(), scale: r.scale })
                .collect())
        }
        _ => Err(CliError::Usage("pass exactly one of --input or --manifest".into())),
    }
}

struct Prior {
    checkpoint: ModelCheckpoint,
    cache_path: PathBuf,
}

fn train_prior(cfg: &RunConfig, job: &Job, bytes: &[u8], loss_log: Option<&Path>) -> Result<Prior, CliError> {
    let image_hash = sha256_hex(bytes);
    let cache_path = cache_path(cfg, &image_hash, job.scale)?;
    let lr = ImagePlane::load_png(&job.lr_path)?;
    let sched = NoiseSchedule::build(cfg.schedule)?;
    let mut log_file = match loss_log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?);
            writeln!(w, "step,loss").map_err(|e| CliError::io(p, e))?;
            Some((w, p.to_path_buf()))
        }
        None => None,
    };
    let total = cfg.pd_train.steps;
    let mut io_err = None;
    let trained = pd_train_with(&lr, cfg.pd_backbone, &cfg.pd_train, &sched, |step, loss| {
        if let Some((w, p)) = log_file.as_mut() {
            if let Err(e) = writeln!(w, "{step},{loss}") {
                io_err.get_or_insert(CliError::io(p.clone(), e));
            }
        }
        if step % 500 == 0 || step + 1 == total {
            log::info!("{}: prior step {}/{total} loss {loss:.4e}", job.stem, step + 1);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    if let Some((mut w, p)) = log_file {
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    let mut checkpoint = trained.checkpoint;
    checkpoint.scale = Some(job.scale);
    checkpoint.image_hash = Some(image_hash);
    if let Some(dir) = cache_path.parent() {
        create_dir(dir)?;
    }
    checkpoint.save(&cache_path)?;
    Ok(Prior { checkpoint, cache_path })
}

fn cache_path(cfg: &RunConfig, image_hash: &str, scale: usize) -> Result<PathBuf, CliError> {
    let cfg_hash = cfg.prior_hash(scale)?;
    Ok(cfg.cache_dir.join(format!("{}_{}.safetensors", &image_hash[..16], &cfg_hash[..16])))
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(p).map_err(|e| CliError::io(p, e))
}

pub fn train_pd(cfg: &RunConfig, out: &Path, input: Option<&Path>, manifest: Option<&Path>) -> Result<(), CliError> {
    for job in jobs(cfg, input, manifest)? {
        let bytes = read_bytes(&job.lr_path)?;
        let prior = train_prior(cfg, &job, &bytes, Some(&out.join(format!("{}_pd_loss.csv", job.stem))))?;
        let dst = out.join(format!("{}.pd.safetensors", job.stem));
        prior.checkpoint.save(&dst)?;
        log::info!("{}: prior saved to {} (cached at {})", job.stem, dst.display(), prior.cache_path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    initial_residual: Option<f64>,
    final_residual: Option<f64>,
    init_seconds: f64,
    loop_seconds: f64,
    checkpoint: PathBuf,
}

pub fn superres(
    cfg: &RunConfig,
    out: &Path,
    input: Option<&Path>,
    manifest: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let sched = NoiseSchedule::build(cfg.schedule)?;
    for job in jobs(cfg, input, manifest)? {
        let (ck, ck_path) = match checkpoint {
            Some(p) => (ModelCheckpoint::load(p)?, p.to_path_buf()),
            None => {
                let bytes = read_bytes(&job.lr_path)?;
                let cached = cache_path(cfg, &sha256_hex(&bytes), job.scale)?;
                if cached.exists() {
                    log::info!("{}: using cached prior {}", job.stem, cached.display());
                    (ModelCheckpoint::load(&cached)?, cached)
                } else {
                    log::info!("{}: no cached prior, training one", job.stem);
                    let p = train_prior(cfg, &job, &bytes, None)?;
                    (p.checkpoint, p.cache_path)
                }
            }
        };

        let mut fcfg = cfg.fusion.clone();
        fcfg.scale = job.scale;
        let lr = ImagePlane::load_png(&job.lr_path)?;
        let trace_path = out.join(format!("{}_trace.jsonl", job.stem));
        let mut trace = BufWriter::new(File::create(&trace_path).map_err(|e| CliError::io(&trace_path, e))?);
        let mut io_err = None;
        let result = run_fusion_with(&lr, &ck, &fcfg, &sched, |step| {
            let line = serde_json::to_string(step).map(|s| s + "\n");
            let written = match line {
                Ok(l) => trace.write_all(l.as_bytes()).and_then(|_| trace.flush()),
                Err(e) => Err(std::io::Error::other(e)),
            };
            if let Err(e) = written {
                io_err.get_or_insert(CliError::io(&trace_path, e));
            }
            if step.t % 50 == 0 || step.t == 1 {
                log::info!(
                    "{}: t={} loss {:.4e} residual {:.4e}",
                    job.stem,
                    step.t,
                    step.losses.last().copied().unwrap_or(f64::NAN),
                    step.residual
                );
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }

        // same naming scheme the evaluation harness reads
        result.hr.save_png(out.join(format!("{}_{METHOD}.png", job.stem)))?;
        result.kernel.save(out.join(format!("{}_{METHOD}_kernel.txt", job.stem)))?;
        result.raw_kernel.save(out.join(format!("{}_{METHOD}_kernel_raw.txt", job.stem)))?;
        let summary = RunSummary {
            initial_residual: result.trace.initial_residual,
            final_residual: result.trace.final_residual(),
            init_seconds: result.trace.init_seconds,
            loop_seconds: result.trace.loop_seconds,
            checkpoint: ck_path,
        };
        write_file(&out.join(format!("{}_summary.json", job.stem)), serde_json::to_string_pretty(&summary)?)?;
        log::info!(
            "{}: done in {:.1}s, residual {:?} -> {:?}",
            job.stem,
            summary.loop_seconds,
            summary.initial_residual,
            summary.final_residual
        );
    }
    Ok(())
}

/// Methods with an output for every record, found from `<lr_stem>_<method>.png`.
fn detect_methods(manifest: &Manifest, outputs: &Path) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(outputs).map_err(|e| CliError::io(outputs, e))?;
    let names: Vec<String> =
        entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    let Some(first) = manifest.records.first() else {
        return Err(CliError::Usage("manifest has no records".into()));
    };
    let prefix = format!("{}_", first.lr_stem());
    let mut methods: Vec<String> = names
        .iter()
        .filter_map(|n| n.strip_prefix(&prefix)?.strip_suffix(".png").map(str::to_string))
        .filter(|m| manifest.records.iter().all(|r| output_path(outputs, r, m).exists()))
        .collect();
    methods.sort();
    Ok(methods)
}

pub fn eval(
    cfg: &RunConfig,
    out: &Path,
    manifest_path: &Path,
    outputs: &Path,
    methods: Option<Vec<String>>,
) -> Result<(), CliError> {
    let manifest = Manifest::load(manifest_path)?;
    create_dir(outputs)?;
    write_baselines(&manifest, outputs, &cfg.eval)?;
    let methods = match methods {
        Some(m) => m,
        None => detect_methods(&manifest, outputs)?,
    };
    let dataset = manifest.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = evaluate_manifest(&manifest, outputs, &methods, &dataset, cfg.eval)?;
    emit_panels(&report, &manifest, outputs, out)?;
    println!("{}", report.table());
    Ok(())
}

pub fn kernels(out: &Path, dir: &Path, cols: usize) -> Result<(), CliError> {
    if cols == 0 {
        return Err(CliError::Usage("--cols must be >= 1".into()));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    let kernels = paths.iter().map(Kernel::load).collect::<Result<Vec<_>, _>>()?;
    if kernels.is_empty() {
        return Err(CliError::Usage(format!("no kernel files in {}", dir.display())));
    }
    let rows: Vec<Vec<Kernel>> = kernels.chunks(cols).map(<[Kernel]>::to_vec).collect();
    let dst = out.join("kernels.png");
    render_kernel_grid(&rows, 48)?.save_png(&dst)?;
    log::info!("rendered {} kernels into {}", kernels.len(), dst.display());
    Ok(())
}
