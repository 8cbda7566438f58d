//! `blindsr`: synthesize benchmarks, train per-image priors, super-resolve
//! and evaluate.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "blindsr", version, about = "Zero-shot blind super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file, then to the built-in defaults (see `config.toml` in any run directory).
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; missing keys take their defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random stream [config default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for outputs and provenance
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Scale factor [config default: 4]
    #[arg(long)]
    scale: Option<usize>,
    /// Diffusion timestep the reverse process starts from [config default: 400]
    #[arg(long)]
    tnd: Option<usize>,
    /// Optimization steps per timestep [config default: 20]
    #[arg(long)]
    niter: Option<usize>,
    /// Prior training steps [config default: 20000]
    #[arg(long = "pd-steps")]
    pd_steps: Option<usize>,
    /// Compute device; only `cpu` is available [config default: cpu]
    #[arg(long)]
    device: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let o = Overrides {
            seed: self.seed,
            scale: self.scale,
            tnd: self.tnd,
            niter: self.niter,
            pd_steps: self.pd_steps,
            device: self.device.clone(),
        };
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade HR images with a kernel bank into an LR benchmark
    Synth {
        #[command(flatten)]
        common: Common,
        /// Directory of HR PNGs (overrides `synth.hr_source`)
        #[arg(long, value_name = "DIR")]
        hr_source: Option<PathBuf>,
    },
    /// Train the patch-diffusion prior on an LR image
    TrainPd {
        #[command(flatten)]
        common: Common,
        /// Single LR image
        #[arg(long, value_name = "PNG")]
        input: Option<PathBuf>,
        /// Every LR image of a benchmark manifest
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
    },
    /// Recover the HR image and the kernel from an LR image
    Superres {
        #[command(flatten)]
        common: Common,
        /// Single LR image
        #[arg(long, value_name = "PNG")]
        input: Option<PathBuf>,
        /// Every LR image of a benchmark manifest
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Prior checkpoint; defaults to the cache, training on a miss
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Score method outputs against the HR references of a manifest
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory of `<lr_stem>_<method>.png` outputs; baselines are written here
        #[arg(long, value_name = "DIR")]
        outputs: PathBuf,
        /// Comma-separated methods [default: every method with a full set of outputs]
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Render a directory of kernel files into a grid PNG
    Kernels {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// Kernels per row
        #[arg(long, default_value_t = 8)]
        cols: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, name) = match &cli.command {
        Command::Synth { common, .. } => (common.clone(), "synth"),
        Command::TrainPd { common, .. } => (common.clone(), "train-pd"),
        Command::Superres { common, .. } => (common.clone(), "superres"),
        Command::Eval { common, .. } => (common.clone(), "eval"),
        Command::Kernels { common, .. } => (common.clone(), "kernels"),
    };
    let mut cfg = common.load()?;
    if let Command::Synth { hr_source: Some(p), .. } = &cli.command {
        cfg.synth.hr_source = p.clone();
    }
    let out = &common.out;
    commands::echo_run(out, &cfg, name)?;
    log::info!("{name}: seed {} run directory {}", cfg.seed, out.display());

    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg, out),
        Command::TrainPd { input, manifest, .. } => {
            commands::train_pd(&cfg, out, input.as_deref(), manifest.as_deref())
        }
        Command::Superres { input, manifest, checkpoint, .. } => {
            commands::superres(&cfg, out, input.as_deref(), manifest.as_deref(), checkpoint.as_deref())
        }
        Command::Eval { manifest, outputs, methods, .. } => commands::eval(&cfg, out, &manifest, &outputs, methods),
        Command::Kernels { dir, cols, .. } => commands::kernels(out, &dir, cols),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
