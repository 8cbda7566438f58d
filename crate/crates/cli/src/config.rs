use std::path::{Path, PathBuf};

use blindsr_core::degradation::{KernelBankEntry, KernelGenerator, Pairing};
use blindsr_core::evalbench::EvalProtocol;
use blindsr_core::fusion::FusionConfig;
use blindsr_core::patch_diffusion::{PdBackboneConfig, PdTrainConfig};
use blindsr_core::ScheduleParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Dataset synthesis settings. The output directory is the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Directory of HR PNGs.
    pub hr_source: PathBuf,
    pub pairing: Pairing,
    pub kernel_bank: Vec<KernelBankEntry>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { hr_source: PathBuf::from("hr"), pairing: Pairing::FullMatrix, kernel_bank: default_bank() }
    }
}

fn default_bank() -> Vec<KernelBankEntry> {
    let entry = |id: &str, generator| KernelBankEntry { id: id.into(), generator, seed: 0 };
    vec![
        entry(
            "gauss",
            KernelGenerator::AnisotropicGaussian {
                size: 13,
                sigma_x: Some(2.0),
                sigma_y: Some(1.0),
                theta: Some(0.5),
                sigma_min: 0.6,
                sigma_max: 5.0,
            },
        ),
        entry("square", KernelGenerator::FilledSquare { size: 13, side: 4 }),
        entry("lshape", KernelGenerator::LShape { size: 13, arm: 7, thickness: 2 }),
        entry("delta", KernelGenerator::Delta { size: 13, dy: 1, dx: 0 }),
    ]
}

/// Everything a run needs. Every field has a default, so an empty file
/// (or no file) is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream: synthesis, prior training and fusion.
    pub seed: u64,
    pub device: String,
    /// Trained priors keyed by (image hash, config hash).
    pub cache_dir: PathBuf,
    pub synth: SynthConfig,
    pub schedule: ScheduleParams,
    pub pd_backbone: PdBackboneConfig,
    pub pd_train: PdTrainConfig,
    pub fusion: FusionConfig,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            cache_dir: PathBuf::from(".blindsr/pd_cache"),
            synth: SynthConfig::default(),
            schedule: ScheduleParams::default(),
            pd_backbone: PdBackboneConfig::default(),
            pd_train: PdTrainConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalProtocol::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub tnd: Option<usize>,
    pub niter: Option<usize>,
    pub pd_steps: Option<usize>,
    pub device: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, p)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.scale {
            self.fusion.scale = s;
        }
        if let Some(t) = o.tnd {
            self.fusion.t_nd = t;
        }
        if let Some(n) = o.niter {
            self.fusion.n_iter = n;
        }
        if let Some(n) = o.pd_steps {
            self.pd_train.steps = n;
        }
        if let Some(d) = &o.device {
            self.device = d.clone();
        }
        self.pd_train.seed = self.seed;
        self.fusion.seed = self.seed;
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.device != "cpu" {
            return Err(CliError::Config(format!("unsupported device `{}`; only `cpu` is available", self.device)));
        }
        self.fusion.validate(self.schedule.steps).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Hash of every setting that affects a trained prior.
    pub fn prior_hash(&self, scale: usize) -> Result<String, CliError> {
        #[derive(Serialize)]
        struct Key<'a> {
            schedule: &'a ScheduleParams,
            backbone: &'a PdBackboneConfig,
            train: &'a PdTrainConfig,
            scale: usize,
        }
        let key = Key { schedule: &self.schedule, backbone: &self.pd_backbone, train: &self.pd_train, scale };
        let text = serde_json::to_string(&key).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("", Path::new("x")).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in
            [("sede = 3", "sede"), ("[fusion]\nt_nd = 5\nniter = 2", "niter"), ("[pd_train]\nlr_max = 1.0", "lr_max")]
        {
            let err = RunConfig::parse(text, Path::new("c.toml")).unwrap_err();
            assert!(matches!(err, CliError::Config(_)));
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn overrides_win_and_seed_propagates() {
        let o =
            Overrides { seed: Some(7), scale: Some(2), tnd: Some(9), niter: Some(3), pd_steps: Some(11), device: None };
        let mut cfg = RunConfig::default();
        cfg.apply(&o);
        assert_eq!((cfg.fusion.scale, cfg.fusion.t_nd, cfg.fusion.n_iter, cfg.pd_train.steps), (2, 9, 3, 11));
        assert_eq!((cfg.pd_train.seed, cfg.fusion.seed), (7, 7));
    }

    #[test]
    fn prior_hash_tracks_training_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.fusion.n_iter += 1;
        assert_eq!(a.prior_hash(4).unwrap(), b.prior_hash(4).unwrap());
        b.pd_train.steps += 1;
        assert_ne!(a.prior_hash(4).unwrap(), b.prior_hash(4).unwrap());
        assert_ne!(a.prior_hash(4).unwrap(), a.prior_hash(2).unwrap());
    }
}
