//! Image-specific velocity-prediction denoiser with a hard 15x15 receptive
//! field, its single-image training loop, and checkpoints.

mod model;
mod train;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use model::{timestep_embedding, PatchDenoiser, PdBackboneConfig, RECEPTIVE_RADIUS, RESIDUAL_BLOCKS};
pub use train::{pd_train, pd_train_with, PdTrainConfig, TrainedPd};

use crate::error::{domain, Error, Result};
use crate::image::{ImagePlane, ValueRange};
use crate::nn::Frozen;
use crate::schedule::ScheduleParams;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    backbone: PdBackboneConfig,
    schedule: ScheduleParams,
    train: PdTrainConfig,
    scale: Option<usize>,
    image_hash: Option<String>,
}

/// Trained weights plus everything needed to rebuild and validate the model.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub backbone: PdBackboneConfig,
    pub schedule: ScheduleParams,
    pub train: PdTrainConfig,
    /// Scale factor the checkpoint was trained for, when recorded.
    pub scale: Option<usize>,
    pub image_hash: Option<String>,
    pub tensors: HashMap<String, Tensor>,
}

const META_KEY: &str = "blindsr.pd";

impl ModelCheckpoint {
    /// Frozen denoiser; its weights are plain tensors and receive no gradients.
    pub fn denoiser(&self) -> Result<PatchDenoiser> {
        PatchDenoiser::new(&mut Frozen::new(&self.tensors), self.backbone)
    }

    /// Safetensors file with the configuration stored in the header metadata.
    /// Tensor names are sorted, so equal checkpoints serialize to equal bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let meta = CheckpointMeta {
            backbone: self.backbone,
            schedule: self.schedule,
            train: self.train.clone(),
            scale: self.scale,
            image_hash: self.image_hash.clone(),
        };
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        let mut named: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        safetensors::serialize_to_file(named, Some(info), path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Mismatch(format!("{} is not a patch-diffusion checkpoint", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok(Self {
            backbone: meta.backbone,
            schedule: meta.schedule,
            train: meta.train,
            scale: meta.scale,
            image_hash: meta.image_hash,
            tensors,
        })
    }
}

/// Predicted velocity for a signed-range image at timestep `t`.
pub fn pd_forward(model: &PatchDenoiser, x_t: &ImagePlane, t: usize) -> Result<ImagePlane> {
    if x_t.range() != ValueRange::Signed {
        return Err(domain!("pd_forward expects a signed-range input"));
    }
    let x = x_t.to_tensor(DType::F32, &Device::Cpu)?;
    let v = model.forward(&x, &[t])?;
    ImagePlane::from_tensor(&v, ValueRange::Signed)
}
