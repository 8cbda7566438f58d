use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{PatchDenoiser, PdBackboneConfig, RECEPTIVE_RADIUS};
use super::ModelCheckpoint;
use crate::error::{domain, Error, Result};
use crate::image::{ImagePlane, ValueRange};
use crate::nn::{cosine_lr, randn, scalar, Adam, Params};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdTrainConfig {
    pub crop_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning rate reached at the last step of the cosine schedule.
    pub lr_min: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PdTrainConfig {
    fn default() -> Self {
        Self { crop_size: 64, steps: 20_000, lr: 1e-4, lr_min: 0.0, batch_size: 1, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPd {
    pub checkpoint: ModelCheckpoint,
    /// Mean squared velocity error per step.
    pub losses: Vec<f64>,
}

/// Fits the patch denoiser to a single image by velocity regression on
/// random crops, timesteps and noise draws.
pub fn pd_train(
    image: &ImagePlane,
    backbone: PdBackboneConfig,
    cfg: &PdTrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainedPd> {
    pd_train_with(image, backbone, cfg, sched, |_, _| {})
}

/// As [`pd_train`], calling `on_step(step, loss)` after each update.
pub fn pd_train_with(
    image: &ImagePlane,
    backbone: PdBackboneConfig,
    cfg: &PdTrainConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainedPd> {
    let side = 2 * RECEPTIVE_RADIUS + 1;
    if image.height() < side || image.width() < side {
        return Err(domain!(
            "image {}x{} smaller than the {side}x{side} receptive field",
            image.height(),
            image.width()
        ));
    }
    if cfg.crop_size < side {
        return Err(domain!("crop size {} smaller than the receptive field", cfg.crop_size));
    }
    if cfg.batch_size == 0 {
        return Err(domain!("batch size must be >= 1"));
    }
    if image.channels() != backbone.image_channels {
        return Err(domain!("image has {} channels, backbone expects {}", image.channels(), backbone.image_channels));
    }
    let signed = match image.range() {
        ValueRange::Unit => image.to_signed()?,
        ValueRange::Signed => image.clone(),
    };

    let dev = Device::Cpu;
    let dtype = DType::F32;
    let full = signed.to_tensor(dtype, &dev)?;
    let (ch, cw) = (cfg.crop_size.min(signed.height()), cfg.crop_size.min(signed.width()));

    let mut params = Params::new(cfg.seed, dtype, &dev);
    let model = PatchDenoiser::new(&mut params, backbone)?;
    let mut opt = Adam::new(params.vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        opt.set_lr(cosine_lr(cfg.lr, cfg.lr_min, step, cfg.steps));
        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let top = rng.random_range(0..=signed.height() - ch);
            let left = rng.random_range(0..=signed.width() - cw);
            crops.push(full.narrow(2, top, ch)?.narrow(3, left, cw)?);
            ts.push(rng.random_range(1..=sched.steps()));
        }
        let x0 = Tensor::cat(&crops, 0)?;
        let eps = randn(&mut rng, x0.dims(), dtype, &dev)?;
        let (a, b): (Vec<f64>, Vec<f64>) = ts.iter().map(|&t| sched.signal_noise(t)).unzip();
        let a = Tensor::from_vec(a, (ts.len(), 1, 1, 1), &dev)?.to_dtype(dtype)?;
        let b = Tensor::from_vec(b, (ts.len(), 1, 1, 1), &dev)?.to_dtype(dtype)?;
        let x_t = (x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?;
        let v = (eps.broadcast_mul(&a)? - x0.broadcast_mul(&b)?)?;

        let pred = model.forward(&x_t, &ts)?;
        let loss = (pred - v)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("patch-diffusion loss at step {step}")));
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        on_step(step, value);
    }

    let checkpoint = ModelCheckpoint {
        backbone,
        schedule: sched.params(),
        train: cfg.clone(),
        scale: None,
        image_hash: None,
        tensors: params.snapshot()?,
    };
    Ok(TrainedPd { checkpoint, losses })
}
