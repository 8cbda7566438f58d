use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::nn::{reflect_pad, Conv, Linear, ParamSource};

/// Residual blocks after the stem. The stem contributes two 3x3 convs and
/// each residual block one more, for seven in total: a 15x15 receptive field.
pub const RESIDUAL_BLOCKS: usize = 5;

/// Half-width of the receptive field in pixels.
pub const RECEPTIVE_RADIUS: usize = 2 + RESIDUAL_BLOCKS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdBackboneConfig {
    pub hidden_width: usize,
    pub image_channels: usize,
    /// Size of the sinusoidal timestep embedding.
    pub time_embed_dim: usize,
}

impl Default for PdBackboneConfig {
    fn default() -> Self {
        Self { hidden_width: 128, image_channels: 3, time_embed_dim: 64 }
    }
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}

/// 3x3 convolution with reflect padding.
#[derive(Clone, Debug)]
struct Conv3 {
    conv: Conv,
}

impl Conv3 {
    fn new(src: &mut impl ParamSource, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(src, name, c_in, c_out, 3, 1, 0)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&reflect_pad(x, 1, 1, 1, 1)?)
    }
}

/// Per-channel scale and shift predicted from the timestep embedding.
#[derive(Clone, Debug)]
struct Film {
    proj: Linear,
    width: usize,
}

impl Film {
    fn new(src: &mut impl ParamSource, name: &str, emb: usize, width: usize) -> Result<Self> {
        let b = 1.0 / (emb as f64).sqrt();
        Ok(Self { proj: Linear::new(src, name, emb, 2 * width, b, b)?, width })
    }

    fn forward(&self, h: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let n = emb.dim(0)?;
        let p = self.proj.forward(emb)?.reshape((n, 2 * self.width, 1, 1))?;
        let scale = p.narrow(1, 0, self.width)?;
        let shift = p.narrow(1, self.width, self.width)?;
        Ok(h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv3: Conv3,
    film: Film,
    conv1: Conv,
}

/// The patch denoiser: fully convolutional, no strides, no global layers.
///
/// Every timestep-dependent operation is a per-channel affine map, so the
/// output at a pixel depends only on the 15x15 input window around it.
#[derive(Clone, Debug)]
pub struct PatchDenoiser {
    config: PdBackboneConfig,
    time_mlp: Linear,
    stem_a: Conv3,
    stem_film: Film,
    stem_b: Conv3,
    blocks: Vec<ResBlock>,
    head: Conv,
}

impl PatchDenoiser {
    pub fn new(src: &mut impl ParamSource, config: PdBackboneConfig) -> Result<Self> {
        let PdBackboneConfig { hidden_width: w, image_channels: c, time_embed_dim: e } = config;
        if w == 0 || e < 2 || e % 2 != 0 {
            return Err(domain!("invalid backbone config {config:?}"));
        }
        if c != 1 && c != 3 {
            return Err(domain!("image channels must be 1 or 3"));
        }
        let b = 1.0 / (e as f64).sqrt();
        let time_mlp = Linear::new(src, "time_mlp", e, e, b, b)?;
        let stem_a = Conv3::new(src, "stem.conv_a", c, w)?;
        let stem_film = Film::new(src, "stem.film", e, w)?;
        let stem_b = Conv3::new(src, "stem.conv_b", w, w)?;
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|i| {
                Ok(ResBlock {
                    conv3: Conv3::new(src, &format!("block{i}.conv3"), w, w)?,
                    film: Film::new(src, &format!("block{i}.film"), e, w)?,
                    conv1: Conv::new(src, &format!("block{i}.conv1"), w, w, 1, 1, 0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::new(src, "head", w, c, 1, 1, 0)?;
        Ok(Self { config, time_mlp, stem_a, stem_film, stem_b, blocks, head })
    }

    pub fn config(&self) -> PdBackboneConfig {
        self.config
    }

    /// Predicted velocity for `x_t` of shape `(N, C, H, W)` with one timestep
    /// per batch entry.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if ts.len() != n {
            return Err(domain!("{} timesteps for a batch of {n}", ts.len()));
        }
        if c != self.config.image_channels {
            return Err(domain!("model expects {} channels, got {c}", self.config.image_channels));
        }
        if h < 2 || w < 2 {
            return Err(domain!("input {h}x{w} too small"));
        }
        let emb = timestep_embedding(ts, self.config.time_embed_dim, x.dtype(), x.device())?;
        let emb = self.time_mlp.forward(&emb)?.silu()?;

        let hdn = self.stem_a.forward(x)?;
        let hdn = self.stem_film.forward(&hdn, &emb)?.silu()?;
        let mut hdn = self.stem_b.forward(&hdn)?.silu()?;
        for b in &self.blocks {
            let r = b.conv3.forward(&hdn)?;
            let r = b.film.forward(&r, &emb)?.silu()?;
            let r = b.conv1.forward(&r)?.silu()?;
            hdn = (hdn + r)?;
        }
        self.head.forward(&hdn)
    }

    /// Exact number of scalar parameters for a config.
    pub fn param_count(config: &PdBackboneConfig) -> usize {
        let PdBackboneConfig { hidden_width: w, image_channels: c, time_embed_dim: e } = *config;
        let film = e * 2 * w + 2 * w;
        (e * e + e)
            + Conv::param_count(c, w, 3)
            + film
            + Conv::param_count(w, w, 3)
            + RESIDUAL_BLOCKS * (Conv::param_count(w, w, 3) + film + Conv::param_count(w, w, 1))
            + Conv::param_count(w, c, 1)
    }
}
