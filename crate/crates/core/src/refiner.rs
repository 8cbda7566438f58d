//! Deep-image-prior U-Net applied to every x0 estimate during fusion.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::image::{ImagePlane, ValueRange};
use crate::nn::{reflect_indices, Conv, Init, ParamSource};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub levels: usize,
    /// Filters at the input level; doubled per level up to `max_filters`.
    pub base_filters: usize,
    pub max_filters: usize,
    pub convs_per_block: usize,
    pub image_channels: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { levels: 5, base_filters: 32, max_filters: 512, convs_per_block: 2, image_channels: 3 }
    }
}

impl RefinerConfig {
    pub fn filters(&self, level: usize) -> usize {
        (self.base_filters << level).min(self.max_filters)
    }

    /// Spatial sides must be multiples of this; other inputs are padded.
    pub fn multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_filters == 0 || self.convs_per_block == 0 {
            return Err(domain!("invalid refiner config {self:?}"));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(domain!("image channels must be 1 or 3"));
        }
        Ok(())
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let conv_bn = |ci: usize, co: usize| co * ci * 9 + 2 * co;
        let block = |ci: usize, co: usize| conv_bn(ci, co) + (self.convs_per_block - 1) * conv_bn(co, co);
        let mut n = 0;
        for l in 0..self.levels {
            let ci = if l == 0 { self.image_channels } else { self.filters(l - 1) };
            n += block(ci, self.filters(l));
            if l + 1 < self.levels {
                n += conv_bn(self.filters(l), self.filters(l));
                n += Conv::param_count(self.filters(l + 1), self.filters(l), 3);
                n += block(2 * self.filters(l), self.filters(l));
            }
        }
        n + Conv::param_count(self.filters(0), self.image_channels, 1)
    }
}

/// 3x3 zero-padded conv (no bias, the norm removes it), batch norm with batch statistics, ReLU.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv,
    gamma: Tensor,
    beta: Tensor,
}

impl ConvBn {
    fn new(src: &mut impl ParamSource, name: &str, ci: usize, co: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::without_bias(src, &format!("{name}.conv"), ci, co, 3, stride, 1)?,
            gamma: src.tensor(&format!("{name}.bn.weight"), &[co], Init::Constant(1.0))?,
            beta: src.tensor(&format!("{name}.bn.bias"), &[co], Init::Constant(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        let mean = h.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let centered = h.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let normed = centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let y = normed.broadcast_mul(&self.gamma.reshape((1, (), 1, 1))?)?.broadcast_add(&self.beta.reshape((
            1,
            (),
            1,
            1,
        ))?)?;
        Ok(y.relu()?)
    }
}

#[derive(Clone, Debug)]
struct Block(Vec<ConvBn>);

impl Block {
    fn new(src: &mut impl ParamSource, name: &str, ci: usize, co: usize, convs: usize) -> Result<Self> {
        (0..convs)
            .map(|i| ConvBn::new(src, &format!("{name}.{i}"), if i == 0 { ci } else { co }, co, 1))
            .collect::<Result<Vec<_>>>()
            .map(Block)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.iter().try_fold(x.clone(), |h, c| c.forward(&h))
    }
}

#[derive(Clone, Debug)]
struct Level {
    enc: Block,
    /// Stride-2 conv into the next level; absent at the bottom.
    down: Option<ConvBn>,
    /// Nearest upsample + conv from the next level, then the merge block.
    up: Option<(Conv, Block)>,
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let y = x.reshape((n, c, h, 1, w, 1))?.broadcast_as((n, c, h, 2, w, 2))?;
    Ok(y.reshape((n, c, 2 * h, 2 * w))?)
}

/// The refiner network `R(x)`, output in `[-1, 1]` via tanh.
#[derive(Clone, Debug)]
pub struct Refiner {
    config: RefinerConfig,
    levels: Vec<Level>,
    head: Conv,
}

impl Refiner {
    pub fn new(src: &mut impl ParamSource, config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        let k = config.convs_per_block;
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let f = config.filters(l);
            let ci = if l == 0 { config.image_channels } else { config.filters(l - 1) };
            let enc = Block::new(src, &format!("enc{l}"), ci, f, k)?;
            let (down, up) = if l + 1 < config.levels {
                let down = ConvBn::new(src, &format!("down{l}"), f, f, 2)?;
                let up_conv = Conv::new(src, &format!("up{l}"), config.filters(l + 1), f, 3, 1, 1)?;
                let dec = Block::new(src, &format!("dec{l}"), 2 * f, f, k)?;
                (Some(down), Some((up_conv, dec)))
            } else {
                (None, None)
            };
            levels.push(Level { enc, down, up });
        }
        let head = Conv::new(src, "head", config.filters(0), config.image_channels, 1, 1, 0)?;
        Ok(Self { config, levels, head })
    }

    pub fn config(&self) -> RefinerConfig {
        self.config
    }

    /// Maps `(N, C, H, W)` to the same shape. Sides that are not multiples of
    /// `2^(levels-1)` are reflect-padded at the bottom/right and cropped back.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.image_channels {
            return Err(domain!("refiner expects {} channels, got {c}", self.config.image_channels));
        }
        let m = self.config.multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut inp = x.clone();
        if hp != h {
            inp = inp.index_select(&reflect_indices(h, 0, hp - h, x.device())?, 2)?;
        }
        if wp != w {
            inp = inp.index_select(&reflect_indices(w, 0, wp - w, x.device())?, 3)?;
        }

        let mut skips = Vec::with_capacity(self.levels.len());
        let mut hdn = inp;
        for lvl in &self.levels {
            let e = lvl.enc.forward(&hdn)?;
            if let Some(down) = &lvl.down {
                hdn = down.forward(&e)?;
            }
            skips.push(e);
        }
        let mut hdn = skips.pop().expect("at least one level");
        for (lvl, skip) in self.levels.iter().zip(skips).rev() {
            let (up, dec) = lvl.up.as_ref().expect("non-bottom level");
            let u = up.forward(&upsample2(&hdn)?)?;
            hdn = dec.forward(&Tensor::cat(&[&skip, &u], 1)?)?;
        }
        let out = self.head.forward(&hdn)?.tanh()?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Refines a signed-range image.
    pub fn refine(&self, x0_est: &ImagePlane) -> Result<ImagePlane> {
        if x0_est.range() != ValueRange::Signed {
            return Err(domain!("refine expects a signed-range input"));
        }
        let y = self.forward(&x0_est.to_tensor(DType::F32, &Device::Cpu)?)?;
        ImagePlane::from_tensor(&y, ValueRange::Signed)
    }
}
