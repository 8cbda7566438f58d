//! Small neural-network toolkit on top of candle: parameter stores with
//! seeded initialization, reflect padding, Adam with cosine annealing.

mod conv;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use conv::conv2d;

use crate::error::{domain, Error, Result};

/// Reflection index without edge repetition (`-1 -> 1`, `n -> n - 2`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

pub(crate) fn reflect_indices(n: usize, before: usize, after: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (-(before as isize)..(n + after) as isize).map(|i| reflect_index(i, n) as u32).collect();
    Ok(Tensor::from_vec(idx, n + before + after, device)?)
}

/// Reflect-pads the two trailing (spatial) dimensions of a rank-4 tensor.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if top >= h.max(2) || bottom >= h.max(2) || left >= w.max(2) || right >= w.max(2) {
        return Err(domain!("reflect padding ({top},{bottom},{left},{right}) too large for {h}x{w}"));
    }
    let mut out = x.contiguous()?;
    if top + bottom > 0 {
        out = out.index_select(&reflect_indices(h, top, bottom, x.device())?, 2)?;
    }
    if left + right > 0 {
        out = out.index_select(&reflect_indices(w, left, right, x.device())?, 3)?;
    }
    Ok(out)
}

/// Reverses both spatial axes of a rank-4 tensor.
pub fn flip_spatial(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rev = |n: usize| Tensor::from_vec((0..n as u32).rev().collect::<Vec<_>>(), n, x.device());
    Ok(x.contiguous()?.index_select(&rev(h)?, 2)?.index_select(&rev(w)?, 3)?)
}

/// Standard-normal tensor drawn from a seeded generator.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

pub fn squared_norm(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Uniform(f64),
    Constant(f64),
}

/// Where layer weights come from: freshly initialized trainable variables or
/// a frozen set of named tensors.
pub trait ParamSource {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Trainable parameters, created in a fixed order from a seeded generator.
pub struct Params {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), dtype, device: device.clone(), entries: Vec::new() }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.entries.iter().map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?))).collect()
    }
}

impl ParamSource for Params {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(domain!("duplicate parameter name `{name}`"));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Constant(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(out)
    }
}

/// Frozen named tensors, e.g. loaded from a checkpoint.
pub struct Frozen<'a> {
    tensors: &'a HashMap<String, Tensor>,
}

impl<'a> Frozen<'a> {
    pub fn new(tensors: &'a HashMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

impl ParamSource for Frozen<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self.tensors.get(name).ok_or_else(|| Error::Mismatch(format!("missing tensor `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::Mismatch(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.dims())));
        }
        Ok(t.detach())
    }
}

/// 2D convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// PyTorch-style default init: uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        src: &mut impl ParamSource,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = src.tensor(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::Uniform(bound))?;
        let bias = src.tensor(&format!("{name}.bias"), &[c_out], Init::Uniform(bound))?;
        Ok(Self { weight, bias: Some(bias), stride, pad })
    }

    /// As [`Conv::new`] without the bias, for convs followed by a normalization.
    pub fn without_bias(
        src: &mut impl ParamSource,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = src.tensor(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::Uniform(bound))?;
        Ok(Self { weight, bias: None, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        src: &mut impl ParamSource,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_bound: f64,
        b_bound: f64,
    ) -> Result<Self> {
        let weight = src.tensor(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(w_bound))?;
        let bias = src.tensor(&format!("{name}.bias"), &[d_out], Init::Uniform(b_bound))?;
        Ok(Self { weight, bias })
    }

    pub fn with_constant_bias(
        src: &mut impl ParamSource,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_bound: f64,
        bias: f64,
    ) -> Result<Self> {
        let weight = src.tensor(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(w_bound))?;
        let bias = src.tensor(&format!("{name}.bias"), &[d_out], Init::Constant(bias))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_min;
    }
    let frac = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam (decoupled weight decay disabled).
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let params = ParamsAdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        Ok(Self { inner: AdamW::new(vars, params)? })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    pub fn lr(&self) -> f64 {
        self.inner.learning_rate()
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        Ok(self.inner.backward_step(loss)?)
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        Ok(self.inner.step(grads)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-2, 1), 0);
    }

    #[test]
    fn reflect_pad_shapes_and_values() {
        let x = Tensor::arange(0f64, 12., &Device::Cpu).unwrap().reshape((1, 1, 3, 4)).unwrap();
        let y = reflect_pad(&x, 1, 2, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 6, 7]);
        let rows = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        // first padded row reflects original row 1, columns reflect around index 0
        assert_eq!(rows[0], vec![6., 5., 4., 5., 6., 7., 6.]);
        assert_eq!(rows[1], vec![2., 1., 0., 1., 2., 3., 2.]);
        assert_eq!(rows[4], vec![6., 5., 4., 5., 6., 7., 6.]);
        assert_eq!(rows[5], vec![2., 1., 0., 1., 2., 3., 2.]);
        assert!(reflect_pad(&x, 3, 0, 0, 0).is_err());
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert!((cosine_lr(1e-4, 5e-5, 0, 20) - 1e-4).abs() < 1e-15);
        assert!((cosine_lr(1e-4, 5e-5, 20, 20) - 5e-5).abs() < 1e-15);
        assert!((cosine_lr(1e-4, 5e-5, 10, 20) - 7.5e-5).abs() < 1e-15);
    }

    #[test]
    fn params_are_reproducible_from_seed() {
        let make = || {
            let mut p = Params::new(11, DType::F32, &Device::Cpu);
            let t = p.tensor("a", &[3, 4], Init::Uniform(0.5)).unwrap();
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(), make());
    }
}
