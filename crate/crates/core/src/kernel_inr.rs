//! Sinusoidal coordinate network representing the SR-kernel, its
//! leaky-sigmoid output head, and the center-of-mass penalty.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::degradation::Kernel;
use crate::error::{domain, Result};
use crate::nn::{Linear, ParamSource};

/// Lower bound of [`leaky_sigmoid`].
pub const LEAK: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelInrConfig {
    /// Number of fully connected layers, including input and output layers.
    pub layers: usize,
    pub width: usize,
    /// Frequency scale of every sine activation.
    pub omega: f64,
    /// Kernel canvas `(height, width)`.
    pub canvas: (usize, usize),
    /// Weight of the center-of-mass penalty.
    pub com_weight: f64,
}

impl Default for KernelInrConfig {
    fn default() -> Self {
        Self { layers: 5, width: 256, omega: 5.0, canvas: (24, 24), com_weight: 1.0 }
    }
}

/// `(1 + 1e-4) * sigmoid(x) - 1e-4`, with range `(-1e-4, 1)`.
pub fn leaky_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    (1.0 + LEAK) * s - LEAK
}

pub fn leaky_sigmoid_tensor(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?.affine(1.0 + LEAK, -LEAK)?)
}

/// Row-major `(h*w, 2)` coordinates `(row, col)` spanning `[-1, 1]` per axis.
pub fn coordinate_grid(height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(domain!("empty kernel canvas"));
    }
    let lin = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let mut v = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        for x in 0..width {
            v.push(lin(y, height));
            v.push(lin(x, width));
        }
    }
    Ok(Tensor::from_vec(v, (height * width, 2), device)?.to_dtype(dtype)?)
}

/// The kernel network `INR(g)`.
#[derive(Clone, Debug)]
pub struct KernelInr {
    config: KernelInrConfig,
    layers: Vec<Linear>,
    grid: Tensor,
}

impl KernelInr {
    /// Sine-network initialization: the first layer uniform in
    /// `±1/fan_in`, later layers uniform in `±sqrt(6/fan_in)/omega`. The
    /// output bias is set so the initial kernel sums to roughly one.
    pub fn new(src: &mut impl ParamSource, config: KernelInrConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.layers < 2 || config.width == 0 || config.omega <= 0.0 {
            return Err(domain!("invalid INR config {config:?}"));
        }
        let (h, w) = config.canvas;
        let grid = coordinate_grid(h, w, dtype, device)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let d_in = if i == 0 { 2 } else { config.width };
            let d_out = if i + 1 == config.layers { 1 } else { config.width };
            let w_bound = if i == 0 { 1.0 / d_in as f64 } else { (6.0 / d_in as f64).sqrt() / config.omega };
            let name = format!("inr.{i}");
            let layer = if i + 1 == config.layers {
                // start from a flat kernel of unit mass
                let p = (1.0 / (h * w) as f64 + LEAK) / (1.0 + LEAK);
                Linear::with_constant_bias(src, &name, d_in, d_out, w_bound, (p / (1.0 - p)).ln())?
            } else {
                Linear::new(src, &name, d_in, d_out, w_bound, 1.0 / (d_in as f64).sqrt())?
            };
            layers.push(layer);
        }
        Ok(Self { config, layers, grid })
    }

    pub fn config(&self) -> &KernelInrConfig {
        &self.config
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    /// Raw kernel weights `(h, w)`, each in `(-1e-4, 1)`; not normalized.
    pub fn forward(&self) -> Result<Tensor> {
        self.forward_grid(&self.grid)
    }

    pub fn forward_grid(&self, grid: &Tensor) -> Result<Tensor> {
        let (h, w) = self.config.canvas;
        if grid.dims() != [h * w, 2] {
            return Err(domain!("grid shape {:?} does not match canvas {h}x{w}", grid.dims()));
        }
        let mut x = grid.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            x = if i == last { leaky_sigmoid_tensor(&x)? } else { (x * self.config.omega)?.sin()? };
        }
        Ok(x.reshape((h, w))?)
    }

    pub fn kernel(&self) -> Result<Kernel> {
        tensor_to_kernel(&self.forward()?)
    }
}

pub fn tensor_to_kernel(t: &Tensor) -> Result<Kernel> {
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Kernel::new(h, w, v)
}

/// `weight * |centroid(k) - canvas_center|^2` in pixel units, differentiable
/// in `k`. A kernel without positive mass has no centroid; the penalty is
/// then zero.
pub fn com_penalty(k: &Tensor, weight: f64) -> Result<Tensor> {
    let (h, w) = k.dims2()?;
    let total = k.sum_all()?;
    let mass = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if mass <= 0.0 {
        log::warn!("COM penalty on a kernel without positive mass; centroid undefined, using 0");
        return Ok(Tensor::zeros((), k.dtype(), k.device())?);
    }
    let dev = k.device();
    let rows = Tensor::arange(0u32, h as u32, dev)?.to_dtype(k.dtype())?.reshape((h, 1))?;
    let cols = Tensor::arange(0u32, w as u32, dev)?.to_dtype(k.dtype())?.reshape((1, w))?;
    let cy = (k.broadcast_mul(&rows)?.sum_all()? / &total)?;
    let cx = (k.broadcast_mul(&cols)?.sum_all()? / &total)?;
    let dy = (cy - (h as f64 - 1.0) / 2.0)?;
    let dx = (cx - (w as f64 - 1.0) / 2.0)?;
    Ok(((dy.sqr()? + dx.sqr()?)? * weight)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, Params};
    use rand::{Rng, SeedableRng};

    #[test]
    fn leaky_sigmoid_values() {
        assert!((leaky_sigmoid(0.0) - 0.49995).abs() < 1e-15);
        assert!((leaky_sigmoid(-800.0) + 1e-4).abs() < 1e-15);
        assert!((leaky_sigmoid(800.0) - 1.0).abs() < 1e-15);
        let mut prev = f64::NEG_INFINITY;
        for i in -100..=100 {
            let v = leaky_sigmoid(i as f64 / 10.0);
            assert!(v > prev && v > -LEAK && v < 1.0);
            prev = v;
        }
    }

    #[test]
    fn grid_is_symmetric_and_row_major() {
        let g = coordinate_grid(3, 4, DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], vec![-1.0, -1.0]);
        assert_eq!(g[1][1], -1.0 + 2.0 / 3.0);
        assert_eq!(g[11], vec![1.0, 1.0]);
        for i in 0..12 {
            assert!((g[i][0] + g[11 - i][0]).abs() < 1e-15 && (g[i][1] + g[11 - i][1]).abs() < 1e-15);
        }
    }

    fn small_inr(seed: u64, dtype: DType) -> (Params, KernelInr) {
        let mut p = Params::new(seed, dtype, &Device::Cpu);
        let cfg = KernelInrConfig { width: 32, canvas: (9, 7), ..Default::default() };
        let inr = KernelInr::new(&mut p, cfg, dtype, &Device::Cpu).unwrap();
        (p, inr)
    }

    #[test]
    fn output_shape_and_range() {
        let (_, inr) = small_inr(1, DType::F32);
        let k = inr.forward().unwrap();
        assert_eq!(k.dims(), &[9, 7]);
        let wrong = coordinate_grid(3, 3, DType::F32, &Device::Cpu).unwrap();
        assert!(inr.forward_grid(&wrong).is_err());
    }

    #[test]
    fn centroid_of_centered_and_shifted_deltas() {
        let dev = Device::Cpu;
        let centered = Kernel::delta(9, 9, 0, 0).unwrap();
        let t = Tensor::from_slice(centered.values(), (9, 9), &dev).unwrap();
        assert_eq!(com_penalty(&t, 1.0).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let shifted = Kernel::delta(9, 9, 3, 0).unwrap();
        let t = Tensor::from_slice(shifted.values(), (9, 9), &dev).unwrap();
        assert!((com_penalty(&t, 2.0).unwrap().to_scalar::<f64>().unwrap() - 18.0).abs() < 1e-12);
        let zero = Tensor::zeros((5, 5), DType::F64, &dev).unwrap();
        assert_eq!(com_penalty(&zero, 1.0).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn penalty_matches_explicit_centroid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (6, 11);
        let vals: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let (mut sy, mut sx, mut s) = (0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let v = vals[i * w + j];
                sy += v * i as f64;
                sx += v * j as f64;
                s += v;
            }
        }
        let expect = 0.7 * ((sy / s - 2.5).powi(2) + (sx / s - 5.0).powi(2));
        let t = Tensor::from_vec(vals, (h, w), &Device::Cpu).unwrap();
        let got = com_penalty(&t, 0.7).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - expect).abs() <= 1e-6);
    }

    /// Central finite differences over single parameter coordinates.
    fn check_gradients(loss: impl Fn(&KernelInr) -> Tensor, seed: u64) {
        let (params, inr) = small_inr(seed, DType::F64);
        let grads = loss(&inr).backward().unwrap();
        let vars = params.vars();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        let h = 1e-6;
        for _ in 0..16 {
            let var = &vars[rng.random_range(0..vars.len())];
            let idx = rng.random_range(0..var.elem_count());
            let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eval = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let out = loss(&inr).to_scalar::<f64>().unwrap();
                var.set(&Tensor::from_vec(orig.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
                out
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= 1e-3 || (fd - an).abs() < 1e-9, "fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn kernel_sum_gradient_matches_finite_differences() {
        check_gradients(|inr| inr.forward().unwrap().sum_all().unwrap(), 7);
    }

    #[test]
    fn com_gradient_matches_finite_differences() {
        check_gradients(|inr| com_penalty(&inr.forward().unwrap(), 1.0).unwrap(), 8);
    }

    #[test]
    fn optimizing_com_alone_centers_the_kernel() {
        let mut p = Params::new(3, DType::F32, &Device::Cpu);
        let cfg = KernelInrConfig { canvas: (13, 13), ..Default::default() };
        let inr = KernelInr::new(&mut p, cfg, DType::F32, &Device::Cpu).unwrap();
        let mut opt = Adam::new(p.vars(), 1e-3).unwrap();
        // push the mass off-center first so there is something to correct
        let cols =
            Tensor::arange(0u32, 13, &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap().reshape((1, 13)).unwrap();
        for _ in 0..30 {
            let k = inr.forward().unwrap();
            let cx = (k.broadcast_mul(&cols).unwrap().sum_all().unwrap() / k.sum_all().unwrap()).unwrap();
            opt.backward_step(&cx.neg().unwrap()).unwrap();
        }
        let (_, cx0) = inr.kernel().unwrap().export().unwrap().centroid().unwrap();
        assert!(cx0 > 7.0, "warm-up left the centroid at x = {cx0}");
        opt.set_lr(1e-4);
        let mut steps = 0;
        loop {
            let k = inr.kernel().unwrap().export().unwrap();
            let (cy, cx) = k.centroid().unwrap();
            if ((cy - 6.0).powi(2) + (cx - 6.0).powi(2)).sqrt() <= 0.5 || steps >= 2000 {
                break;
            }
            let loss = com_penalty(&inr.forward().unwrap(), 1.0).unwrap();
            opt.backward_step(&loss).unwrap();
            steps += 1;
        }
        let k = inr.kernel().unwrap().export().unwrap();
        let (cy, cx) = k.centroid().unwrap();
        assert!(((cy - 6.0).powi(2) + (cx - 6.0).powi(2)).sqrt() <= 0.5, "centroid ({cy}, {cx}) after {steps} steps");
    }
}
