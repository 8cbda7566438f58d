//! Joint reconstruction of the HR image and the kernel: a guided reverse
//! diffusion from a noised bicubic guess, where at every timestep a refiner
//! U-Net and a kernel network are optimized for consistency with the LR input
//! under the frozen patch denoiser.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{downscale, Kernel};
use crate::error::{domain, Error, Result};
use crate::evalbench::bicubic_upscale;
use crate::image::{ImagePlane, ValueRange};
use crate::kernel_inr::{com_penalty, tensor_to_kernel, KernelInr, KernelInrConfig};
use crate::nn::{cosine_lr, randn, scalar, Adam, Params};
use crate::patch_diffusion::{ModelCheckpoint, PatchDenoiser};
use crate::refiner::{Refiner, RefinerConfig};
use crate::schedule::NoiseSchedule;

const DTYPE: DType = DType::F32;
const REFINER_SEED_SALT: u64 = 0x5245_4649;
const INR_SEED_SALT: u64 = 0x494e_5246;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Timestep the reverse process starts from.
    pub t_nd: usize,
    /// Optimization steps per timestep.
    pub n_iter: usize,
    /// Optimization steps at the first timestep.
    pub n_iter_initial: usize,
    pub lr: f64,
    /// Learning rate reached at the end of every timestep's cosine schedule.
    pub lr_min: f64,
    /// Multiplier on the learning rate of the kernel network's parameter
    /// group; 1 keeps both networks at the same rate.
    pub inr_lr_scale: f64,
    pub scale: usize,
    pub seed: u64,
    pub inr: KernelInrConfig,
    pub refiner: RefinerConfig,
    /// Keep `(x0, kernel)` every this many timesteps; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            t_nd: 400,
            n_iter: 20,
            n_iter_initial: 100,
            lr: 1e-4,
            lr_min: 5e-5,
            inr_lr_scale: 1.0,
            scale: 4,
            seed: 0,
            inr: KernelInrConfig::default(),
            refiner: RefinerConfig::default(),
            snapshot_every: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_nd == 0 || self.t_nd > steps {
            return Err(domain!("t_nd {} outside [1, {steps}]", self.t_nd));
        }
        if self.n_iter == 0 || self.n_iter_initial == 0 {
            return Err(domain!("iteration counts must be >= 1"));
        }
        if self.scale == 0 {
            return Err(domain!("scale factor must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.inr_lr_scale > 0.0) {
            return Err(domain!("invalid learning rates {} -> {}", self.lr, self.lr_min));
        }
        Ok(())
    }

    /// Inner steps at timestep `t`.
    pub fn iterations_at(&self, t: usize) -> usize {
        if t == self.t_nd {
            self.n_iter_initial
        } else {
            self.n_iter
        }
    }
}

/// Record of one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// Loss of every inner step.
    pub losses: Vec<f64>,
    /// `|I_LR - (x0 * k)↓s|^2 / pixels` for the refined estimate at the last inner step.
    pub residual: f64,
    pub lr_end: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: usize,
    pub x0: ImagePlane,
    pub kernel: Kernel,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    pub steps: Vec<TraceStep>,
    /// LR-consistency residual at the very first inner step, before any update.
    pub initial_residual: Option<f64>,
    pub snapshots: Vec<Snapshot>,
    pub init_seconds: f64,
    pub loop_seconds: f64,
}

impl RunTrace {
    /// `(t, final inner loss)` per timestep.
    pub fn per_t_losses(&self) -> Vec<(usize, f64)> {
        self.steps.iter().map(|s| (s.t, s.losses.last().copied().unwrap_or(f64::NAN))).collect()
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.steps.last().map(|s| s.residual)
    }
}

/// Everything carried between timesteps.
pub struct FusionState {
    cfg: FusionConfig,
    sched: NoiseSchedule,
    pd: PatchDenoiser,
    refiner: Refiner,
    inr: KernelInr,
    /// Adam over the refiner (`θ`) and kernel (`φ`) parameter groups.
    opt: (Adam, Adam),
    rng: ChaCha8Rng,
    lr_image: Tensor,
    lr_pixels: usize,
    /// Current timestep, counting down to 0 (finished).
    t: usize,
    /// `x_{t+1}`: the noisy iterate of the previous timestep (at the start, `x_{T_nd}`).
    x_next: Tensor,
    /// Refined x0 estimate of the previous timestep (at the start, the bicubic guess).
    x0_prev: Tensor,
    /// Last inner step's `x̂_t` and refined `x̂_0`, used by the outer step.
    last: Option<(Tensor, Tensor)>,
    /// Most recent `x_{t-1}` sample; after the last timestep this is `x_0`.
    sample: Tensor,
}

impl FusionState {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn is_finished(&self) -> bool {
        self.t == 0
    }

    pub fn lr(&self) -> f64 {
        self.opt.0.lr()
    }

    /// The current noisy HR iterate `x_{t+1}` (signed range).
    pub fn x_next(&self) -> Result<ImagePlane> {
        ImagePlane::from_tensor(&self.x_next, ValueRange::Signed)
    }

    pub fn x0_prev(&self) -> Result<ImagePlane> {
        ImagePlane::from_tensor(&self.x0_prev, ValueRange::Signed)
    }

    /// Latest posterior sample (`x_0` once finished).
    pub fn sample(&self) -> Result<ImagePlane> {
        ImagePlane::from_tensor(&self.sample, ValueRange::Signed)
    }

    /// Raw kernel network output.
    pub fn raw_kernel(&self) -> Result<Kernel> {
        self.inr.kernel()
    }

    /// Draws the per-timestep noise `ξ`, shared by all inner steps at `t`.
    pub fn sample_xi(&mut self) -> Result<Tensor> {
        randn(&mut self.rng, self.x_next.dims(), DTYPE, &Device::Cpu)
    }

    fn lr_residual(&self, x0: &Tensor, k: &Tensor) -> Result<Tensor> {
        let diff = (&self.lr_image - downscale(x0, k, self.cfg.scale)?)?;
        Ok(diff.sqr()?.sum_all()?)
    }
}

/// Outcome of one inner optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerStep {
    pub loss: f64,
    /// Refined-estimate residual per LR pixel, measured before the update.
    pub residual: f64,
}

/// Builds the initial state: `x_{T_nd}` from the bicubic upscale, freshly
/// initialized refiner and kernel networks, and one shared optimizer.
pub fn init_fusion(
    lr_image: &ImagePlane,
    pd: &ModelCheckpoint,
    cfg: &FusionConfig,
    sched: &NoiseSchedule,
) -> Result<FusionState> {
    cfg.validate(sched.steps())?;
    if pd.schedule != sched.params() {
        return Err(Error::Mismatch(format!(
            "checkpoint schedule {:?} differs from {:?}",
            pd.schedule,
            sched.params()
        )));
    }
    if let Some(s) = pd.scale.filter(|&s| s != cfg.scale) {
        return Err(Error::Mismatch(format!("checkpoint trained for scale {s}, run uses {}", cfg.scale)));
    }
    if lr_image.channels() != pd.backbone.image_channels || lr_image.channels() != cfg.refiner.image_channels {
        return Err(domain!("image has {} channels; networks disagree", lr_image.channels()));
    }
    let lr_signed = match lr_image.range() {
        ValueRange::Unit => lr_image.to_signed()?,
        ValueRange::Signed => lr_image.clone(),
    };
    let (kh, kw) = cfg.inr.canvas;
    let (hh, ww) = (lr_image.height() * cfg.scale, lr_image.width() * cfg.scale);
    if kh > hh || kw > ww {
        return Err(domain!("kernel canvas {kh}x{kw} larger than the {hh}x{ww} output"));
    }

    let dev = Device::Cpu;
    let bicubic = bicubic_upscale(&lr_signed, cfg.scale)?.to_tensor(DTYPE, &dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = randn(&mut rng, bicubic.dims(), DTYPE, &dev)?;
    let (a, b) = sched.signal_noise(cfg.t_nd);
    let x_start = ((&bicubic * a)? + (eps * b)?)?;

    let mut refiner_params = Params::new(cfg.seed ^ REFINER_SEED_SALT, DTYPE, &dev);
    let refiner = Refiner::new(&mut refiner_params, cfg.refiner)?;
    let mut inr_params = Params::new(cfg.seed ^ INR_SEED_SALT, DTYPE, &dev);
    let inr = KernelInr::new(&mut inr_params, cfg.inr.clone(), DTYPE, &dev)?;
    let opt = (Adam::new(refiner_params.vars(), cfg.lr)?, Adam::new(inr_params.vars(), cfg.lr * cfg.inr_lr_scale)?);

    Ok(FusionState {
        cfg: cfg.clone(),
        sched: sched.clone(),
        pd: pd.denoiser()?,
        refiner,
        inr,
        opt,
        rng,
        lr_image: lr_signed.to_tensor(DTYPE, &dev)?,
        lr_pixels: lr_signed.data().len(),
        t: cfg.t_nd,
        x_next: x_start.clone(),
        x0_prev: bicubic,
        last: None,
        sample: x_start,
    })
}

fn summary(t: &Tensor) -> String {
    let v = t.flatten_all().and_then(|f| f.to_dtype(DType::F64)).and_then(|f| f.to_vec1::<f64>());
    match v {
        Ok(v) => {
            let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            format!("{} values, {} non-finite, finite range [{lo:.4e}, {hi:.4e}]", v.len(), v.len() - finite.len())
        }
        Err(e) => format!("unreadable ({e})"),
    }
}

/// One joint update of the refiner and kernel networks at the current
/// timestep, with learning rate `lr` and the timestep's noise `xi`.
pub fn fusion_inner_step(state: &mut FusionState, xi: &Tensor, lr: f64) -> Result<InnerStep> {
    let t = state.t;
    if t == 0 {
        return Err(domain!("fusion already finished"));
    }
    let k = state.inr.forward()?;
    let x0_prev_theta = state.refiner.forward(&state.x0_prev)?;
    let x_hat_t = if t == state.cfg.t_nd {
        state.x_next.clone()
    } else {
        let (c0, ct) = state.sched.posterior_coefficients(t + 1);
        let mean = ((&x0_prev_theta * c0)? + (&state.x_next * ct)?)?;
        (mean + (xi * state.sched.sigma(t + 1))?)?
    };
    let v = state.pd.forward(&x_hat_t, &[t])?;
    let (a, b) = state.sched.signal_noise(t);
    let x0_hat = ((&x_hat_t * a)? - (v * b)?)?;
    let x0_theta = state.refiner.forward(&x0_hat)?;

    let current = state.lr_residual(&x0_theta, &k)?;
    let previous = state.lr_residual(&x0_prev_theta, &k)?;
    let com = com_penalty(&k, state.cfg.inr.com_weight)?;
    let loss = ((&current + previous)? + com)?;
    let loss_value = scalar(&loss)?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "fusion loss at t={t}: kernel {}; x0 estimate {}",
            summary(&k),
            summary(&x0_hat)
        )));
    }
    let residual = scalar(&current)? / state.lr_pixels as f64;

    let grads = loss.backward()?;
    state.opt.0.set_lr(lr);
    state.opt.0.step(&grads)?;
    state.opt.1.set_lr(lr * state.cfg.inr_lr_scale);
    state.opt.1.step(&grads)?;
    state.last = Some((x_hat_t.detach(), x0_theta.detach()));
    Ok(InnerStep { loss: loss_value, residual })
}

/// Posterior transition `x_{t-1} = μ_t + σ_t ζ` from the last inner step's
/// estimates; carries `x̂_t` and the refined `x̂_0` to the next timestep.
pub fn fusion_outer_step(state: &mut FusionState) -> Result<()> {
    let t = state.t;
    let (x_hat_t, x0_theta) = state.last.take().ok_or_else(|| domain!("outer step at t={t} without inner steps"))?;
    let (c0, ct) = state.sched.posterior_coefficients(t);
    let mean = ((&x0_theta * c0)? + (&x_hat_t * ct)?)?;
    let zeta = randn(&mut state.rng, mean.dims(), DTYPE, &Device::Cpu)?;
    state.sample = if t == 1 { mean } else { (mean + (zeta * state.sched.sigma(t))?)? };
    state.x_next = x_hat_t;
    state.x0_prev = x0_theta;
    state.t = t - 1;
    Ok(())
}

/// Final products of a run.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Unit-range HR estimate.
    pub hr: ImagePlane,
    /// Exported (nonnegative, unit-sum) kernel.
    pub kernel: Kernel,
    /// Raw kernel network output.
    pub raw_kernel: Kernel,
    pub trace: RunTrace,
}

pub fn run_fusion(
    lr_image: &ImagePlane,
    pd: &ModelCheckpoint,
    cfg: &FusionConfig,
    sched: &NoiseSchedule,
) -> Result<FusionOutput> {
    run_fusion_with(lr_image, pd, cfg, sched, |_| {})
}

/// As [`run_fusion`], calling `on_step` after every timestep so callers
/// can persist the trace while the run progresses.
pub fn run_fusion_with(
    lr_image: &ImagePlane,
    pd: &ModelCheckpoint,
    cfg: &FusionConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&TraceStep),
) -> Result<FusionOutput> {
    let started = Instant::now();
    let mut state = init_fusion(lr_image, pd, cfg, sched)?;
    let mut trace = RunTrace { init_seconds: started.elapsed().as_secs_f64(), ..Default::default() };
    let loop_start = Instant::now();

    while !state.is_finished() {
        let t = state.t();
        let n = cfg.iterations_at(t);
        let xi = state.sample_xi()?;
        let mut step = TraceStep { t, losses: Vec::with_capacity(n), residual: f64::NAN, lr_end: cfg.lr_min };
        for i in 0..n {
            let lr = cosine_lr(cfg.lr, cfg.lr_min, i, n.saturating_sub(1));
            let out = fusion_inner_step(&mut state, &xi, lr)?;
            if trace.initial_residual.is_none() {
                trace.initial_residual = Some(out.residual);
            }
            step.losses.push(out.loss);
            step.residual = out.residual;
            step.lr_end = lr;
        }
        if cfg.snapshot_every > 0 && (t % cfg.snapshot_every == 0 || t == 1) {
            if let Some((_, x0)) = &state.last {
                trace.snapshots.push(Snapshot {
                    t,
                    x0: ImagePlane::from_tensor(x0, ValueRange::Signed)?.to_unit()?.clamped(),
                    kernel: state.raw_kernel()?,
                });
            }
        }
        fusion_outer_step(&mut state)?;
        log::debug!("t={t} loss={:.4e} residual={:.4e}", step.losses.last().unwrap_or(&f64::NAN), step.residual);
        on_step(&step);
        trace.steps.push(step);
    }
    trace.loop_seconds = loop_start.elapsed().as_secs_f64();

    let raw = tensor_to_kernel(&state.inr.forward()?)?;
    let hr = state.sample()?.clamped().to_unit()?;
    Ok(FusionOutput { hr, kernel: raw.export()?, raw_kernel: raw, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{convolve_downsample, kernel_tensor};
    use crate::nn::Params;
    use crate::patch_diffusion::{PdBackboneConfig, PdTrainConfig};
    use crate::schedule::ScheduleParams;
    use rand::Rng;

    fn tiny_cfg() -> FusionConfig {
        FusionConfig {
            t_nd: 3,
            n_iter: 2,
            n_iter_initial: 3,
            lr: 1e-3,
            lr_min: 5e-4,
            inr_lr_scale: 1.0,
            scale: 2,
            seed: 7,
            inr: KernelInrConfig { width: 16, canvas: (5, 5), ..Default::default() },
            refiner: RefinerConfig { levels: 3, base_filters: 4, max_filters: 16, ..Default::default() },
            snapshot_every: 2,
        }
    }

    fn random_pd(seed: u64) -> ModelCheckpoint {
        let backbone = PdBackboneConfig { hidden_width: 8, image_channels: 3, time_embed_dim: 16 };
        let mut p = Params::new(seed, DTYPE, &Device::Cpu);
        PatchDenoiser::new(&mut p, backbone).unwrap();
        ModelCheckpoint {
            backbone,
            schedule: ScheduleParams::default(),
            train: PdTrainConfig::default(),
            scale: Some(2),
            image_hash: None,
            tensors: p.snapshot().unwrap(),
        }
    }

    fn lr_image(seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.random();
        ImagePlane::from_fn(12, 12, 3, ValueRange::Unit, |c, y, x| {
            0.5 + 0.3 * ((y as f64 * 0.7 + phase * 5.0).sin() * (x as f64 * 0.4 + c as f64).cos())
        })
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleParams::default()).unwrap()
    }

    #[test]
    fn init_builds_noised_bicubic() {
        let lr = lr_image(1);
        let s = sched();
        let st = init_fusion(&lr, &random_pd(1), &tiny_cfg(), &s).unwrap();
        let x = st.x_next().unwrap();
        assert_eq!((x.height(), x.width()), (24, 24));
        let again = init_fusion(&lr, &random_pd(1), &tiny_cfg(), &s).unwrap().x_next().unwrap();
        assert_eq!(x, again);
        // at t = 1 the signal term dominates: x ≈ bicubic
        let cfg = FusionConfig { t_nd: 1, ..tiny_cfg() };
        let st = init_fusion(&lr, &random_pd(1), &cfg, &s).unwrap();
        let bic = bicubic_upscale(&lr.to_signed().unwrap(), 2).unwrap();
        let (a, b) = s.signal_noise(1);
        let x = st.x_next().unwrap();
        let max_dev = x.data().iter().zip(bic.data()).map(|(p, q)| (p - a * q).abs()).fold(0.0, f64::max);
        assert!(max_dev <= 5.0 * b + 1e-5);
        assert_eq!(st.x0_prev().unwrap().height(), 24);
    }

    #[test]
    fn init_rejects_mismatches() {
        let lr = lr_image(1);
        let s = sched();
        let mut pd = random_pd(1);
        pd.scale = Some(4);
        assert!(matches!(init_fusion(&lr, &pd, &tiny_cfg(), &s), Err(Error::Mismatch(_))));
        let mut pd = random_pd(1);
        pd.schedule.steps = 500;
        assert!(matches!(init_fusion(&lr, &pd, &tiny_cfg(), &s), Err(Error::Mismatch(_))));
        let bad = FusionConfig { t_nd: 1001, ..tiny_cfg() };
        assert!(init_fusion(&lr, &random_pd(1), &bad, &s).is_err());
        let bad = FusionConfig { n_iter: 0, ..tiny_cfg() };
        assert!(init_fusion(&lr, &random_pd(1), &bad, &s).is_err());
    }

    #[test]
    fn inner_step_updates_both_networks() {
        let s = sched();
        let mut st = init_fusion(&lr_image(2), &random_pd(2), &tiny_cfg(), &s).unwrap();
        let xi = st.sample_xi().unwrap();
        let k0 = st.raw_kernel().unwrap();
        let probe = st.refiner.forward(&st.x0_prev).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let out = fusion_inner_step(&mut st, &xi, 1e-3).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
        assert_ne!(st.raw_kernel().unwrap(), k0);
        let after = st.refiner.forward(&st.x0_prev).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(probe, after);
    }

    #[test]
    fn ground_truth_plugs_into_the_consistency_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hr = ImagePlane::from_fn(24, 24, 3, ValueRange::Unit, |_, _, _| rng.random()).unwrap();
        let k =
            Kernel::from_fn(5, 5, |y, x| 1.0 / (1.0 + (y as f64 - 2.0).powi(2) + (x as f64 - 1.5).powi(2))).unwrap();
        let k = k.normalized().unwrap();
        let lr = convolve_downsample(&hr, &k, 2).unwrap();
        let x = hr.to_signed().unwrap().to_tensor(DTYPE, &Device::Cpu).unwrap();
        let kt = kernel_tensor(&k, DTYPE, &Device::Cpu).unwrap();
        let y = downscale(&x, &kt, 2).unwrap();
        let diff = (lr.to_signed().unwrap().to_tensor(DTYPE, &Device::Cpu).unwrap() - y).unwrap();
        let r = diff.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(r < 1e-4, "residual {r}");
    }

    #[test]
    fn run_is_deterministic_and_leaves_prior_untouched() {
        let s = sched();
        let pd = random_pd(4);
        let before = pd.tensors.clone();
        let lr = lr_image(4);
        let mut seen = Vec::new();
        let a = run_fusion_with(&lr, &pd, &tiny_cfg(), &s, |st| seen.push(st.t)).unwrap();
        let b = run_fusion(&lr, &pd, &tiny_cfg(), &s).unwrap();
        assert_eq!(seen, vec![3, 2, 1]);
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.kernel, b.kernel);
        assert_eq!((a.hr.height(), a.hr.width()), (24, 24));
        assert_eq!(a.trace.steps.iter().map(|s| s.losses.len()).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert!(a.trace.steps.iter().all(|s| (s.lr_end - 5e-4).abs() < 1e-15));
        assert_eq!(a.trace.snapshots.iter().map(|s| s.t).collect::<Vec<_>>(), vec![2, 1]);
        assert!((a.kernel.sum() - 1.0).abs() < 1e-9);
        for (name, t) in &before {
            let now = &pd.tensors[name];
            let d = (t - now).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{name} changed");
        }
    }

    #[test]
    fn final_transition_is_deterministic_mean() {
        let s = sched();
        let cfg = FusionConfig { t_nd: 1, ..tiny_cfg() };
        let mut st = init_fusion(&lr_image(5), &random_pd(5), &cfg, &s).unwrap();
        let xi = st.sample_xi().unwrap();
        fusion_inner_step(&mut st, &xi, 1e-3).unwrap();
        let (_, x0) = st.last.clone().unwrap();
        fusion_outer_step(&mut st).unwrap();
        assert!(st.is_finished());
        let x0 = ImagePlane::from_tensor(&x0, ValueRange::Signed).unwrap();
        let out = st.sample().unwrap();
        let d = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-6);
        assert!(fusion_outer_step(&mut st).is_err());
    }
}
