//! DDPM noise-schedule tables and the velocity-parameterization algebra.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Result};
use crate::image::ImagePlane;

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Coefficient tables indexed by `t` in `0..=T`; entry 0 holds the `t = 0`
/// conventions `alpha_bar = 1`, `sigma = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`, cumulative-product
    /// `alpha_bar`, and posterior standard deviations
    /// `sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn build(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { steps, beta_start, beta_end } = params;
        if steps == 0 {
            return Err(domain!("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(domain!("invalid beta range [{beta_start}, {beta_end}]"));
        }
        let mut beta = vec![0.0; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            };
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            let var = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
            sigma[t] = var.max(0.0).sqrt();
        }
        Ok(Self { params, beta, alpha, alpha_bar, sigma })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    /// Short content hash of the schedule parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.params.steps.to_le_bytes());
        h.update(self.params.beta_start.to_le_bytes());
        h.update(self.params.beta_end.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(domain!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Posterior-mean weights `(c_x0, c_xt)` with
    /// `mu_t = c_x0 * x0 + c_xt * x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar[t];
        let c0 = self.beta[t] * self.alpha_bar[t - 1] / denom;
        let ct = (1.0 - self.alpha_bar[t - 1]) * self.alpha[t] / denom;
        (c0, ct)
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn diffuse(&self, x0: &ImagePlane, t: usize, eps: &ImagePlane) -> Result<ImagePlane> {
        self.check(t)?;
        let (a, b) = self.signal_noise(t);
        combine(x0, eps, a, b)
    }

    /// `v_t = sqrt(ab_t) eps - sqrt(1 - ab_t) x0`.
    pub fn v_target(&self, x0: &ImagePlane, eps: &ImagePlane, t: usize) -> Result<ImagePlane> {
        self.check(t)?;
        let (a, b) = self.signal_noise(t);
        combine(eps, x0, a, -b)
    }

    /// `x0 = sqrt(ab_t) x_t - sqrt(1 - ab_t) v`.
    pub fn x0_from_v(&self, x_t: &ImagePlane, v: &ImagePlane, t: usize) -> Result<ImagePlane> {
        self.check(t)?;
        let (a, b) = self.signal_noise(t);
        combine(x_t, v, a, -b)
    }

    /// One reverse transition `x_{t-1} = mu_t(x0, x_t) + sigma_t * noise`.
    /// At `t = 1` the posterior variance vanishes and the mean is returned.
    pub fn posterior_step(
        &self,
        x_hat0: &ImagePlane,
        x_t: &ImagePlane,
        t: usize,
        noise: &ImagePlane,
    ) -> Result<ImagePlane> {
        self.check(t)?;
        let (c0, ct) = self.posterior_coefficients(t);
        let mean = combine(x_hat0, x_t, c0, ct)?;
        if t == 1 {
            return Ok(mean);
        }
        combine(&mean, noise, 1.0, self.sigma[t])
    }
}

fn combine(a: &ImagePlane, b: &ImagePlane, wa: f64, wb: f64) -> Result<ImagePlane> {
    if !a.same_shape(b) {
        return Err(domain!("shape mismatch between operands"));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = wa * *o + wb * v;
    }
    Ok(out)
}
