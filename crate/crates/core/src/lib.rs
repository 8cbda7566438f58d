//! Zero-shot blind super-resolution.
//!
//! A single low-resolution image is used to train a small-receptive-field
//! patch-diffusion denoiser ([`patch_diffusion`]). A guided reverse-diffusion
//! loop ([`fusion`]) then recovers the high-resolution image and the unknown
//! downscaling kernel together, with a deep-image-prior U-Net ([`refiner`]) and
//! a sinusoidal coordinate network for the kernel ([`kernel_inr`]).
//! [`degradation`] and [`evalbench`] provide the forward model, benchmark
//! synthesis, baselines and metrics.

pub mod degradation;
pub mod error;
pub mod evalbench;
pub mod fusion;
pub mod image;
pub mod kernel_inr;
pub mod nn;
pub mod patch_diffusion;
pub mod refiner;
pub mod schedule;

pub use degradation::{convolve_downsample, Kernel};
pub use error::{Error, Result};
pub use image::{ImagePlane, ValueRange};
pub use schedule::{NoiseSchedule, ScheduleParams};
