//! The degradation model `I_LR = (I_HR * k)↓s`, kernel generators, and
//! benchmark dataset synthesis.

mod kernel;
mod ops;
mod synth;

pub use kernel::{make_kernel, Kernel, KernelBankEntry, KernelGenerator};
pub use ops::{convolve_downsample, downscale, kernel_tensor};
pub use synth::{synthesize_dataset, DatasetSpec, Manifest, ManifestRecord, Pairing, MANIFEST_FILE};
