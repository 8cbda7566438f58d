//! Evaluation harness: luminance PSNR/SSIM, the bicubic and pseudo-inverse
//! backprojection baselines, kernel scoring, reports and panels.

mod baselines;
mod metrics;
mod panels;
mod report;

pub use baselines::{bicubic_upscale, pinv_backproject};
pub use metrics::{border_pixels, kernel_similarity, psnr_y, ssim_y, DEFAULT_BORDER_FRACTION, PSNR_CAP_DB};
pub use panels::{emit_panels, render_kernel_grid, side_by_side};
pub use report::{
    evaluate_manifest, kernel_output_path, output_path, write_baselines, EvalProtocol, EvalRecord, EvalReport,
    MethodSummary, BICUBIC, PINV,
};
