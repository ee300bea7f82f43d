//! Cameras, rays and differentiable coarse + fine ray marching.

mod camera;
mod frame;
mod march;
mod pipeline;

pub use camera::{Camera, Ray, SceneBounds, Vec3, MIN_NEAR};
pub use frame::{decode_frame, render_image, DecodedFrame, RenderedImage};
pub use march::{
    accumulate, composite_background, expected_depth, march_weights, over_background, sample_weights,
    stratified_depths, weighted_colors, DepthSamples, MarchResult, EMPTY_ALPHA,
};
pub use pipeline::{render_rays, FrameVars, MarchStats, RayOutputs};

use crate::error::{Error, Result};
use crate::sampling::SamplingMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub k_range_divisor: usize,
    pub background: [f64; 3],
    pub mode: SamplingMode,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            n_coarse: 32,
            n_fine: 8,
            k_range_divisor: 10,
            background: [0.1, 0.1, 0.1],
            mode: SamplingMode::Simple,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 || self.n_fine < 1 || self.k_range_divisor < 1 {
            return Err(Error::Config(format!(
                "need n_coarse >= 2, n_fine >= 1, k_range_divisor >= 1 (got {}, {}, {})",
                self.n_coarse, self.n_fine, self.k_range_divisor
            )));
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("background must be finite".into()));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: SamplingMode) -> RenderSettings {
        RenderSettings { mode, ..self.clone() }
    }
}
