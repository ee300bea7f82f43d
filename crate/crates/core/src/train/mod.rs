//! Optimization: Adam, the ray-batch training loop, checkpoints, keypoint
//! distillation, fine-tuning on new sequences and latent-space utilities.

mod adam;
mod checkpoint;
mod distill;
mod inference;
mod latent;
mod trainer;

use std::fmt;
use std::str::FromStr;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use distill::{distill_keypoint_encoder, finetune, DistillConfig, FinetuneConfig, FinetuneReport};
pub use inference::{conditioning_views, encode_keypoints, encode_mean, render_code};
pub use latent::{latent_interpolate, latent_sample};
pub use trainer::{LogRow, StepReport, Trainer, METRICS_HEADER};
#[cfg(test)]
pub(crate) use trainer::tests as tests_support;

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::render::RenderSettings;

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Image encoder, decoder and scene MLP.
    Full,
    /// Image encoder only.
    Encoder,
}

impl Scope {
    pub fn trains(self, name: &str) -> bool {
        match self {
            Scope::Full => ["enc.", "dec.", "mlp."].iter().any(|p| name.starts_with(p)),
            Scope::Encoder => name.starts_with("enc."),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scope::Full),
            "encoder" => Ok(Scope::Encoder),
            _ => Err(Error::Config(format!("scope must be encoder|full, got {s:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Full => "full",
            Scope::Encoder => "encoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    /// (frame, camera) draws per batch; the rays are split between them.
    pub views_per_batch: usize,
    pub iters: u64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Colors are multiplied by this before the reconstruction terms, so
    /// those terms are measured on the 8-bit scale.
    pub color_scale: f64,
    pub seed: u64,
    /// Sampling used while training and evaluating. The background is
    /// replaced by the dataset's.
    pub render: RenderSettings,
    /// Evaluate on held-out cameras every this many iterations (0: only at the end).
    pub eval_every: u64,
    /// Write a numbered checkpoint every this many iterations (0: never).
    pub checkpoint_every: u64,
    /// Tile edge for full-image renders.
    pub tile: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rays_per_batch: 64 * 64,
            views_per_batch: 4,
            iters: 2000,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            color_scale: 255.0,
            seed: 1,
            render: RenderSettings::default(),
            eval_every: 500,
            checkpoint_every: 1000,
            tile: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.views_per_batch == 0 || self.views_per_batch > self.rays_per_batch {
            return Err(Error::Config(format!(
                "need 1 <= views_per_batch <= rays_per_batch (got {} and {})",
                self.views_per_batch, self.rays_per_batch
            )));
        }
        if !(self.color_scale > 0.0 && self.color_scale.is_finite()) {
            return Err(Error::Config(format!("color_scale must be positive, got {}", self.color_scale)));
        }
        if self.tile == 0 {
            return Err(Error::Config("tile must be at least 1".into()));
        }
        let w = &self.loss;
        if [w.lambda_f, w.lambda_c, w.lambda_kl].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        self.adam.validate()?;
        self.render.validate()
    }
}
