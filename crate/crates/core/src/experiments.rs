//! Drivers behind the command-line experiments: held-out evaluation, the
//! sampling benchmark, the sequence-length sweep and latent animation.

use std::fmt::Write;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Conditioning, Model, ModelConfig};
use crate::objectives::{mse_8bit, psnr, ssim};
use crate::render::{decode_frame, render_image, Camera, RenderSettings, RenderedImage};
use crate::sampling::SamplingMode;
use crate::train::{
    conditioning_views, encode_keypoints, encode_mean, latent_interpolate, latent_sample, render_code, TrainConfig,
    Trainer,
};

pub const EVAL_HEADER: &str = "frame,camera,mse,psnr,ssim";
pub const BENCH_HEADER: &str = "mode,mse,psnr,ssim,wall_ms,evals_per_ray";
pub const SEQLEN_HEADER: &str = "mode,seq_len,mse,ssim";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    /// Compare a rendering (quantized to 8 bits first) with a reference image.
    pub fn compare(rendered: &Image, reference: &Image) -> Result<ImageMetrics> {
        let q = rendered.quantized();
        let mse = mse_8bit(&q, reference)?;
        Ok(ImageMetrics {
            mse,
            psnr: psnr(mse),
            ssim: ssim(&q, reference)?,
        })
    }

    /// Column-wise mean of every metric.
    pub fn mean(all: &[ImageMetrics]) -> Result<ImageMetrics> {
        if all.is_empty() {
            return Err(Error::invalid("ImageMetrics::mean", "no images"));
        }
        let n = all.len() as f64;
        let avg = |f: fn(&ImageMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Ok(ImageMetrics {
            mse: avg(|m| m.mse),
            psnr: avg(|m| m.psnr),
            ssim: avg(|m| m.ssim),
        })
    }
}

/// Mean of the image encoder's posterior for `frame`.
pub fn frame_code(model: &Model, dataset: &Dataset, frame: usize) -> Result<Vec<f64>> {
    Ok(encode_mean(model, &conditioning_views(dataset, &model.config, frame)?)?.mu)
}

/// Render `frame` from `cam` with the frame's encoded code.
pub fn render_view(
    model: &Model,
    dataset: &Dataset,
    frame: usize,
    cam: usize,
    settings: &RenderSettings,
    tile: usize,
) -> Result<RenderedImage> {
    let camera = dataset
        .cameras
        .get(cam)
        .ok_or_else(|| Error::invalid("render_view", format!("camera {cam} of {}", dataset.cameras.len())))?;
    let z = frame_code(model, dataset, frame)?;
    render_code(model, &z, camera, &dataset.bounds, settings, tile)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub frame: usize,
    pub camera: usize,
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean: ImageMetrics,
}

impl EvalSummary {
    /// One row per (frame, camera) and a final `mean` row.
    pub fn csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(s, "{},{},{},{},{}", r.frame, r.camera, m.mse, m.psnr, m.ssim);
        }
        let m = &self.mean;
        let _ = writeln!(s, "mean,,{},{},{}", m.mse, m.psnr, m.ssim);
        s
    }
}

/// Fine-pass metrics of every (frame, camera) pair.
pub fn evaluate_views(
    model: &Model,
    dataset: &Dataset,
    frames: &[usize],
    cameras: &[usize],
    settings: &RenderSettings,
    tile: usize,
) -> Result<EvalSummary> {
    let mut rows = Vec::with_capacity(frames.len() * cameras.len());
    for &f in frames {
        let z = frame_code(model, dataset, f)?;
        for &c in cameras {
            let img = render_code(model, &z, &dataset.cameras[c], &dataset.bounds, settings, tile)?;
            rows.push(EvalRow {
                frame: f,
                camera: c,
                metrics: ImageMetrics::compare(&img.fine, dataset.image(f, c))?,
            });
        }
    }
    let all: Vec<ImageMetrics> = rows.iter().map(|r| r.metrics).collect();
    Ok(EvalSummary {
        mean: ImageMetrics::mean(&all)?,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: SamplingMode,
    pub metrics: ImageMetrics,
    /// Whole-image render time summed over the views.
    pub wall_ms: f64,
    /// Time spent placing fine samples and running the fine pass.
    pub fine_ms: f64,
    /// Scene-MLP evaluations per ray that hits the volume.
    pub evals_per_ray: f64,
}

/// Render the same views under every sampling mode. Fields are decoded
/// once per view outside the timed region.
pub fn benchmark_strategies(
    model: &Model,
    dataset: &Dataset,
    views: &[(usize, usize)],
    settings: &RenderSettings,
    tile: usize,
) -> Result<Vec<BenchRow>> {
    if views.is_empty() {
        return Err(Error::invalid("benchmark_strategies", "no views"));
    }
    let n_modes = SamplingMode::ALL.len();
    let mut metrics = vec![Vec::new(); n_modes];
    let mut wall = vec![0.0; n_modes];
    let mut fine = vec![0u128; n_modes];
    let mut evals = vec![(0usize, 0usize); n_modes];
    for &(f, c) in views {
        let cam = &dataset.cameras[c];
        let decoded = decode_frame(model, &frame_code(model, dataset, f)?, cam, &dataset.bounds)?;
        for (i, mode) in SamplingMode::ALL.into_iter().enumerate() {
            let start = Instant::now();
            let img = render_image(model, &decoded, cam, &dataset.bounds, &settings.with_mode(mode), tile)?;
            wall[i] += start.elapsed().as_secs_f64() * 1e3;
            fine[i] += img.stats.fine_nanos;
            evals[i].0 += img.stats.mlp_evals;
            evals[i].1 += img.stats.hit_rays;
            metrics[i].push(ImageMetrics::compare(&img.fine, dataset.image(f, c))?);
        }
    }
    SamplingMode::ALL
        .into_iter()
        .enumerate()
        .map(|(i, mode)| {
            Ok(BenchRow {
                mode,
                metrics: ImageMetrics::mean(&metrics[i])?,
                wall_ms: wall[i],
                fine_ms: fine[i] as f64 / 1e6,
                evals_per_ray: if evals[i].1 == 0 { 0.0 } else { evals[i].0 as f64 / evals[i].1 as f64 },
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.mode, m.mse, m.psnr, m.ssim, r.wall_ms, r.evals_per_ray);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqLenRow {
    pub mode: Conditioning,
    pub seq_len: usize,
    pub mse: f64,
    pub ssim: f64,
}

/// Train one model per (conditioning, length) on the first `length` frames
/// and score frame 0, which every prefix shares, on the held-out cameras.
/// All runs use the same initialization seed and batch order. `progress`
/// sees each row with the model that produced it.
pub fn seqlen_sweep(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    lengths: &[usize],
    iters: u64,
    init_seed: u64,
    mut progress: impl FnMut(&SeqLenRow, &Model),
) -> Result<Vec<SeqLenRow>> {
    let mut rows = Vec::new();
    for mode in [Conditioning::LocalCodes, Conditioning::GlobalCode] {
        for &len in lengths {
            let prefix = dataset.truncated(len)?;
            let cfg = ModelConfig {
                conditioning: mode,
                ..model.clone()
            };
            let mut trainer = Trainer::new(&prefix, Model::init(cfg, init_seed)?, train.clone())?;
            for _ in 0..iters {
                trainer.step()?;
            }
            let summary = evaluate_views(
                &trainer.model,
                &prefix,
                &[0],
                &prefix.test,
                &trainer.config.render,
                trainer.config.tile,
            )?;
            let row = SeqLenRow {
                mode,
                seq_len: len,
                mse: summary.mean.mse,
                ssim: summary.mean.ssim,
            };
            progress(&row, &trainer.model);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn seqlen_csv(rows: &[SeqLenRow]) -> String {
    let mut s = format!("{SEQLEN_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.mode, r.seq_len, r.mse, r.ssim);
    }
    s
}

fn render_all(
    model: &Model,
    codes: &[Vec<f64>],
    cam: &Camera,
    dataset: &Dataset,
    settings: &RenderSettings,
    tile: usize,
) -> Result<Vec<Image>> {
    codes
        .iter()
        .map(|z| Ok(render_code(model, z, cam, &dataset.bounds, settings, tile)?.fine))
        .collect()
}

/// Renders along the straight line between the codes of two frames.
pub fn animate_interp(
    model: &Model,
    dataset: &Dataset,
    frames: (usize, usize),
    steps: usize,
    cam: usize,
    settings: &RenderSettings,
    tile: usize,
) -> Result<Vec<Image>> {
    let a = frame_code(model, dataset, frames.0)?;
    let b = frame_code(model, dataset, frames.1)?;
    let codes = latent_interpolate(&a, &b, steps)?;
    render_all(model, &codes, &dataset.cameras[cam], dataset, settings, tile)
}

/// Renders of `n` codes drawn from the standard normal prior.
pub fn animate_sample(
    model: &Model,
    dataset: &Dataset,
    seed: u64,
    n: usize,
    cam: usize,
    settings: &RenderSettings,
    tile: usize,
) -> Result<Vec<Image>> {
    let codes = latent_sample(seed, n, model.config.z_dim);
    render_all(model, &codes, &dataset.cameras[cam], dataset, settings, tile)
}

/// Renders driven by the keypoint encoder, one per keypoint set.
pub fn animate_keypoints(
    model: &Model,
    dataset: &Dataset,
    keypoints: &[Vec<[f64; 2]>],
    cam: usize,
    settings: &RenderSettings,
    tile: usize,
) -> Result<Vec<Image>> {
    let codes = keypoints
        .iter()
        .map(|k| encode_keypoints(model, k))
        .collect::<Result<Vec<_>>>()?;
    render_all(model, &codes, &dataset.cameras[cam], dataset, settings, tile)
}
