//! Flat `key=value` run configuration. Every tunable constant of every
//! module has a key; unknown keys are rejected and `echo` writes the fully
//! resolved configuration back out in a form `parse` accepts.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{DistillConfig, FinetuneConfig, TrainConfig};

/// Settings of the experiment drivers (evaluation, ablations, animation).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Training iterations of each run in the sequence-length sweep.
    pub seqlen_iters: u64,
    pub seqlen_lengths: Vec<usize>,
    /// Frames rendered per mode by the sampling benchmark.
    pub bench_frames: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seqlen_iters: 2000,
            seqlen_lengths: vec![1, 4, 8, 16],
            bench_frames: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub experiment: ExperimentConfig,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for `{key}`: {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

pub(crate) fn parse_rgb(key: &str, value: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs three comma-separated values, got {value:?}")))
}

pub(crate) fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

type Entries = Vec<(&'static str, String)>;

pub(crate) fn data_entries(d: &DatasetConfig) -> Entries {
    vec![
        ("n_train_cams", d.n_train_cams.to_string()),
        ("n_test_cams", d.n_test_cams.to_string()),
        ("n_frames", d.n_frames.to_string()),
        ("width", d.width.to_string()),
        ("height", d.height.to_string()),
        ("radius", d.radius.to_string()),
        ("focal_scale", d.focal_scale.to_string()),
        ("n_blobs", d.n_blobs.to_string()),
        ("oracle_samples", d.oracle_samples.to_string()),
        ("time_offset", d.time_offset.to_string()),
        ("background", list(&d.background)),
    ]
}

fn set_data(d: &mut DatasetConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "n_train_cams" => d.n_train_cams = parse(key, v)?,
        "n_test_cams" => d.n_test_cams = parse(key, v)?,
        "n_frames" => d.n_frames = parse(key, v)?,
        "width" => d.width = parse(key, v)?,
        "height" => d.height = parse(key, v)?,
        "radius" => d.radius = parse(key, v)?,
        "focal_scale" => d.focal_scale = parse(key, v)?,
        "n_blobs" => d.n_blobs = parse(key, v)?,
        "oracle_samples" => d.oracle_samples = parse(key, v)?,
        "time_offset" => d.time_offset = parse(key, v)?,
        "background" => d.background = parse_rgb(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub(crate) fn model_entries(m: &ModelConfig) -> Entries {
    vec![
        ("z_dim", m.z_dim.to_string()),
        ("grid_res", m.grid_res.to_string()),
        ("f_loc", m.f_loc.to_string()),
        ("enc_height", m.enc_height.to_string()),
        ("enc_width", m.enc_width.to_string()),
        ("enc_channels", list(&m.enc_channels)),
        ("enc_hidden", m.enc_hidden.to_string()),
        ("dec_hidden", m.dec_hidden.to_string()),
        ("dec_channels", list(&m.dec_channels)),
        ("mlp_width", m.mlp_width.to_string()),
        ("mlp_depth", m.mlp_depth.to_string()),
        ("mlp_color_width", m.mlp_color_width.to_string()),
        ("pos_freqs", m.pos_freqs.to_string()),
        ("view_freqs", m.view_freqs.to_string()),
        ("kps_channels", list(&m.kps_channels)),
        ("kps_hidden", list(&m.kps_hidden)),
        ("logstd_bias_init", m.logstd_bias_init.to_string()),
        ("conditioning", m.conditioning.to_string()),
    ]
}

pub(crate) fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "z_dim" => m.z_dim = parse(key, v)?,
        "grid_res" => m.grid_res = parse(key, v)?,
        "f_loc" => m.f_loc = parse(key, v)?,
        "enc_height" => m.enc_height = parse(key, v)?,
        "enc_width" => m.enc_width = parse(key, v)?,
        "enc_channels" => m.enc_channels = parse_list(key, v)?,
        "enc_hidden" => m.enc_hidden = parse(key, v)?,
        "dec_hidden" => m.dec_hidden = parse(key, v)?,
        "dec_channels" => m.dec_channels = parse_list(key, v)?,
        "mlp_width" => m.mlp_width = parse(key, v)?,
        "mlp_depth" => m.mlp_depth = parse(key, v)?,
        "mlp_color_width" => m.mlp_color_width = parse(key, v)?,
        "pos_freqs" => m.pos_freqs = parse(key, v)?,
        "view_freqs" => m.view_freqs = parse(key, v)?,
        "kps_channels" => m.kps_channels = parse_list(key, v)?,
        "kps_hidden" => m.kps_hidden = parse_list(key, v)?,
        "logstd_bias_init" => m.logstd_bias_init = parse(key, v)?,
        "conditioning" => m.conditioning = v.trim().parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub(crate) fn train_entries(t: &TrainConfig) -> Entries {
    vec![
        ("seed", t.seed.to_string()),
        ("rays_per_batch", t.rays_per_batch.to_string()),
        ("views_per_batch", t.views_per_batch.to_string()),
        ("iters", t.iters.to_string()),
        ("lr", t.adam.lr.to_string()),
        ("beta1", t.adam.beta1.to_string()),
        ("beta2", t.adam.beta2.to_string()),
        ("adam_eps", t.adam.eps.to_string()),
        ("lambda_f", t.loss.lambda_f.to_string()),
        ("lambda_c", t.loss.lambda_c.to_string()),
        ("lambda_kl", t.loss.lambda_kl.to_string()),
        ("color_scale", t.color_scale.to_string()),
        ("n_coarse", t.render.n_coarse.to_string()),
        ("n_fine", t.render.n_fine.to_string()),
        ("k_range_divisor", t.render.k_range_divisor.to_string()),
        ("sampling", t.render.mode.to_string()),
        ("eval_every", t.eval_every.to_string()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
        ("tile", t.tile.to_string()),
    ]
}

pub(crate) fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "seed" => t.seed = parse(key, v)?,
        "rays_per_batch" => t.rays_per_batch = parse(key, v)?,
        "views_per_batch" => t.views_per_batch = parse(key, v)?,
        "iters" => t.iters = parse(key, v)?,
        "lr" => t.adam.lr = parse(key, v)?,
        "beta1" => t.adam.beta1 = parse(key, v)?,
        "beta2" => t.adam.beta2 = parse(key, v)?,
        "adam_eps" => t.adam.eps = parse(key, v)?,
        "lambda_f" => t.loss.lambda_f = parse(key, v)?,
        "lambda_c" => t.loss.lambda_c = parse(key, v)?,
        "lambda_kl" => t.loss.lambda_kl = parse(key, v)?,
        "color_scale" => t.color_scale = parse(key, v)?,
        "n_coarse" => t.render.n_coarse = parse(key, v)?,
        "n_fine" => t.render.n_fine = parse(key, v)?,
        "k_range_divisor" => t.render.k_range_divisor = parse(key, v)?,
        "sampling" => t.render.mode = v.trim().parse()?,
        "eval_every" => t.eval_every = parse(key, v)?,
        "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
        "tile" => t.tile = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn other_entries(c: &RunConfig) -> Entries {
    vec![
        ("distill_iters", c.distill.iters.to_string()),
        ("distill_lr", c.distill.lr.to_string()),
        ("finetune_iters", c.finetune.iters.to_string()),
        ("finetune_lr", c.finetune.lr.to_string()),
        ("finetune_scope", c.finetune.scope.to_string()),
        ("seqlen_iters", c.experiment.seqlen_iters.to_string()),
        ("seqlen_lengths", list(&c.experiment.seqlen_lengths)),
        ("bench_frames", c.experiment.bench_frames.to_string()),
        ("threads", c.threads.to_string()),
    ]
}

fn set_other(c: &mut RunConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "distill_iters" => c.distill.iters = parse(key, v)?,
        "distill_lr" => c.distill.lr = parse(key, v)?,
        "finetune_iters" => c.finetune.iters = parse(key, v)?,
        "finetune_lr" => c.finetune.lr = parse(key, v)?,
        "finetune_scope" => c.finetune.scope = v.trim().parse()?,
        "seqlen_iters" => c.experiment.seqlen_iters = parse(key, v)?,
        "seqlen_lengths" => c.experiment.seqlen_lengths = parse_list(key, v)?,
        "bench_frames" => c.experiment.bench_frames = parse(key, v)?,
        "threads" => c.threads = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Split `key=value` lines, skipping blanks and `#` comments. Duplicate
/// keys are an error.
pub(crate) fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got {raw:?}", i + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("{origin}:{}: duplicate key `{k}`", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Set one key. The seed is shared by data synthesis and training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.data.seed = parse(key, value)?;
        }
        let known = set_train(&mut self.train, key, value)?
            || set_data(&mut self.data, key, value)?
            || set_model(&mut self.model, key, value)?
            || set_other(self, key, value)?;
        if !known {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(())
    }

    /// Defaults overridden by the pairs in `text`.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text, origin)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// The `key=value` pairs of a config file, unvalidated.
    pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_pairs(&text, &path.display().to_string())
    }

    /// Apply `key` to a training configuration, if it is a training key.
    pub fn set_train_key(train: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
        set_train(train, key, value)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        self.finetune.validate()?;
        if self.experiment.seqlen_lengths.is_empty() || self.experiment.seqlen_lengths.contains(&0) {
            return Err(Error::Config("seqlen_lengths must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Entries {
        let mut e = train_entries(&self.train);
        e.extend(data_entries(&self.data));
        e.extend(model_entries(&self.model));
        e.extend(other_entries(self));
        e
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }
}
