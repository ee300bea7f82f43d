//! Learnable components: the variational image encoder, the keypoint
//! encoder, the two-branch volume decoder and the scene MLP.
//!
//! Parameters live in one [`ParamStore`] under the prefixes `enc.`,
//! `kps.`, `dec.` and `mlp.`.

mod decoder;
mod encoder;
mod mlp;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub use decoder::{assemble_field, FEATURE_OFFSET, OPACITY_CHANNEL, decode_color, decode_opacity, volume_decoder, VoxelField};
pub use encoder::{image_encoder, keypoint_encoder, reparameterize, LatentDistribution, LatentVars};
pub use mlp::{global_code_mlp, positional_encoding, scene_mlp, MlpOutput};

/// Negative slope of every leaky ReLU in the encoder and decoder.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Views stacked along the channel axis of the image encoder input.
pub const ENCODER_VIEWS: usize = 3;

/// What conditions the scene MLP besides position and view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Trilinearly sampled local codes from the voxel field.
    LocalCodes,
    /// The global latent code, shared by every point.
    GlobalCode,
}

impl FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Conditioning::LocalCodes),
            "global" => Ok(Conditioning::GlobalCode),
            _ => Err(Error::Config(format!("conditioning must be local|global, got {s:?}"))),
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::LocalCodes => "local",
            Conditioning::GlobalCode => "global",
        })
    }
}

/// Sizes of every network. `Default` is the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub z_dim: usize,
    /// Voxel grid resolution D (power of two).
    pub grid_res: usize,
    /// Width of each local code (f and f^v).
    pub f_loc: usize,
    pub enc_height: usize,
    pub enc_width: usize,
    /// Output channels of each stride-2 encoder convolution.
    pub enc_channels: Vec<usize>,
    pub enc_hidden: usize,
    /// Width of the decoder's first linear layer (reshaped to `W×1×1×1`).
    pub dec_hidden: usize,
    /// Output channels of every transposed convolution except the last.
    pub dec_channels: Vec<usize>,
    pub mlp_width: usize,
    pub mlp_depth: usize,
    pub mlp_color_width: usize,
    pub pos_freqs: usize,
    pub view_freqs: usize,
    pub kps_channels: Vec<usize>,
    pub kps_hidden: Vec<usize>,
    /// Initial bias of the encoder's log-sigma head.
    pub logstd_bias_init: f64,
    pub conditioning: Conditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            z_dim: 32,
            grid_res: 8,
            f_loc: 8,
            enc_height: 128,
            enc_width: 64,
            enc_channels: vec![8, 16, 16, 32, 32],
            enc_hidden: 64,
            dec_hidden: 64,
            dec_channels: vec![32, 32],
            mlp_width: 64,
            mlp_depth: 2,
            mlp_color_width: 32,
            pos_freqs: 6,
            view_freqs: 4,
            kps_channels: vec![16, 32, 64],
            kps_hidden: vec![64, 64],
            logstd_bias_init: -3.0,
            conditioning: Conditioning::LocalCodes,
        }
    }
}

/// One layer of the shape trace.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub output: Vec<usize>,
}

impl ModelConfig {
    /// The full-size architecture: 256-d code, 64³ field.
    pub fn full_scale() -> Self {
        ModelConfig {
            z_dim: 256,
            grid_res: 64,
            f_loc: 32,
            enc_height: 512,
            enc_width: 256,
            enc_channels: vec![32, 64, 128, 128, 256, 256, 256],
            enc_hidden: 512,
            dec_hidden: 1024,
            dec_channels: vec![512, 512, 256, 256, 128],
            mlp_width: 256,
            mlp_depth: 4,
            mlp_color_width: 128,
            pos_freqs: 10,
            view_freqs: 4,
            kps_channels: vec![64, 128, 256, 512, 1024],
            kps_hidden: vec![512, 512],
            logstd_bias_init: 0.0,
            conditioning: Conditioning::LocalCodes,
        }
    }

    /// F = 4 + 2·F_loc.
    pub fn field_channels(&self) -> usize {
        4 + 2 * self.f_loc
    }

    pub fn pos_enc_width(&self) -> usize {
        2 * self.pos_freqs * 3
    }

    pub fn view_enc_width(&self) -> usize {
        2 * self.view_freqs * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.z_dim == 0 || self.f_loc == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 {
            return bad("network widths must be positive".into());
        }
        if !self.grid_res.is_power_of_two() || self.grid_res < 2 {
            return bad(format!("grid_res must be a power of two >= 2, got {}", self.grid_res));
        }
        let ups = self.grid_res.trailing_zeros() as usize;
        if self.dec_channels.len() + 1 != ups {
            return bad(format!(
                "grid_res {} needs {} transposed convolutions, so dec_channels must list {} widths",
                self.grid_res,
                ups,
                ups - 1
            ));
        }
        let n = self.enc_channels.len();
        if n == 0 || self.enc_height != 4 << n || self.enc_width != 2 << n {
            return bad(format!(
                "encoder input {}x{} does not reach 4x2 after {n} stride-2 convolutions",
                self.enc_height, self.enc_width
            ));
        }
        if self.pos_freqs == 0 || self.view_freqs == 0 {
            return bad("positional encoding needs at least one frequency".into());
        }
        if self.mlp_depth == 0 || self.mlp_width == 0 || self.mlp_color_width == 0 {
            return bad("scene MLP widths must be positive".into());
        }
        if self.kps_channels.is_empty() || self.kps_hidden.contains(&0) || self.kps_channels.contains(&0) {
            return bad("keypoint encoder widths must be positive".into());
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) {
            return bad("convolution widths must be positive".into());
        }
        Ok(())
    }

    /// (in, out) channels of each encoder convolution.
    pub fn encoder_convs(&self) -> Vec<(usize, usize)> {
        chain(3 * ENCODER_VIEWS, &self.enc_channels)
    }

    /// (in, out) channels of the shared part of a decoder stack, before the final layer.
    pub fn decoder_convs(&self) -> Vec<(usize, usize)> {
        chain(self.dec_hidden, &self.dec_channels)
    }

    fn decoder_last_in(&self) -> usize {
        self.dec_channels.last().copied().unwrap_or(self.dec_hidden)
    }

    /// Trunk width of the global-code MLP, chosen so its parameter count
    /// is as close as possible to the local-code MLP.
    pub fn global_trunk_width(&self) -> usize {
        let target = mlp_param_count(self, Conditioning::LocalCodes, self.mlp_width);
        (1..=4 * self.mlp_width)
            .min_by_key(|&w| mlp_param_count(self, Conditioning::GlobalCode, w).abs_diff(target))
            .unwrap_or(self.mlp_width)
    }

    pub fn trunk_width(&self) -> usize {
        match self.conditioning {
            Conditioning::LocalCodes => self.mlp_width,
            Conditioning::GlobalCode => self.global_trunk_width(),
        }
    }

    /// Input widths of the MLP's trunk and color head.
    pub(crate) fn mlp_inputs(&self, conditioning: Conditioning, trunk: usize) -> (usize, usize) {
        match conditioning {
            Conditioning::LocalCodes => (
                self.pos_enc_width() + self.f_loc,
                trunk + self.view_enc_width() + self.f_loc,
            ),
            Conditioning::GlobalCode => (
                self.pos_enc_width() + self.z_dim,
                trunk + self.view_enc_width() + self.z_dim,
            ),
        }
    }

    /// Shapes after every layer of every network, in order.
    pub fn shape_trace(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        let mut push = |name: String, output: Vec<usize>| out.push(LayerShape { name, output });
        let (mut h, mut w) = (self.enc_height, self.enc_width);
        push("enc.input".into(), vec![3 * ENCODER_VIEWS, h, w]);
        for (i, (_, c)) in self.encoder_convs().into_iter().enumerate() {
            h /= 2;
            w /= 2;
            push(format!("enc.conv{i}"), vec![c, h, w]);
        }
        let flat = self.enc_channels.last().unwrap() * h * w;
        push("enc.flatten".into(), vec![flat]);
        push("enc.fc".into(), vec![self.enc_hidden]);
        push("enc.mu".into(), vec![self.z_dim]);
        push("enc.logstd".into(), vec![self.z_dim]);

        for (branch, n_in, n_out) in [
            ("opacity", self.z_dim, 1),
            ("color", self.z_dim + 3, 3),
        ] {
            push(format!("dec.{branch}.input"), vec![n_in]);
            push(format!("dec.{branch}.fc"), vec![self.dec_hidden]);
            push(format!("dec.{branch}.reshape"), vec![self.dec_hidden, 1, 1, 1]);
            for stack in ["value", "feat"] {
                let mut d = 1;
                for (i, (_, c)) in self.decoder_convs().into_iter().enumerate() {
                    d *= 2;
                    push(format!("dec.{branch}.{stack}{i}"), vec![c, d, d, d]);
                }
                d *= 2;
                let last = if stack == "value" { n_out } else { self.f_loc };
                push(
                    format!("dec.{branch}.{stack}{}", self.dec_channels.len()),
                    vec![last, d, d, d],
                );
            }
        }

        push("kps.input".into(), vec![2, 1]);
        for (i, &c) in self.kps_channels.iter().enumerate() {
            push(format!("kps.point{i}"), vec![c, 1]);
        }
        push("kps.maxpool".into(), vec![*self.kps_channels.last().unwrap()]);
        for (i, &c) in self.kps_hidden.iter().enumerate() {
            push(format!("kps.fc{i}"), vec![c]);
        }
        push("kps.out".into(), vec![self.z_dim]);
        out
    }
}

fn chain(first: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = first;
    widths
        .iter()
        .map(|&w| {
            let pair = (prev, w);
            prev = w;
            pair
        })
        .collect()
}

fn linear_count(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

fn mlp_param_count(cfg: &ModelConfig, conditioning: Conditioning, trunk: usize) -> usize {
    let (trunk_in, color_in) = cfg.mlp_inputs(conditioning, trunk);
    let mut n = linear_count(trunk_in, trunk);
    n += (cfg.mlp_depth - 1) * linear_count(trunk, trunk);
    n += linear_count(trunk, 1);
    n += linear_count(color_in, cfg.mlp_color_width);
    n += linear_count(cfg.mlp_color_width, 3);
    n
}

/// A model: its configuration plus every learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    /// Weights and biases uniform in `±1/√fan_in`.
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.uniform(format!("{prefix}.w"), vec![fan_out, fan_in], fan_in)?;
        self.uniform(format!("{prefix}.b"), vec![fan_out], fan_in)
    }

    fn conv2d(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
        let fan_in = c_in * 16;
        self.uniform(format!("{prefix}.w"), vec![c_out, c_in, 4, 4], fan_in)?;
        self.uniform(format!("{prefix}.b"), vec![c_out], fan_in)
    }

    /// Each output voxel of a stride-2 kernel-4 transposed convolution
    /// receives 2³ taps per input channel.
    fn conv_t3d(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
        let fan_in = c_in * 8;
        self.uniform(format!("{prefix}.w"), vec![c_in, c_out, 4, 4, 4], fan_in)?;
        self.uniform(format!("{prefix}.b"), vec![c_out], fan_in)
    }
}

impl Model {
    /// Fresh parameters from a fixed seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: stream(seed, Stream::Init, 0),
            store: &mut params,
        };
        let c = &config;

        for (i, (cin, cout)) in c.encoder_convs().into_iter().enumerate() {
            init.conv2d(&format!("enc.conv{i}"), cin, cout)?;
        }
        let flat = c.enc_channels.last().unwrap() * 8;
        init.linear("enc.fc", flat, c.enc_hidden)?;
        init.linear("enc.mu", c.enc_hidden, c.z_dim)?;
        init.linear("enc.logstd", c.enc_hidden, c.z_dim)?;
        let logstd_bias = Tensor::full([c.z_dim], c.logstd_bias_init);
        init.store.set("enc.logstd.b", logstd_bias)?;

        for (branch, n_in, n_out) in [("opacity", c.z_dim, 1), ("color", c.z_dim + 3, 3)] {
            init.linear(&format!("dec.{branch}.fc"), n_in, c.dec_hidden)?;
            for (stack, last) in [("value", n_out), ("feat", c.f_loc)] {
                for (i, (cin, cout)) in c.decoder_convs().into_iter().enumerate() {
                    init.conv_t3d(&format!("dec.{branch}.{stack}{i}"), cin, cout)?;
                }
                let i = c.dec_channels.len();
                init.conv_t3d(&format!("dec.{branch}.{stack}{i}"), c.decoder_last_in(), last)?;
            }
        }

        let trunk = c.trunk_width();
        let (trunk_in, color_in) = c.mlp_inputs(c.conditioning, trunk);
        init.linear("mlp.trunk0", trunk_in, trunk)?;
        for i in 1..c.mlp_depth {
            init.linear(&format!("mlp.trunk{i}"), trunk, trunk)?;
        }
        init.linear("mlp.sigma", trunk, 1)?;
        init.linear("mlp.color0", color_in, c.mlp_color_width)?;
        init.linear("mlp.color1", c.mlp_color_width, 3)?;

        for (i, (cin, cout)) in chain(2, &c.kps_channels).into_iter().enumerate() {
            init.linear(&format!("kps.point{i}"), cin, cout)?;
        }
        let pooled = *c.kps_channels.last().unwrap();
        for (i, (cin, cout)) in chain(pooled, &c.kps_hidden).into_iter().enumerate() {
            init.linear(&format!("kps.fc{i}"), cin, cout)?;
        }
        init.linear("kps.out", c.kps_hidden.last().copied().unwrap_or(pooled), c.z_dim)?;

        Ok(Model { config, params })
    }

    /// Parameters of the image encoder.
    pub fn encoder_params(&self) -> ParamStore {
        self.params.filter_prefix("enc.")
    }

    pub fn decoder_params(&self) -> ParamStore {
        self.params.filter_prefix("dec.")
    }

    pub fn mlp_param_count(&self) -> usize {
        self.params.filter_prefix("mlp.").num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_validates() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        let mut bad = ModelConfig::default();
        bad.grid_res = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_scale_shape_trace_matches_architecture() {
        let mut expect: Vec<(String, Vec<usize>)> = vec![("enc.input".into(), vec![9, 512, 256])];
        let enc = [(32, 256, 128), (64, 128, 64), (128, 64, 32), (128, 32, 16), (256, 16, 8), (256, 8, 4), (256, 4, 2)];
        for (i, (c, h, w)) in enc.into_iter().enumerate() {
            expect.push((format!("enc.conv{i}"), vec![c, h, w]));
        }
        expect.push(("enc.flatten".into(), vec![256 * 4 * 2]));
        expect.push(("enc.fc".into(), vec![512]));
        expect.push(("enc.mu".into(), vec![256]));
        expect.push(("enc.logstd".into(), vec![256]));
        for (branch, n_in, n_out) in [("opacity", 256, 1), ("color", 256 + 3, 3)] {
            expect.push((format!("dec.{branch}.input"), vec![n_in]));
            expect.push((format!("dec.{branch}.fc"), vec![1024]));
            expect.push((format!("dec.{branch}.reshape"), vec![1024, 1, 1, 1]));
            for (stack, last) in [("value", n_out), ("feat", 32)] {
                for (i, c) in [512, 512, 256, 256, 128, last].into_iter().enumerate() {
                    let d = 2 << i;
                    expect.push((format!("dec.{branch}.{stack}{i}"), vec![c, d, d, d]));
                }
            }
        }
        expect.push(("kps.input".into(), vec![2, 1]));
        for (i, c) in [64, 128, 256, 512, 1024].into_iter().enumerate() {
            expect.push((format!("kps.point{i}"), vec![c, 1]));
        }
        expect.push(("kps.maxpool".into(), vec![1024]));
        expect.push(("kps.fc0".into(), vec![512]));
        expect.push(("kps.fc1".into(), vec![512]));
        expect.push(("kps.out".into(), vec![256]));

        let trace: Vec<(String, Vec<usize>)> =
            ModelConfig::full_scale().shape_trace().into_iter().map(|l| (l.name, l.output)).collect();
        assert_eq!(trace, expect);
    }

    #[test]
    fn field_channel_counts() {
        assert_eq!(ModelConfig::full_scale().field_channels(), 68);
        assert_eq!(ModelConfig::default().field_channels(), 20);
    }

    #[test]
    fn global_variant_param_count_matches_local() {
        let local = Model::init(ModelConfig::default(), 1).unwrap();
        let global = Model::init(
            ModelConfig {
                conditioning: Conditioning::GlobalCode,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let (a, b) = (local.mlp_param_count() as f64, global.mlp_param_count() as f64);
        assert!((a - b).abs() / a < 0.10, "{a} vs {b}");
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Model::init(ModelConfig::default(), 3).unwrap();
        let b = Model::init(ModelConfig::default(), 3).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let w = a.params.get("mlp.trunk1.w").unwrap();
        let bound = 1.0 / 64f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}
