use super::{ModelConfig, ENCODER_VIEWS, LEAKY_SLOPE};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamVars;

/// Diagonal Gaussian over the global code. `sigma = exp(raw_logstd)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub raw_logstd: Vec<f64>,
}

impl LatentDistribution {
    pub fn sigma(&self) -> Vec<f64> {
        self.raw_logstd.iter().map(|r| r.exp()).collect()
    }
}

/// Encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars<'t> {
    pub mu: Var<'t>,
    pub raw_logstd: Var<'t>,
}

impl LatentVars<'_> {
    pub fn distribution(&self) -> LatentDistribution {
        LatentDistribution {
            mu: self.mu.value().data().to_vec(),
            raw_logstd: self.raw_logstd.value().data().to_vec(),
        }
    }
}

fn layer<'t>(pv: &ParamVars<'t>, name: &str) -> Result<(Var<'t>, Var<'t>)> {
    Ok((pv.get(&format!("{name}.w"))?, pv.get(&format!("{name}.b"))?))
}

/// Three views stacked on the channel axis, `[9×H×W]`, to the latent
/// distribution. Leaky ReLU follows every layer except the two heads.
pub fn image_encoder<'t>(pv: &ParamVars<'t>, cfg: &ModelConfig, views: Var<'t>) -> Result<LatentVars<'t>> {
    let expect = [3 * ENCODER_VIEWS, cfg.enc_height, cfg.enc_width];
    if views.shape() != expect {
        return Err(Error::invalid(
            "image_encoder",
            format!("expected input {expect:?}, got {:?}", views.shape()),
        ));
    }
    let mut x = views;
    for i in 0..cfg.encoder_convs().len() {
        let (w, b) = layer(pv, &format!("enc.conv{i}"))?;
        x = x.conv2d_s2(w, b)?.leaky_relu(LEAKY_SLOPE);
    }
    let flat = x.numel();
    let (w, b) = layer(pv, "enc.fc")?;
    let h = x.reshape(&[flat])?.linear(w, b)?.leaky_relu(LEAKY_SLOPE);
    let (w, b) = layer(pv, "enc.mu")?;
    let mu = h.linear(w, b)?;
    let (w, b) = layer(pv, "enc.logstd")?;
    let raw_logstd = h.linear(w, b)?;
    Ok(LatentVars { mu, raw_logstd })
}

/// `z = mu + exp(raw_logstd) ⊙ noise`, differentiable in `mu` and `raw_logstd`.
pub fn reparameterize<'t>(latent: &LatentVars<'t>, noise: &[f64]) -> Result<Var<'t>> {
    let z_dim = latent.mu.numel();
    if noise.len() != z_dim {
        return Err(Error::shape(
            "reparameterize",
            format!("noise length {} for latent size {z_dim}", noise.len()),
        ));
    }
    let tape = latent.mu.tape();
    let eps = tape.constant(crate::tensor::Tensor::from_vec(noise.to_vec()));
    latent.mu.add(latent.raw_logstd.exp().mul(eps)?)
}

/// PointNet-style encoder from `[2×K]` keypoints to a global code `[Z]`:
/// shared per-point layers, max pool over points, then fully-connected
/// layers. ReLU after every layer but the last.
pub fn keypoint_encoder<'t>(pv: &ParamVars<'t>, cfg: &ModelConfig, points: Var<'t>) -> Result<Var<'t>> {
    let shape = points.shape();
    if shape.len() != 2 || shape[0] != 2 {
        return Err(Error::invalid("keypoint_encoder", format!("expected [2×K], got {shape:?}")));
    }
    // [K×2] so every point is a row of the shared layers.
    let mut x = points.transpose()?;
    for i in 0..cfg.kps_channels.len() {
        let (w, b) = layer(pv, &format!("kps.point{i}"))?;
        x = x.linear(w, b)?.relu();
    }
    let mut h = x.transpose()?.maxpool_over_points()?;
    for i in 0..cfg.kps_hidden.len() {
        let (w, b) = layer(pv, &format!("kps.fc{i}"))?;
        h = h.linear(w, b)?.relu();
    }
    let (w, b) = layer(pv, "kps.out")?;
    h.linear(w, b)
}
