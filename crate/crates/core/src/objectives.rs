//! Training objective and image-quality metrics.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::LatentVars;
use crate::tensor::Tensor;

/// Opacities are clamped to `[BETA_EPS, 1 − BETA_EPS]` before the logs.
pub const BETA_EPS: f64 = 1e-5;
/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_f: 0.1,
            lambda_c: 0.1,
            lambda_kl: 0.001,
        }
    }
}

/// Scalar value of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_r_fine: f64,
    pub l_r_coarse: f64,
    pub l_beta_fine: f64,
    pub l_beta_coarse: f64,
    pub l_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum of the five terms, evaluated in the same order as
    /// [`total_loss`] builds it.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.l_r_fine
            + self.l_r_coarse
            + w.lambda_f * self.l_beta_fine
            + w.lambda_c * self.l_beta_coarse
            + w.lambda_kl * self.l_kl
    }
}

/// `Σ_r ‖pred_r − gt_r‖²` over `[R×3]` colors.
pub fn reconstruction_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape()),
        ));
    }
    let target = pred.tape().constant(gt.clone());
    Ok(pred.sub(target)?.square().sum())
}

/// `Σ_r log A_r + log(1 − A_r)` with `A` clamped to `[eps, 1 − eps]`.
pub fn beta_prior(alpha: Var<'_>, eps: f64) -> Result<Var<'_>> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::invalid("beta_prior", format!("clamp {eps} outside [0, 0.5)")));
    }
    let a = alpha.clamp(eps, 1.0 - eps);
    Ok(a.log()?.add(a.neg().add_scalar(1.0).log()?)?.sum())
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` with `σ = exp(raw)`.
pub fn kl_loss<'t>(latent: &LatentVars<'t>) -> Result<Var<'t>> {
    let two_raw = latent.raw_logstd.scale(2.0);
    let terms = latent.mu.square().add(two_raw.exp())?.sub(two_raw)?.add_scalar(-1.0);
    Ok(terms.sum().scale(0.5))
}

/// Rendered outputs of both passes for one ray batch.
#[derive(Clone, Copy, Debug)]
pub struct PassPredictions<'t> {
    pub coarse: Var<'t>,
    pub coarse_alpha: Var<'t>,
    pub fine: Var<'t>,
    pub fine_alpha: Var<'t>,
}

/// Assemble the five-term objective. `kl` is the (summed) KL term of the
/// frames in the batch.
pub fn total_loss<'t>(
    pred: &PassPredictions<'t>,
    gt: &Tensor,
    kl: Var<'t>,
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let l_r_fine = reconstruction_loss(pred.fine, gt)?;
    let l_r_coarse = reconstruction_loss(pred.coarse, gt)?;
    let l_beta_fine = beta_prior(pred.fine_alpha, BETA_EPS)?;
    let l_beta_coarse = beta_prior(pred.coarse_alpha, BETA_EPS)?;
    let total = l_r_fine
        .add(l_r_coarse)?
        .add(l_beta_fine.scale(w.lambda_f))?
        .add(l_beta_coarse.scale(w.lambda_c))?
        .add(kl.scale(w.lambda_kl))?;
    let item = |v: Var<'_>| v.value().item();
    let breakdown = LossBreakdown {
        l_r_fine: item(l_r_fine),
        l_r_coarse: item(l_r_coarse),
        l_beta_fine: item(l_beta_fine),
        l_beta_coarse: item(l_beta_coarse),
        l_kl: item(kl),
        total: item(total),
    };
    Ok((total, breakdown))
}

fn same_size(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Mean squared per-channel difference on the 0–255 scale.
pub fn mse_8bit(a: &Image, b: &Image) -> Result<f64> {
    same_size("mse_8bit", a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) * 255.0).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(255² / mse)`, capped for identical images.
pub fn psnr(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity on the 0–255 scale with an 11×11 Gaussian window
/// (σ = 1.5), averaged over every valid window position and channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size("ssim", a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 255.0f64).powi(2);
    let c2 = (SSIM_K2 * 255.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let plane = |img: &Image| -> Vec<f64> { img.data.iter().skip(ch).step_by(3).map(|v| v * 255.0).collect() };
        let (pa, pb) = (plane(a), plane(b));
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
