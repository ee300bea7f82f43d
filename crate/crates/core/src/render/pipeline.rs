use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::march::{march_weights, over_background, stratified_depths, weighted_colors, DepthSamples};
use super::{Ray, RenderSettings, SceneBounds, Vec3};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{global_code_mlp, positional_encoding, scene_mlp, Conditioning, ModelConfig, FEATURE_OFFSET};
use crate::params::ParamVars;
use crate::sampling::{hierarchical_sampling, simple_sampling, FineSamplingRequest, SamplingMode};
use crate::tensor::Tensor;

/// Per-view inputs to the marcher, all on one tape.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars<'t> {
    /// Decoded field `[F×D×D×D]`.
    pub field: Var<'t>,
    /// Global code `[Z]`, read only by the global-code MLP.
    pub z: Var<'t>,
    /// Unit view vector fed to the scene MLP.
    pub view: Vec3,
}

/// Counters collected while marching a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MarchStats {
    pub rays: usize,
    pub hit_rays: usize,
    /// Scene-MLP point evaluations.
    pub mlp_evals: usize,
    /// Points at which the local-code channels were read.
    pub feature_samples: usize,
    /// Time spent choosing fine depths and evaluating the fine pass.
    pub fine_nanos: u128,
}

impl MarchStats {
    pub fn merge(&mut self, other: &MarchStats) {
        self.rays += other.rays;
        self.hit_rays += other.hit_rays;
        self.mlp_evals += other.mlp_evals;
        self.feature_samples += other.feature_samples;
        self.fine_nanos += other.fine_nanos;
    }
}

/// Composited colors `[R×3]` and accumulated opacities `[R]` of both passes,
/// in the caller's ray order.
pub struct RayOutputs<'t> {
    pub coarse: Var<'t>,
    pub fine: Var<'t>,
    pub coarse_alpha: Var<'t>,
    pub fine_alpha: Var<'t>,
    /// Coarse expected depth; zero for rays that miss the volume.
    pub depth: Vec<f64>,
    pub stats: MarchStats,
}

struct PassOutput<'t> {
    color: Var<'t>,
    alpha: Var<'t>,
    weights: Tensor,
}

/// Sample points and quadrature intervals of a set of rays, all with the
/// same sample count.
fn layout(bounds: &SceneBounds, rays: &[Ray], samples: &[DepthSamples]) -> Result<(Tensor, Tensor)> {
    let n = samples[0].len();
    let mut pts = Vec::with_capacity(rays.len() * n * 3);
    let mut deltas = Vec::with_capacity(rays.len() * n);
    for (ray, s) in rays.iter().zip(samples) {
        if s.len() != n {
            return Err(Error::shape("render_rays", "rays disagree on sample count"));
        }
        for &d in &s.depths {
            pts.extend(bounds.normalize(ray.at(d)));
        }
        deltas.extend_from_slice(&s.deltas);
    }
    Ok((Tensor::new([rays.len() * n, 3], pts)?, Tensor::new([rays.len(), n], deltas)?))
}

fn march<'t>(sigma: Var<'t>, colors: Var<'t>, deltas: &Tensor, background: &Tensor) -> Result<PassOutput<'t>> {
    let w = march_weights(sigma, deltas)?;
    let alpha = w.sum_axes(&[1])?;
    let color = over_background(weighted_colors(w, colors)?, alpha, background)?;
    Ok(PassOutput {
        color,
        alpha,
        weights: w.value().as_ref().clone(),
    })
}

/// Rows of `hits` for hit rays and `miss_color`/`miss_alpha` constants for
/// the rest, in original ray order.
fn scatter<'t>(hits: Option<Var<'t>>, miss_row: &[f64], hit_mask: &[bool], tape: &'t crate::autodiff::Tape) -> Result<Var<'t>> {
    let width = miss_row.len();
    let n_hit = hit_mask.iter().filter(|&&h| h).count();
    let n_miss = hit_mask.len() - n_hit;
    let misses = (n_miss > 0).then(|| {
        let data = (0..n_miss).flat_map(|_| miss_row.iter().copied()).collect();
        Tensor::new([n_miss, width], data).map(|t| tape.constant(t))
    });
    let stacked = match (hits, misses) {
        (Some(h), None) => return Ok(h),
        (None, Some(m)) => return m,
        (Some(h), Some(m)) => Var::concat(&[h, m?], 0)?,
        (None, None) => return Err(Error::invalid("render_rays", "empty ray batch")),
    };
    let (mut next_hit, mut next_miss) = (0, n_hit);
    let order: Vec<usize> = hit_mask
        .iter()
        .map(|&h| {
            let slot = if h { &mut next_hit } else { &mut next_miss };
            *slot += 1;
            *slot - 1
        })
        .collect();
    stacked.gather_rows(&order)
}

/// March a batch of rays through one view's field: the coarse pass reads
/// color and opacity straight from the grid; the fine pass evaluates the
/// scene MLP at depths chosen by `settings.mode`. `None` rays miss the
/// volume and see only the background. With `rng` the depths are jittered
/// (training); without it every depth is deterministic.
pub fn render_rays<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    bounds: &SceneBounds,
    settings: &RenderSettings,
    frame: &FrameVars<'t>,
    rays: &[Option<Ray>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RayOutputs<'t>> {
    settings.validate()?;
    let tape = frame.field.tape();
    let hit_mask: Vec<bool> = rays.iter().map(Option::is_some).collect();
    let hit: Vec<Ray> = rays.iter().flatten().copied().collect();
    let mut stats = MarchStats {
        rays: rays.len(),
        hit_rays: hit.len(),
        ..MarchStats::default()
    };
    let bg_row = settings.background;
    let mut depth = vec![0.0; rays.len()];

    let (coarse, fine) = if hit.is_empty() {
        (None, None)
    } else {
        let h = hit.len();
        let background = Tensor::new([h, 3], (0..h).flat_map(|_| bg_row).collect())?;

        let coarse_samples = hit
            .iter()
            .map(|r| stratified_depths(r.d_min, r.d_max, settings.n_coarse, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let (pts, deltas) = layout(bounds, &hit, &coarse_samples)?;
        let grid = frame.field.narrow(0, 0, FEATURE_OFFSET)?;
        let vals = grid.grid_sample_trilinear(tape.constant(pts))?;
        let sigma = vals.narrow(1, 3, 1)?.exp().reshape(&[h, settings.n_coarse])?;
        let coarse = march(sigma, vals.narrow(1, 0, 3)?, &deltas, &background)?;

        let coarse_w = coarse.weights.data();
        let mut slot = 0;
        for (i, &is_hit) in hit_mask.iter().enumerate() {
            if is_hit {
                let (r, s) = (&hit[slot], &coarse_samples[slot]);
                let w = &coarse_w[slot * settings.n_coarse..(slot + 1) * settings.n_coarse];
                depth[i] = super::expected_depth(w, &s.depths, r.d_min, r.d_max);
                slot += 1;
            }
        }

        let fine = if settings.mode == SamplingMode::CoarseOnly {
            None
        } else {
            let start = Instant::now();
            let fine_samples = hit
                .iter()
                .zip(&coarse_samples)
                .enumerate()
                .map(|(i, (r, s))| {
                    let req = FineSamplingRequest {
                        d_min: r.d_min,
                        d_max: r.d_max,
                        coarse: s,
                        coarse_weights: &coarse_w[i * settings.n_coarse..(i + 1) * settings.n_coarse],
                        n_fine: settings.n_fine,
                        k_range_divisor: settings.k_range_divisor,
                    };
                    match settings.mode {
                        SamplingMode::Hierarchical => hierarchical_sampling(&req, rng.as_deref_mut()),
                        _ => simple_sampling(&req, rng.as_deref_mut()),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let per_ray = fine_samples[0].len();
            let (pts, deltas) = layout(bounds, &hit, &fine_samples)?;
            let n = pts.shape()[0];
            let pos_enc = tape.constant(positional_encoding(&pts, cfg.pos_freqs)?);
            let view_row = positional_encoding(&Tensor::new([1, 3], frame.view.to_vec())?, cfg.view_freqs)?;
            let view_enc = tape.constant(Tensor::new([n, view_row.numel()], view_row.data().repeat(n))?);
            let out = match cfg.conditioning {
                Conditioning::LocalCodes => {
                    let codes = frame.field.narrow(0, FEATURE_OFFSET, 2 * cfg.f_loc)?;
                    let feats = codes.grid_sample_trilinear(tape.constant(pts))?;
                    stats.feature_samples += n;
                    let f = feats.narrow(1, 0, cfg.f_loc)?;
                    let f_view = feats.narrow(1, cfg.f_loc, cfg.f_loc)?;
                    scene_mlp(pv, cfg, pos_enc, view_enc, f, f_view)?
                }
                Conditioning::GlobalCode => global_code_mlp(pv, cfg, pos_enc, view_enc, frame.z)?,
            };
            stats.mlp_evals += n;
            let sigma = out.raw_sigma.exp().reshape(&[h, per_ray])?;
            let fine = march(sigma, out.color, &deltas, &background)?;
            stats.fine_nanos += start.elapsed().as_nanos();
            Some(fine)
        };
        (Some(coarse), fine)
    };

    let coarse_color = scatter(coarse.as_ref().map(|c| c.color), &bg_row, &hit_mask, tape)?;
    let coarse_alpha = scatter(
        coarse.as_ref().map(|c| c.alpha.reshape(&[c.alpha.numel(), 1])).transpose()?,
        &[0.0],
        &hit_mask,
        tape,
    )?
    .reshape(&[rays.len()])?;
    let (fine_color, fine_alpha) = match &fine {
        Some(f) => (
            scatter(Some(f.color), &bg_row, &hit_mask, tape)?,
            scatter(Some(f.alpha.reshape(&[f.alpha.numel(), 1])?), &[0.0], &hit_mask, tape)?.reshape(&[rays.len()])?,
        ),
        None if settings.mode == SamplingMode::CoarseOnly => (coarse_color, coarse_alpha),
        None => (
            scatter(None, &bg_row, &hit_mask, tape)?,
            scatter(None, &[0.0], &hit_mask, tape)?.reshape(&[rays.len()])?,
        ),
    };
    Ok(RayOutputs {
        coarse: coarse_color,
        fine: fine_color,
        coarse_alpha,
        fine_alpha,
        depth,
        stats,
    })
}
