//! Fine-pass depth selection: the narrow window around the coarse expected
//! depth (simple sampling) and inverse-CDF resampling of the coarse weights
//! (hierarchical sampling).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::render::{expected_depth, DepthSamples};

/// Added to every coarse weight before building the resampling PDF.
pub const WEIGHT_FLOOR: f64 = 1e-5;
/// Relative nudge that separates coincident depths.
pub const DEDUP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Simple,
    Hierarchical,
    CoarseOnly,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 3] = [SamplingMode::Simple, SamplingMode::Hierarchical, SamplingMode::CoarseOnly];

    /// Scene-MLP evaluations per ray in the fine pass.
    pub fn mlp_evals_per_ray(self, n_coarse: usize, n_fine: usize) -> usize {
        match self {
            SamplingMode::Simple => n_fine,
            SamplingMode::Hierarchical => n_coarse + n_fine,
            SamplingMode::CoarseOnly => 0,
        }
    }
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ss" => Ok(SamplingMode::Simple),
            "hs" => Ok(SamplingMode::Hierarchical),
            "coarse" => Ok(SamplingMode::CoarseOnly),
            _ => Err(Error::Config(format!("sampling mode must be ss|hs|coarse, got {s:?}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Simple => "ss",
            SamplingMode::Hierarchical => "hs",
            SamplingMode::CoarseOnly => "coarse",
        })
    }
}

/// Everything the fine sampler needs about one ray.
#[derive(Clone, Copy, Debug)]
pub struct FineSamplingRequest<'a> {
    pub d_min: f64,
    pub d_max: f64,
    pub coarse: &'a DepthSamples,
    pub coarse_weights: &'a [f64],
    pub n_fine: usize,
    pub k_range_divisor: usize,
}

impl FineSamplingRequest<'_> {
    fn validate(&self) -> Result<()> {
        if self.n_fine == 0 || self.k_range_divisor == 0 {
            return Err(Error::invalid("fine sampling", "n_fine and k_range_divisor must be positive"));
        }
        if self.coarse_weights.len() != self.coarse.len() || self.coarse.is_empty() {
            return Err(Error::invalid(
                "fine sampling",
                format!("{} weights for {} coarse depths", self.coarse_weights.len(), self.coarse.len()),
            ));
        }
        if !(self.d_min < self.d_max) {
            return Err(Error::invalid("fine sampling", format!("empty interval [{}, {}]", self.d_min, self.d_max)));
        }
        Ok(())
    }

    /// Coarse expected depth `d̃`.
    pub fn expected_depth(&self) -> f64 {
        expected_depth(self.coarse_weights, &self.coarse.depths, self.d_min, self.d_max)
    }

    /// `[max(d_min, d̃−Δ), min(d_max, d̃+Δ)]` with `Δ = (d_max − d_min)/k`.
    pub fn window(&self) -> (f64, f64) {
        sampling_window(self.expected_depth(), self.d_min, self.d_max, self.k_range_divisor)
    }
}

pub fn sampling_window(center: f64, d_min: f64, d_max: f64, k: usize) -> (f64, f64) {
    let half = (d_max - d_min) / k as f64;
    ((center - half).max(d_min), (center + half).min(d_max))
}

/// Sort, then push any non-increasing depth just past its predecessor.
fn strictly_ascending(mut depths: Vec<f64>, span: f64) -> Vec<f64> {
    depths.sort_by(f64::total_cmp);
    for i in 1..depths.len() {
        if depths[i] <= depths[i - 1] {
            depths[i] = depths[i - 1] + DEDUP_EPS * span;
        }
    }
    depths
}

/// Uniform draws in the window around the coarse expected depth, sorted.
/// Without `rng` the window is covered by bin midpoints instead. The last
/// interval closes at the window's far end.
pub fn simple_sampling<R: Rng>(req: &FineSamplingRequest, rng: Option<&mut R>) -> Result<DepthSamples> {
    req.validate()?;
    let (lo, hi) = req.window();
    let n = req.n_fine;
    let width = hi - lo;
    let depths: Vec<f64> = match rng {
        None => (0..n).map(|i| lo + (i as f64 + 0.5) / n as f64 * width).collect(),
        Some(rng) => (0..n).map(|_| lo + rng.random::<f64>() * width).collect(),
    };
    let depths = strictly_ascending(depths, req.d_max - req.d_min);
    Ok(DepthSamples::closed_at(depths, hi))
}

/// Bin edges around the coarse depths: `d_min`, the midpoints between
/// neighbours, then `d_max`. For midpoint-stratified depths these are
/// exactly the stratification bins.
fn bin_edges(depths: &[f64], d_min: f64, d_max: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(depths.len() + 1);
    edges.push(d_min);
    edges.extend(depths.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(d_max);
    edges
}

/// Draw `n_fine` depths from the piecewise-constant PDF of the floored coarse
/// weights, merged with the coarse depths. Without `rng` the quantiles are
/// evenly spaced.
pub fn hierarchical_sampling<R: Rng>(req: &FineSamplingRequest, rng: Option<&mut R>) -> Result<DepthSamples> {
    req.validate()?;
    let edges = bin_edges(&req.coarse.depths, req.d_min, req.d_max);
    let mass: Vec<f64> = req.coarse_weights.iter().map(|w| w.max(0.0) + WEIGHT_FLOOR).collect();
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(mass.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m / total;
        cdf.push(acc);
    }
    let n = req.n_fine;
    let quantiles: Vec<f64> = match rng {
        None => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        Some(rng) => (0..n).map(|_| rng.random::<f64>()).collect(),
    };
    let bins = mass.len();
    let mut depths = req.coarse.depths.clone();
    for u in quantiles {
        let u = u * acc;
        let b = cdf[1..].partition_point(|&c| c < u).min(bins - 1);
        let within = ((u - cdf[b]) / (cdf[b + 1] - cdf[b])).clamp(0.0, 1.0);
        depths.push(edges[b] + within * (edges[b + 1] - edges[b]));
    }
    let depths = strictly_ascending(depths, req.d_max - req.d_min);
    Ok(DepthSamples::closed_at(depths, req.d_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::stratified_depths;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(n: usize, hot: usize) -> Vec<f64> {
        (0..n).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn window_centered_and_clamped() {
        let coarse = stratified_depths::<ChaCha8Rng>(0.0, 1.0, 10, None).unwrap();
        // all weight on the 0.45 and 0.55 samples: d̃ = 0.5
        let mut w = vec![0.0; 10];
        w[4] = 0.4;
        w[5] = 0.4;
        let req = FineSamplingRequest {
            d_min: 0.0,
            d_max: 1.0,
            coarse: &coarse,
            coarse_weights: &w,
            n_fine: 64,
            k_range_divisor: 10,
        };
        let (lo, hi) = req.window();
        assert!((lo - 0.4).abs() < 1e-12 && (hi - 0.6).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = simple_sampling(&req, Some(&mut rng)).unwrap();
        assert!(s.depths.iter().all(|&d| (lo..=hi).contains(&d)));
        assert!(s.deltas.iter().all(|&d| d > 0.0));

        let w = one_hot(10, 0);
        let req = FineSamplingRequest { coarse_weights: &w, ..req };
        assert_eq!(req.window(), (0.0, 0.05 + 0.1));
        let s = simple_sampling(&req, Some(&mut rng)).unwrap();
        assert!(s.depths.iter().all(|&d| (0.0..=0.15).contains(&d)));
    }

    #[test]
    fn simple_sampling_mean_matches_center() {
        let coarse = stratified_depths::<ChaCha8Rng>(0.0, 1.0, 10, None).unwrap();
        let w = one_hot(10, 5);
        let req = FineSamplingRequest {
            d_min: 0.0,
            d_max: 1.0,
            coarse: &coarse,
            coarse_weights: &w,
            n_fine: 1,
            k_range_divisor: 10,
        };
        let center = req.expected_depth();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| simple_sampling(&req, Some(&mut rng)).unwrap().depths[0])
            .sum::<f64>()
            / n as f64;
        // uniform on a window of width 0.2
        let se = 0.2 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - center).abs() < 3.0 * se, "{mean} vs {center}");
    }

    #[test]
    fn eval_modes_are_deterministic() {
        let coarse = stratified_depths::<ChaCha8Rng>(0.5, 1.5, 8, None).unwrap();
        let w = [0.0, 0.1, 0.3, 0.2, 0.0, 0.0, 0.05, 0.0];
        let req = FineSamplingRequest {
            d_min: 0.5,
            d_max: 1.5,
            coarse: &coarse,
            coarse_weights: &w,
            n_fine: 4,
            k_range_divisor: 10,
        };
        let a = hierarchical_sampling::<ChaCha8Rng>(&req, None).unwrap();
        let b = hierarchical_sampling::<ChaCha8Rng>(&req, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.depths.windows(2).all(|p| p[0] < p[1]));
        assert!(a.depths.iter().all(|&d| (0.5..=1.5).contains(&d)));
        assert_eq!(simple_sampling::<ChaCha8Rng>(&req, None).unwrap().len(), 4);
    }

    #[test]
    fn duplicates_are_separated() {
        let d = strictly_ascending(vec![0.3, 0.1, 0.3, 0.3], 1.0);
        assert!(d.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(d[1], 0.3);
    }

    #[test]
    fn mode_names_and_counts() {
        for m in SamplingMode::ALL {
            assert_eq!(m.to_string().parse::<SamplingMode>().unwrap(), m);
        }
        assert!("fine".parse::<SamplingMode>().is_err());
        assert_eq!(SamplingMode::Simple.mlp_evals_per_ray(32, 8), 8);
        assert_eq!(SamplingMode::Hierarchical.mlp_evals_per_ray(32, 8), 40);
    }
}
