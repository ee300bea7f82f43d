//! Quadrature along a ray: depth sampling, transmittance-weighted
//! accumulation and background compositing, in plain and taped form.

use rand::Rng;

use crate::autodiff::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Accumulated opacity below which expected depth falls back to the midpoint.
pub const EMPTY_ALPHA: f64 = 1e-6;

/// Ascending depths with their quadrature intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl DepthSamples {
    /// Deltas from successive differences, closing the last interval at `end`.
    pub fn closed_at(depths: Vec<f64>, end: f64) -> DepthSamples {
        let n = depths.len();
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { depths[i + 1] } else { end };
            deltas.push(next - depths[i]);
        }
        DepthSamples { depths, deltas }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// `n` stratified depths in `[d_min, d_max]`: one uniform draw per equal bin,
/// or the bin midpoints when `rng` is `None`.
pub fn stratified_depths<R: Rng>(d_min: f64, d_max: f64, n: usize, rng: Option<&mut R>) -> Result<DepthSamples> {
    if n < 2 {
        return Err(Error::invalid("stratified_depths", format!("need at least 2 samples, got {n}")));
    }
    if !(d_min < d_max) {
        return Err(Error::invalid("stratified_depths", format!("empty interval [{d_min}, {d_max}]")));
    }
    let width = (d_max - d_min) / n as f64;
    let depths = match rng {
        None => (0..n).map(|i| d_min + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n)
            .map(|i| d_min + (i as f64 + rng.random::<f64>()) * width)
            .collect(),
    };
    Ok(DepthSamples::closed_at(depths, d_max))
}

/// Outcome of marching one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchResult {
    /// Accumulated color `I'` before background.
    pub color: [f64; 3],
    pub alpha: f64,
    /// `w_i = T_i·α_i`.
    pub weights: Vec<f64>,
}

/// Per-sample weights `T_i·α_i` with `T_i = exp(−Σ_{j<i} σ_j δ_j)` and
/// `α_i = 1 − exp(−σ_i δ_i)`.
pub fn sample_weights(sigma: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut optical = 0.0f64;
    sigma
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let t = (-optical).exp();
            let tau = s * d;
            optical += tau;
            t * -(-tau).exp_m1()
        })
        .collect()
}

pub fn accumulate(sigma: &[f64], colors: &[[f64; 3]], samples: &DepthSamples) -> Result<MarchResult> {
    if sigma.len() != samples.len() || colors.len() != samples.len() {
        return Err(Error::shape(
            "accumulate",
            format!("{} densities, {} colors, {} depths", sigma.len(), colors.len(), samples.len()),
        ));
    }
    let weights = sample_weights(sigma, &samples.deltas);
    let mut color = [0.0; 3];
    for (w, c) in weights.iter().zip(colors) {
        for k in 0..3 {
            color[k] += w * c[k];
        }
    }
    // the sum can overshoot 1 by an ulp when the ray saturates
    let alpha = weights.iter().sum::<f64>().min(1.0);
    Ok(MarchResult { color, alpha, weights })
}

/// `I = I' + (1 − A)·I_bg`.
pub fn composite_background(color: [f64; 3], alpha: f64, background: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| color[k] + (1.0 - alpha) * background[k])
}

/// Weighted mean depth `Σ w_i d_i / A`, or the interval midpoint when the
/// ray is (nearly) empty.
pub fn expected_depth(weights: &[f64], depths: &[f64], d_min: f64, d_max: f64) -> f64 {
    let alpha: f64 = weights.iter().sum();
    if alpha < EMPTY_ALPHA {
        return 0.5 * (d_min + d_max);
    }
    let d = weights.iter().zip(depths).map(|(w, d)| w * d).sum::<f64>() / alpha;
    d.clamp(d_min, d_max)
}

/// Taped [`sample_weights`] over a batch: `sigma` `[R×S]` and constant
/// `deltas` `[R×S]` give weights `[R×S]`.
pub fn march_weights<'t>(sigma: Var<'t>, deltas: &Tensor) -> Result<Var<'t>> {
    let s = sigma.value();
    let &[rays, n] = s.shape() else {
        return Err(Error::shape("march_weights", format!("sigma {:?}", s.shape())));
    };
    if deltas.shape() != s.shape() {
        return Err(Error::shape("march_weights", format!("sigma {:?} vs deltas {:?}", s.shape(), deltas.shape())));
    }
    let mut w = Vec::with_capacity(rays * n);
    for (sr, dr) in s.data().chunks_exact(n).zip(deltas.data().chunks_exact(n)) {
        w.extend(sample_weights(sr, dr));
    }
    let value = Tensor::new([rays, n], w)?;
    let deltas = deltas.data().to_vec();
    Ok(sigma.tape().custom(
        value,
        &[sigma],
        Box::new(move |ctx: &BackwardCtx| {
            // dL/dτ_k = g_k·T_{k+1} − Σ_{i>k} g_i·w_i, with τ = σδ
            let sig = ctx.inputs[0].data();
            let w = ctx.output.data();
            let mut out = vec![0.0; rays * n];
            for r in 0..rays {
                let row = r * n..(r + 1) * n;
                let (g, w, s, d) = (&ctx.grad[row.clone()], &w[row.clone()], &sig[row.clone()], &deltas[row.clone()]);
                let mut optical = 0.0f64;
                let mut t_next = Vec::with_capacity(n);
                for k in 0..n {
                    optical += s[k] * d[k];
                    t_next.push((-optical).exp());
                }
                let mut tail = 0.0;
                for k in (0..n).rev() {
                    out[r * n + k] = d[k] * (g[k] * t_next[k] - tail);
                    tail += g[k] * w[k];
                }
            }
            vec![Some(out)]
        }),
    ))
}

/// `I'_r = Σ_s w_rs·c_rs` from weights `[R×S]` and colors `[R·S×3]`, giving `[R×3]`.
pub fn weighted_colors<'t>(weights: Var<'t>, colors: Var<'t>) -> Result<Var<'t>> {
    let (w, c) = (weights.value(), colors.value());
    let &[rays, n] = w.shape() else {
        return Err(Error::shape("weighted_colors", format!("weights {:?}", w.shape())));
    };
    if c.shape() != [rays * n, 3] {
        return Err(Error::shape("weighted_colors", format!("weights {:?}, colors {:?}", w.shape(), c.shape())));
    }
    let mut out = vec![0.0; rays * 3];
    for (i, (&wi, ci)) in w.data().iter().zip(c.data().chunks_exact(3)).enumerate() {
        let r = i / n;
        for k in 0..3 {
            out[r * 3 + k] += wi * ci[k];
        }
    }
    let value = Tensor::new([rays, 3], out)?;
    Ok(weights.tape().custom(
        value,
        &[weights, colors],
        Box::new(move |ctx: &BackwardCtx| {
            let (w, c, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let dw = ctx.needs[0].then(|| {
                (0..rays * n)
                    .map(|i| {
                        let r = i / n;
                        (0..3).map(|k| g[r * 3 + k] * c[i * 3 + k]).sum()
                    })
                    .collect()
            });
            let dc = ctx.needs[1].then(|| {
                let mut dc = vec![0.0; rays * n * 3];
                for i in 0..rays * n {
                    let r = i / n;
                    for k in 0..3 {
                        dc[i * 3 + k] = g[r * 3 + k] * w[i];
                    }
                }
                dc
            });
            vec![dw, dc]
        }),
    ))
}

/// Taped [`composite_background`]: `color` `[R×3]`, `alpha` `[R]`, constant
/// per-ray `background` `[R×3]`.
pub fn over_background<'t>(color: Var<'t>, alpha: Var<'t>, background: &Tensor) -> Result<Var<'t>> {
    let (c, a) = (color.value(), alpha.value());
    let rays = a.numel();
    if c.shape() != [rays, 3] || a.shape() != [rays] || background.shape() != [rays, 3] {
        return Err(Error::shape(
            "over_background",
            format!("color {:?}, alpha {:?}, background {:?}", c.shape(), a.shape(), background.shape()),
        ));
    }
    let bg = background.data().to_vec();
    let out = (0..rays * 3)
        .map(|i| c.data()[i] + (1.0 - a.data()[i / 3]) * bg[i])
        .collect();
    let value = Tensor::new([rays, 3], out)?;
    Ok(color.tape().custom(
        value,
        &[color, alpha],
        Box::new(move |ctx: &BackwardCtx| {
            let g = ctx.grad;
            let dc = ctx.needs[0].then(|| g.to_vec());
            let da = ctx.needs[1].then(|| {
                (0..rays)
                    .map(|r| -(0..3).map(|k| g[r * 3 + k] * bg[r * 3 + k]).sum::<f64>())
                    .collect()
            });
            vec![dc, da]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn midpoint_depths() {
        let s = stratified_depths::<ChaCha8Rng>(0.0, 1.0, 4, None).unwrap();
        assert_eq!(s.depths, vec![0.125, 0.375, 0.625, 0.875]);
        let total: f64 = s.deltas.iter().sum();
        assert!((total - 0.875).abs() < 1e-12);
        assert!(stratified_depths::<ChaCha8Rng>(0.0, 1.0, 1, None).is_err());
    }

    #[test]
    fn terminal_delta_convention_sums_to_span() {
        // deltas measured from the first sample plus the offset to d_min cover the interval
        let (lo, hi) = (0.3, 1.7);
        let s = stratified_depths::<ChaCha8Rng>(lo, hi, 16, None).unwrap();
        let total: f64 = s.deltas.iter().sum::<f64>() + (s.depths[0] - lo);
        assert!((total - (hi - lo)).abs() < 1e-12);
        assert_eq!(*s.deltas.last().unwrap(), hi - s.depths[15]);
    }

    #[test]
    fn jittered_samples_stay_in_their_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = stratified_depths(0.2, 1.0, 8, Some(&mut rng)).unwrap();
            for (i, d) in s.depths.iter().enumerate() {
                let lo = 0.2 + 0.1 * i as f64;
                assert!(*d >= lo && *d <= lo + 0.1 + 1e-15);
            }
            assert!(s.deltas.iter().all(|&d| d > 0.0));
        }
    }

    fn flat(n: usize, delta: f64) -> DepthSamples {
        DepthSamples::closed_at((0..n).map(|i| i as f64 * delta).collect(), n as f64 * delta)
    }

    #[test]
    fn accumulate_examples() {
        let r = accumulate(&[0.0; 4], &[[0.5; 3]; 4], &flat(4, 0.1)).unwrap();
        assert_eq!(r.alpha, 0.0);
        assert_eq!(r.color, [0.0; 3]);

        let r = accumulate(&[1e6], &[[0.2, 0.4, 0.9]], &flat(1, 1.0)).unwrap();
        assert!((r.alpha - 1.0).abs() < 1e-6);
        assert!((r.color[2] - 0.9).abs() < 1e-6);

        let r = accumulate(&[LN2, LN2], &[[1.0; 3]; 2], &flat(2, 1.0)).unwrap();
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.weights[1] - 0.25).abs() < 1e-15);
        assert!((r.alpha - 0.75).abs() < 1e-15);
        assert!(accumulate(&[1.0], &[[0.0; 3]; 2], &flat(1, 1.0)).is_err());
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_background([0.3, 0.1, 0.0], 0.0, [1.0, 0.5, 0.2]), [1.3, 0.6, 0.2]);
        assert_eq!(composite_background([0.3, 0.1, 0.0], 1.0, [1.0, 0.5, 0.2]), [0.3, 0.1, 0.0]);
        assert_eq!(composite_background([0.2, 0.0, 0.0], 0.5, [1.0; 3]), [0.7, 0.5, 0.5]);
    }

    #[test]
    fn expected_depth_examples() {
        assert_eq!(expected_depth(&[1.0], &[0.3], 0.1, 1.0), 0.3);
        assert!((expected_depth(&[0.3, 0.3], &[0.2, 0.6], 0.1, 1.0) - 0.4).abs() < 1e-15);
        let d = expected_depth(&[0.0, 0.0], &[0.2, 0.6], 0.1, 1.0);
        assert_eq!(d, 0.55);
        assert!((0.1..=1.0).contains(&d));
    }

    #[test]
    fn taped_ops_match_plain_accumulation() {
        let sigma = [0.5, 3.0, 0.0, 12.0, 1.0, 0.2];
        let deltas = [0.1, 0.2, 0.1, 0.05, 0.3, 0.1];
        let cols: Vec<f64> = (0..18).map(|i| (i as f64 * 0.13).sin().abs()).collect();
        let tape = Tape::new();
        let s = tape.param(Tensor::new([2, 3], sigma.to_vec()).unwrap());
        let w = march_weights(s, &Tensor::new([2, 3], deltas.to_vec()).unwrap()).unwrap();
        let c = tape.param(Tensor::new([6, 3], cols.clone()).unwrap());
        let i = weighted_colors(w, c).unwrap();
        let a = w.sum_axes(&[1]).unwrap();
        let bg = Tensor::new([2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let out = over_background(i, a, &bg).unwrap();
        for r in 0..2 {
            let samples = DepthSamples {
                depths: vec![0.0; 3],
                deltas: deltas[r * 3..r * 3 + 3].to_vec(),
            };
            let colors: Vec<[f64; 3]> = (0..3).map(|k| std::array::from_fn(|j| cols[(r * 3 + k) * 3 + j])).collect();
            let m = accumulate(&sigma[r * 3..r * 3 + 3], &colors, &samples).unwrap();
            let expect = composite_background(m.color, m.alpha, [bg.data()[r * 3], bg.data()[r * 3 + 1], bg.data()[r * 3 + 2]]);
            for k in 0..3 {
                assert!((out.value().data()[r * 3 + k] - expect[k]).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn telescoping_and_monotone(
            sd in proptest::collection::vec((0.0..20.0f64, 0.001..0.2f64), 1..64)
        ) {
            let (sigma, deltas): (Vec<f64>, Vec<f64>) = sd.into_iter().unzip();
            let colors = vec![[0.5; 3]; sigma.len()];
            let r = accumulate(&sigma, &colors, &DepthSamples { depths: vec![0.0; sigma.len()], deltas: deltas.clone() }).unwrap();
            let (w, alpha) = (r.weights, r.alpha);
            let tau: f64 = sigma.iter().zip(&deltas).map(|(s, d)| s * d).sum();
            prop_assert!((alpha - (1.0 - (-tau).exp())).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&alpha));
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn transmittance_is_monotone(
            sd in proptest::collection::vec((0.0..20.0f64, 0.001..0.2f64), 1..64)
        ) {
            let (sigma, deltas): (Vec<f64>, Vec<f64>) = sd.into_iter().unzip();
            let w = sample_weights(&sigma, &deltas);
            let mut optical = 0.0f64;
            let mut prev = 1.0;
            for i in 0..sigma.len() {
                let t = (-optical).exp();
                prop_assert!(t <= prev && t >= 0.0);
                prop_assert!((w[i] - t * (1.0 - (-sigma[i] * deltas[i]).exp())).abs() < 1e-12);
                optical += sigma[i] * deltas[i];
                prev = t;
            }
        }

        #[test]
        fn composite_is_convex_and_linear(
            sdc in proptest::collection::vec((0.0..20.0f64, 0.001..0.2f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..64),
            bg in proptest::array::uniform3(0.0..1.0f64),
            s in -3.0..3.0f64,
        ) {
            let sigma: Vec<f64> = sdc.iter().map(|v| v.0).collect();
            let samples = DepthSamples { depths: vec![0.0; sigma.len()], deltas: sdc.iter().map(|v| v.1).collect() };
            let colors: Vec<[f64; 3]> = sdc.iter().map(|v| [v.2, v.3, v.4]).collect();
            let m = accumulate(&sigma, &colors, &samples).unwrap();
            let out = composite_background(m.color, m.alpha, bg);
            for k in 0..3 {
                let lo = colors.iter().map(|c| c[k]).fold(bg[k], f64::min);
                let hi = colors.iter().map(|c| c[k]).fold(bg[k], f64::max);
                prop_assert!(out[k] >= lo - 1e-12 && out[k] <= hi + 1e-12);
            }
            let scaled: Vec<[f64; 3]> = colors.iter().map(|c| c.map(|v| s * v)).collect();
            let ms = accumulate(&sigma, &scaled, &samples).unwrap();
            for k in 0..3 {
                prop_assert!((ms.color[k] - s * m.color[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn expected_depth_in_range(
            wd in proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..64),
            d_min in 0.0..1.0f64,
            span in 0.01..2.0f64,
        ) {
            let d_max = d_min + span;
            let weights: Vec<f64> = wd.iter().map(|v| v.0 / wd.len() as f64).collect();
            let depths: Vec<f64> = wd.iter().map(|v| d_min + v.1 * span).collect();
            let d = expected_depth(&weights, &depths, d_min, d_max);
            prop_assert!((d_min..=d_max).contains(&d));
        }

        #[test]
        fn split_composition(
            sd in proptest::collection::vec((0.0..20.0f64, 0.001..0.2f64), 2..64),
            cut in 1usize..63,
        ) {
            let (sigma, deltas): (Vec<f64>, Vec<f64>) = sd.into_iter().unzip();
            let cut = cut.min(sigma.len() - 1);
            let colors: Vec<[f64; 3]> = (0..sigma.len()).map(|i| [(i % 3) as f64 / 2.0, 0.5, 1.0]).collect();
            let whole = accumulate(&sigma, &colors, &DepthSamples { depths: vec![0.0; sigma.len()], deltas: deltas.clone() }).unwrap();
            let front = accumulate(&sigma[..cut], &colors[..cut], &DepthSamples { depths: vec![0.0; cut], deltas: deltas[..cut].to_vec() }).unwrap();
            let back = accumulate(&sigma[cut..], &colors[cut..], &DepthSamples { depths: vec![0.0; sigma.len() - cut], deltas: deltas[cut..].to_vec() }).unwrap();
            let t = 1.0 - front.alpha;
            prop_assert!((whole.alpha - (front.alpha + t * back.alpha)).abs() < 1e-10);
            for k in 0..3 {
                prop_assert!((whole.color[k] - (front.color[k] + t * back.color[k])).abs() < 1e-10);
            }
        }
    }
}
