use std::f64::consts::TAU;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{accumulate, composite_background, stratified_depths, Camera, SceneBounds, Vec3};
use crate::rng::{stream, Stream};

/// A Gaussian density blob moving on a sinusoidal path.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    pub amplitude: Vec3,
    pub phase: Vec3,
    /// The Gaussian's standard deviation is `radius / 2`.
    pub radius: f64,
    pub peak_density: f64,
    pub color: [f64; 3],
    pub color_amplitude: f64,
    pub color_phase: f64,
}

impl Blob {
    pub fn center_at(&self, t: f64) -> Vec3 {
        std::array::from_fn(|k| self.center[k] + self.amplitude[k] * (TAU * t + self.phase[k]).sin())
    }

    pub fn color_at(&self, t: f64) -> [f64; 3] {
        let shift = self.color_amplitude * (TAU * t + self.color_phase).sin();
        std::array::from_fn(|k| (self.color[k] + shift).clamp(0.0, 1.0))
    }
}

/// Analytic dynamic scene: a sum of moving Gaussian blobs in a cube.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub blobs: Vec<Blob>,
    pub bounds: SceneBounds,
    pub background: [f64; 3],
}

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.3, 0.2],
    [0.2, 0.7, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.2],
    [0.7, 0.3, 0.8],
    [0.2, 0.8, 0.8],
];

impl SyntheticScene {
    pub fn empty(background: [f64; 3]) -> Self {
        SyntheticScene {
            blobs: Vec::new(),
            bounds: SceneBounds::default(),
            background,
        }
    }

    /// `n_blobs` blobs with seeded paths, sizes and colors. Centers stay
    /// within 0.14 m of the origin at all times.
    pub fn random(n_blobs: usize, seed: u64, background: [f64; 3]) -> Self {
        let mut rng = stream(seed, Stream::Scene, 0);
        let offset = rng.random_range(0..PALETTE.len());
        let blobs = (0..n_blobs)
            .map(|b| {
                let center = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
                let amplitude = std::array::from_fn(|_| rng.random_range(0.02..0.06));
                let phase = std::array::from_fn(|_| rng.random_range(0.0..TAU));
                Blob {
                    center,
                    amplitude,
                    phase,
                    radius: rng.random_range(0.08..0.11),
                    peak_density: rng.random_range(30.0..50.0),
                    color: PALETTE[(offset + b) % PALETTE.len()],
                    color_amplitude: 0.1,
                    color_phase: rng.random_range(0.0..TAU),
                }
            })
            .collect();
        SyntheticScene {
            blobs,
            bounds: SceneBounds::default(),
            background,
        }
    }

    /// Density and color at `p`, time `t`.
    pub fn density_color(&self, p: Vec3, t: f64) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut color = [0.0; 3];
        let mut plain = [0.0; 3];
        for blob in &self.blobs {
            let c = blob.center_at(t);
            let d2: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
            let s = blob.radius / 2.0;
            let density = blob.peak_density * (-d2 / (2.0 * s * s)).exp();
            let col = blob.color_at(t);
            sigma += density;
            for k in 0..3 {
                color[k] += density * col[k];
                plain[k] += col[k];
            }
        }
        if self.blobs.is_empty() {
            return (0.0, [0.0; 3]);
        }
        if sigma < 1e-12 {
            let n = self.blobs.len() as f64;
            return (sigma, plain.map(|v| v / n));
        }
        (sigma, color.map(|v| v / sigma))
    }

    /// Ground-truth pixel by a midpoint march with `n_samples` samples.
    pub fn render_pixel(&self, cam: &Camera, x: usize, y: usize, t: f64, n_samples: usize) -> Result<[f64; 3]> {
        let Some(ray) = cam.generate_ray(x, y, &self.bounds)? else {
            return Ok(self.background);
        };
        let samples = stratified_depths::<rand_chacha::ChaCha8Rng>(ray.d_min, ray.d_max, n_samples, None)?;
        let (sigma, colors): (Vec<f64>, Vec<[f64; 3]>) =
            samples.depths.iter().map(|&d| self.density_color(ray.at(d), t)).unzip();
        let m = accumulate(&sigma, &colors, &samples)?;
        Ok(composite_background(m.color, m.alpha, self.background))
    }

    /// Ground-truth image of the scene at time `t`.
    pub fn oracle_render(&self, cam: &Camera, t: f64, n_samples: usize) -> Result<Image> {
        if n_samples < 64 {
            return Err(Error::invalid("oracle_render", format!("need at least 64 samples, got {n_samples}")));
        }
        let rows: Vec<Vec<f64>> = (0..cam.height)
            .into_par_iter()
            .map(|y| -> Result<Vec<f64>> {
                let mut row = Vec::with_capacity(cam.width * 3);
                for x in 0..cam.width {
                    row.extend(self.render_pixel(cam, x, y, t, n_samples)?);
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Image::new(cam.width, cam.height, rows.concat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(peak: f64, color: [f64; 3], center: Vec3) -> Blob {
        Blob {
            center,
            amplitude: [0.0; 3],
            phase: [0.0; 3],
            radius: 0.1,
            peak_density: peak,
            color,
            color_amplitude: 0.0,
            color_phase: 0.0,
        }
    }

    #[test]
    fn density_examples() {
        let mut scene = SyntheticScene::empty([0.0; 3]);
        scene.blobs.push(single(40.0, [0.9, 0.2, 0.1], [0.05, 0.0, -0.02]));
        let (s, c) = scene.density_color([0.05, 0.0, -0.02], 0.3);
        assert_eq!(s, 40.0);
        assert_eq!(c, [0.9, 0.2, 0.1]);
        let (s, _) = scene.density_color([2.0, 2.0, 2.0], 0.0);
        assert!(s < 1e-6 * 40.0);

        let mut pair = SyntheticScene::empty([0.0; 3]);
        pair.blobs.push(single(10.0, [1.0, 0.0, 0.0], [-0.05, 0.0, 0.0]));
        pair.blobs.push(single(10.0, [0.0, 0.0, 1.0], [0.05, 0.0, 0.0]));
        let (_, c) = pair.density_color([0.0; 3], 0.0);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_scene_stays_in_bounds() {
        let scene = SyntheticScene::random(5, 17, [0.1; 3]);
        for b in &scene.blobs {
            for i in 0..=100 {
                let c = b.center_at(i as f64 / 100.0);
                assert!(c.iter().all(|v| v.abs() <= 0.14));
                assert!(scene.bounds.contains(c));
            }
        }
        assert_eq!(scene, SyntheticScene::random(5, 17, [0.1; 3]));
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = SyntheticScene::empty([0.3, 0.2, 0.1]);
        let cam = Camera::look_at([0.0, 0.0, 1.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 8, 8).unwrap();
        let img = scene.oracle_render(&cam, 0.0, 64).unwrap();
        assert_eq!(img, Image::filled(8, 8, [0.3, 0.2, 0.1]));
        assert!(scene.oracle_render(&cam, 0.0, 32).is_err());
    }

    #[test]
    fn centered_blob_is_radially_symmetric() {
        let mut scene = SyntheticScene::empty([0.0; 3]);
        scene.blobs.push(single(60.0, [0.8, 0.6, 0.4], [0.0; 3]));
        let cam = Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, -1.0, 0.0], 40.0, 16, 16).unwrap();
        let img = scene.oracle_render(&cam, 0.0, 256).unwrap();
        // pixel centers at equal distance from the principal point (8, 8)
        for y in 0..16 {
            for x in 0..16 {
                let (mx, my) = (15 - x, 15 - y);
                for (a, b) in [(img.pixel(x, y), img.pixel(mx, my)), (img.pixel(x, y), img.pixel(y, x))] {
                    for k in 0..3 {
                        assert!((a[k] - b[k]).abs() < 1.0 / 255.0);
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_self_converges() {
        let cfg = crate::data::DatasetConfig::default();
        let scene = cfg.scene();
        let (cams, _, _) = crate::data::place_cameras(&cfg).unwrap();
        let max_diff = |a: &Image, b: &Image| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        for (cam, f) in [(&cams[0], 0), (&cams[7], 5)] {
            let t = cfg.time(f);
            let r256 = scene.oracle_render(cam, t, 256).unwrap();
            let r512 = scene.oracle_render(cam, t, 512).unwrap();
            let r1024 = scene.oracle_render(cam, t, 1024).unwrap();
            let (d1, d2) = (max_diff(&r256, &r512), max_diff(&r512, &r1024));
            eprintln!("{d1:e} {d2:e} ratio {}", d1 / d2);
            assert!(d2 < 0.5 / 255.0);
            let ratio = d1 / d2;
            assert!((2.0 / 3.0..=6.0).contains(&ratio), "ratio {ratio}");
        }
    }
}
