use rayon::prelude::*;

use super::pipeline::{render_rays, FrameVars, MarchStats};
use super::{Camera, RenderSettings, SceneBounds, Vec3};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{volume_decoder, Model, VoxelField};
use crate::tensor::Tensor;

/// A field decoded for one (code, camera) pair, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame {
    pub field: VoxelField,
    pub z: Vec<f64>,
    pub view: Vec3,
}

/// Run the decoder for `z` as seen from `cam`.
pub fn decode_frame(model: &Model, z: &[f64], cam: &Camera, bounds: &SceneBounds) -> Result<DecodedFrame> {
    let tape = Tape::new();
    let pv = model.decoder_params().register_frozen(&tape);
    let view = cam.view_vector(bounds);
    let zv = tape.constant(Tensor::from_vec(z.to_vec()));
    let field = volume_decoder(&pv, &model.config, zv, tape.constant(Tensor::from_vec(view.to_vec())))?;
    Ok(DecodedFrame {
        field: VoxelField::new(field.value().as_ref().clone())?,
        z: z.to_vec(),
        view,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub coarse: Image,
    pub fine: Image,
    /// Fine-pass accumulated opacity per pixel.
    pub alpha: Vec<f64>,
    /// Coarse expected depth per pixel, zero where the ray misses the volume.
    pub depth: Vec<f64>,
    pub stats: MarchStats,
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

struct TileOut {
    coarse: Vec<f64>,
    fine: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    stats: MarchStats,
}

/// Render every pixel of `cam` in evaluation mode. Tiles are marched
/// independently (in parallel under rayon) on their own tapes; the result
/// does not depend on `tile` or on the thread count.
pub fn render_image(
    model: &Model,
    frame: &DecodedFrame,
    cam: &Camera,
    bounds: &SceneBounds,
    settings: &RenderSettings,
    tile: usize,
) -> Result<RenderedImage> {
    if tile == 0 {
        return Err(Error::invalid("render_image", "tile size must be positive"));
    }
    let (w, h) = (cam.width, cam.height);
    let mut tiles = Vec::new();
    for y0 in (0..h).step_by(tile) {
        for x0 in (0..w).step_by(tile) {
            tiles.push(Tile {
                x0,
                y0,
                x1: (x0 + tile).min(w),
                y1: (y0 + tile).min(h),
            });
        }
    }
    let mlp = model.params.filter_prefix("mlp.");
    let outs: Vec<TileOut> = tiles
        .par_iter()
        .map(|t| -> Result<TileOut> {
            let tape = Tape::new();
            let pv = mlp.register_frozen(&tape);
            let vars = FrameVars {
                field: tape.constant(frame.field.data.clone()),
                z: tape.constant(Tensor::from_vec(frame.z.clone())),
                view: frame.view,
            };
            let mut rays = Vec::with_capacity((t.x1 - t.x0) * (t.y1 - t.y0));
            for y in t.y0..t.y1 {
                for x in t.x0..t.x1 {
                    rays.push(cam.generate_ray(x, y, bounds)?);
                }
            }
            let out = render_rays(&pv, &model.config, bounds, settings, &vars, &rays, None)?;
            Ok(TileOut {
                coarse: out.coarse.value().data().to_vec(),
                fine: out.fine.value().data().to_vec(),
                alpha: out.fine_alpha.value().data().to_vec(),
                depth: out.depth,
                stats: out.stats,
            })
        })
        .collect::<Result<_>>()?;

    let mut coarse = vec![0.0; w * h * 3];
    let mut fine = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut stats = MarchStats::default();
    for (t, o) in tiles.iter().zip(outs) {
        let tw = t.x1 - t.x0;
        for y in t.y0..t.y1 {
            for x in t.x0..t.x1 {
                let (src, dst) = ((y - t.y0) * tw + (x - t.x0), y * w + x);
                coarse[dst * 3..dst * 3 + 3].copy_from_slice(&o.coarse[src * 3..src * 3 + 3]);
                fine[dst * 3..dst * 3 + 3].copy_from_slice(&o.fine[src * 3..src * 3 + 3]);
                alpha[dst] = o.alpha[src];
                depth[dst] = o.depth[src];
            }
        }
        stats.merge(&o.stats);
    }
    Ok(RenderedImage {
        coarse: Image::new(w, h, coarse)?,
        fine: Image::new(w, h, fine)?,
        alpha,
        depth,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, OPACITY_CHANNEL};
    use crate::sampling::SamplingMode;

    fn setup() -> (Model, Camera, SceneBounds) {
        let model = Model::init(ModelConfig::default(), 7).unwrap();
        let cam = Camera::look_at([0.3, -0.5, 0.81], [0.0; 3], [0.0, 0.0, 1.0], 9.0, 6, 5).unwrap();
        (model, cam, SceneBounds::default())
    }

    #[test]
    fn transparent_field_renders_background() {
        let (model, cam, bounds) = setup();
        let mut frame = decode_frame(&model, &[0.0; 32], &cam, &bounds).unwrap();
        let d = frame.field.grid_res();
        let vol = d * d * d;
        let mut data = frame.field.data.data().to_vec();
        data[OPACITY_CHANNEL * vol..(OPACITY_CHANNEL + 1) * vol].fill(-1e3);
        frame.field = VoxelField::new(Tensor::new(frame.field.data.shape().to_vec(), data).unwrap()).unwrap();
        // the MLP may still add density in the fine pass, so check the coarse pass here
        let settings = RenderSettings {
            mode: SamplingMode::CoarseOnly,
            ..RenderSettings::default()
        };
        let cam2 = Camera { width: 2, height: 2, ..cam.clone() };
        let img = render_image(&model, &frame, &cam2, &bounds, &settings, 4).unwrap();
        for v in img.coarse.data.iter().chain(&img.fine.data) {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn tiling_is_invisible() {
        let (model, cam, bounds) = setup();
        let frame = decode_frame(&model, &[0.2; 32], &cam, &bounds).unwrap();
        for mode in SamplingMode::ALL {
            let settings = RenderSettings::default().with_mode(mode);
            let whole = render_image(&model, &frame, &cam, &bounds, &settings, 64).unwrap();
            let tiled = render_image(&model, &frame, &cam, &bounds, &settings, 2).unwrap();
            assert_eq!(whole.coarse, tiled.coarse);
            assert_eq!(whole.fine, tiled.fine);
            assert_eq!(whole.alpha, tiled.alpha);
            assert_eq!(whole.depth, tiled.depth);
            if mode == SamplingMode::CoarseOnly {
                assert_eq!(whole.fine, whole.coarse);
            }
        }
    }

    #[test]
    fn eval_evaluation_counts() {
        let (model, cam, bounds) = setup();
        let frame = decode_frame(&model, &[0.0; 32], &cam, &bounds).unwrap();
        let s = RenderSettings::default();
        for mode in SamplingMode::ALL {
            let img = render_image(&model, &frame, &cam, &bounds, &s.with_mode(mode), 3).unwrap();
            let per_ray = mode.mlp_evals_per_ray(s.n_coarse, s.n_fine);
            assert_eq!(img.stats.mlp_evals, per_ray * img.stats.hit_rays);
        }
    }
}
