use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{image_encoder, keypoint_encoder, LatentDistribution, Model, ModelConfig, ENCODER_VIEWS};
use crate::render::{decode_frame, render_image, Camera, RenderSettings, RenderedImage, SceneBounds};
use crate::tensor::Tensor;

/// Encoder input for `frame`: the conditioning cameras' images resized to
/// the encoder resolution and stacked on the channel axis.
pub fn conditioning_views(dataset: &Dataset, cfg: &ModelConfig, frame: usize) -> Result<Tensor> {
    if frame >= dataset.n_frames() {
        return Err(Error::invalid(
            "conditioning_views",
            format!("frame {frame} of {}", dataset.n_frames()),
        ));
    }
    let mut data = Vec::with_capacity(3 * ENCODER_VIEWS * cfg.enc_height * cfg.enc_width);
    for &cam in &dataset.conditioning {
        data.extend(dataset.image(frame, cam).resized_planes(cfg.enc_width, cfg.enc_height));
    }
    Tensor::new([3 * ENCODER_VIEWS, cfg.enc_height, cfg.enc_width], data)
}

/// Latent distribution of one stacked view tensor.
pub fn encode_mean(model: &Model, views: &Tensor) -> Result<LatentDistribution> {
    let tape = Tape::new();
    let pv = model.encoder_params().register_frozen(&tape);
    Ok(image_encoder(&pv, &model.config, tape.constant(views.clone()))?.distribution())
}

/// Global code predicted from normalized 2-D keypoints.
pub fn encode_keypoints(model: &Model, keypoints: &[[f64; 2]]) -> Result<Vec<f64>> {
    if keypoints.is_empty() {
        return Err(Error::invalid("encode_keypoints", "no keypoints"));
    }
    let tape = Tape::new();
    let pv = model.params.filter_prefix("kps.").register_frozen(&tape);
    let pts = keypoint_tensor(keypoints)?;
    Ok(keypoint_encoder(&pv, &model.config, tape.constant(pts))?.value().data().to_vec())
}

/// Keypoints as the encoder's `[2×K]` input.
pub(crate) fn keypoint_tensor(keypoints: &[[f64; 2]]) -> Result<Tensor> {
    let data = keypoints.iter().map(|p| p[0]).chain(keypoints.iter().map(|p| p[1])).collect();
    Tensor::new([2, keypoints.len()], data)
}

/// Decode `z` for `cam` and render the full image.
pub fn render_code(
    model: &Model,
    z: &[f64],
    cam: &Camera,
    bounds: &SceneBounds,
    settings: &RenderSettings,
    tile: usize,
) -> Result<RenderedImage> {
    let frame = decode_frame(model, z, cam, bounds)?;
    render_image(model, &frame, cam, bounds, settings, tile)
}
