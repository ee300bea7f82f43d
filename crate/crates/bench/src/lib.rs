//! Shared fixtures for the benchmarks.

use crfd::model::{Model, ModelConfig};
use crfd::render::{decode_frame, Camera, DecodedFrame, SceneBounds};
use crfd::Tensor;

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let x = (i.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// An untrained default model decoded for one view, ready to render.
pub struct RenderFixture {
    pub model: Model,
    pub frame: DecodedFrame,
    pub camera: Camera,
    pub bounds: SceneBounds,
}

pub fn render_fixture(size: usize) -> RenderFixture {
    let model = Model::init(ModelConfig::default(), 1).expect("default model");
    let bounds = SceneBounds::default();
    let camera = Camera::look_at([0.0, -0.6, 0.8], [0.0; 3], [0.0, 0.0, 1.0], 1.1 * size as f64, size, size)
        .expect("camera");
    let z = vec![0.1; model.config.z_dim];
    let frame = decode_frame(&model, &z, &camera, &bounds).expect("decode");
    RenderFixture {
        model,
        frame,
        camera,
        bounds,
    }
}
