use std::f64::consts::PI;

use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::tensor::Tensor;

/// Per-point outputs of the scene MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpOutput<'t> {
    /// Rectified color, `[N×3]`.
    pub color: Var<'t>,
    /// Log density before exponentiation, `[N×1]`.
    pub raw_sigma: Var<'t>,
}

/// Frequency encoding of `[N×3]` coordinates: for each coordinate `p` the
/// block `sin(2^k π p), cos(2^k π p)` for `k = 0..freqs`, giving `[N×6·freqs]`.
pub fn positional_encoding(points: &Tensor, freqs: usize) -> Result<Tensor> {
    let &[n, 3] = points.shape() else {
        return Err(Error::shape("positional_encoding", format!("points {:?}", points.shape())));
    };
    let width = 6 * freqs;
    let mut out = Vec::with_capacity(n * width);
    for row in points.data().chunks_exact(3) {
        for &p in row {
            let mut scale = PI;
            for _ in 0..freqs {
                let (s, c) = (scale * p).sin_cos();
                out.push(s);
                out.push(c);
                scale *= 2.0;
            }
        }
    }
    Tensor::new([n, width], out)
}

fn dense<'t>(pv: &ParamVars<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.linear(pv.get(&format!("{name}.w"))?, pv.get(&format!("{name}.b"))?)
}

fn run<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    trunk_in: Var<'t>,
    view_enc: Var<'t>,
    color_code: Var<'t>,
) -> Result<MlpOutput<'t>> {
    let mut h = trunk_in;
    for i in 0..cfg.mlp_depth {
        h = dense(pv, &format!("mlp.trunk{i}"), h)?.relu();
    }
    let raw_sigma = dense(pv, "mlp.sigma", h)?;
    let c = Var::concat(&[h, view_enc, color_code], 1)?;
    let c = dense(pv, "mlp.color0", c)?.relu();
    let color = dense(pv, "mlp.color1", c)?.relu();
    Ok(MlpOutput { color, raw_sigma })
}

fn check_rows(op: &'static str, parts: &[(&str, Var<'_>, usize)]) -> Result<usize> {
    let n = parts[0].1.shape()[0];
    for (what, v, width) in parts {
        if v.shape() != [n, *width] {
            return Err(Error::shape(op, format!("{what}: expected [{n}×{width}], got {:?}", v.shape())));
        }
    }
    Ok(n)
}

/// Scene MLP conditioned on local codes sampled from the field.
///
/// `pos_enc: [N×6L_pos]`, `view_enc: [N×6L_view]`, `f` and `f_view: [N×F_loc]`.
pub fn scene_mlp<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    pos_enc: Var<'t>,
    view_enc: Var<'t>,
    f: Var<'t>,
    f_view: Var<'t>,
) -> Result<MlpOutput<'t>> {
    check_rows(
        "scene_mlp",
        &[
            ("pos_enc", pos_enc, cfg.pos_enc_width()),
            ("view_enc", view_enc, cfg.view_enc_width()),
            ("f", f, cfg.f_loc),
            ("f_view", f_view, cfg.f_loc),
        ],
    )?;
    let trunk_in = Var::concat(&[pos_enc, f], 1)?;
    run(pv, cfg, trunk_in, view_enc, f_view)
}

/// Scene MLP conditioned on the global code `z: [Z]`, broadcast to every point.
pub fn global_code_mlp<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    pos_enc: Var<'t>,
    view_enc: Var<'t>,
    z: Var<'t>,
) -> Result<MlpOutput<'t>> {
    let n = check_rows(
        "global_code_mlp",
        &[
            ("pos_enc", pos_enc, cfg.pos_enc_width()),
            ("view_enc", view_enc, cfg.view_enc_width()),
        ],
    )?;
    if z.shape() != [cfg.z_dim] {
        return Err(Error::shape("global_code_mlp", format!("latent {:?}", z.shape())));
    }
    let zs = z.repeat_rows(n)?;
    let trunk_in = Var::concat(&[pos_enc, zs], 1)?;
    run(pv, cfg, trunk_in, view_enc, zs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{Conditioning, Model};

    #[test]
    fn encoding_of_origin_and_unit() {
        let e = positional_encoding(&Tensor::new([1, 3], vec![0.0, 0.5, 1.0]).unwrap(), 2).unwrap();
        assert_eq!(e.shape(), &[1, 12]);
        let d = e.data();
        // x = 0
        assert_eq!(&d[0..4], &[0.0, 1.0, 0.0, 1.0]);
        // y = 0.5: sin(π/2), cos(π/2), sin(π), cos(π)
        assert!((d[4] - 1.0).abs() < 1e-15 && d[5].abs() < 1e-15);
        assert!(d[6].abs() < 1e-15 && (d[7] + 1.0).abs() < 1e-15);
        // z = 1: cos(π) = -1, cos(2π) = 1
        assert!((d[9] + 1.0).abs() < 1e-15 && (d[11] - 1.0).abs() < 1e-15);
        assert!(positional_encoding(&Tensor::zeros([2, 2]), 2).is_err());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let model = Model::init(ModelConfig::default(), 5).unwrap();
        let cfg = &model.config;
        let tape = Tape::new();
        let pv = model.params.register_frozen(&tape);
        let n = 7;
        let pts = Tensor::new([n, 3], (0..3 * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let pe = tape.constant(positional_encoding(&pts, cfg.pos_freqs).unwrap());
        let ve = tape.constant(positional_encoding(&pts, cfg.view_freqs).unwrap());
        let f = tape.constant(Tensor::full([n, cfg.f_loc], 0.1));
        let out = scene_mlp(&pv, cfg, pe, ve, f, f).unwrap();
        assert_eq!(out.color.shape(), vec![n, 3]);
        assert_eq!(out.raw_sigma.shape(), vec![n, 1]);
        assert!(out.color.value().data().iter().all(|&c| c >= 0.0));
        assert!(scene_mlp(&pv, cfg, pe, ve, f, pe).is_err());
    }

    #[test]
    fn global_variant_runs() {
        let cfg = ModelConfig {
            conditioning: Conditioning::GlobalCode,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, 5).unwrap();
        let cfg = &model.config;
        let tape = Tape::new();
        let pv = model.params.register_frozen(&tape);
        let pts = Tensor::zeros([4, 3]);
        let pe = tape.constant(positional_encoding(&pts, cfg.pos_freqs).unwrap());
        let ve = tape.constant(positional_encoding(&pts, cfg.view_freqs).unwrap());
        let z = tape.constant(Tensor::full([cfg.z_dim], 0.5));
        let out = global_code_mlp(&pv, cfg, pe, ve, z).unwrap();
        assert_eq!(out.color.shape(), vec![4, 3]);
        // identical points give identical outputs
        let c = out.color.value();
        assert_eq!(&c.data()[0..3], &c.data()[9..12]);
    }
}
