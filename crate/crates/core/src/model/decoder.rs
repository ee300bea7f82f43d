//! Two-branch volume decoder.
//!
//! Field channel layout, `[F×D×D×D]` with `F = 4 + 2·F_loc`:
//! `[0..3)` color `c̃`, `[3]` raw log-opacity, `[4..4+F_loc)` opacity
//! features `f`, `[4+F_loc..F)` view-dependent features `f^v`.

use super::{ModelConfig, LEAKY_SLOPE};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::tensor::Tensor;

/// Offset of the raw log-opacity channel.
pub const OPACITY_CHANNEL: usize = 3;
/// Offset of the opacity feature channels.
pub const FEATURE_OFFSET: usize = 4;

/// A decoded field held outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub data: Tensor,
}

impl VoxelField {
    pub fn new(data: Tensor) -> Result<Self> {
        match data.shape() {
            &[f, a, b, c] if f > FEATURE_OFFSET && (f - FEATURE_OFFSET) % 2 == 0 && a == b && b == c => {
                Ok(VoxelField { data })
            }
            s => Err(Error::shape("voxel field", format!("bad field shape {s:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid_res(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn f_loc(&self) -> usize {
        (self.channels() - FEATURE_OFFSET) / 2
    }
}

fn branch<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    name: &str,
    input: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let fc = |p: &str| pv.get(&format!("dec.{name}.fc.{p}"));
    let h = input.linear(fc("w")?, fc("b")?)?.leaky_relu(LEAKY_SLOPE);
    let seed = h.reshape(&[cfg.dec_hidden, 1, 1, 1])?;
    let last = cfg.dec_channels.len();
    let stack = |kind: &str| -> Result<Var<'t>> {
        let mut x = seed;
        for i in 0..=last {
            let w = pv.get(&format!("dec.{name}.{kind}{i}.w"))?;
            let b = pv.get(&format!("dec.{name}.{kind}{i}.b"))?;
            x = x.conv_transpose3d_s2(w, b)?;
            if i < last {
                x = x.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(x)
    };
    Ok((stack("value")?, stack("feat")?))
}

/// Opacity branch: `z` to `[1+F_loc×D³]`, raw log-opacity then `f`.
pub fn decode_opacity<'t>(pv: &ParamVars<'t>, cfg: &ModelConfig, z: Var<'t>) -> Result<Var<'t>> {
    if z.shape() != [cfg.z_dim] {
        return Err(Error::shape("decode_opacity", format!("latent {:?}", z.shape())));
    }
    let (raw, feat) = branch(pv, cfg, "opacity", z)?;
    Var::concat(&[raw, feat], 0)
}

/// Color branch: `concat(z, view)` to `[3+F_loc×D³]`, rectified `c̃` then `f^v`.
pub fn decode_color<'t>(pv: &ParamVars<'t>, cfg: &ModelConfig, z: Var<'t>, view: Var<'t>) -> Result<Var<'t>> {
    if z.shape() != [cfg.z_dim] || view.shape() != [3] {
        return Err(Error::shape(
            "decode_color",
            format!("latent {:?}, view {:?}", z.shape(), view.shape()),
        ));
    }
    let norm = view.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("decode_color", format!("view direction has norm {norm}")));
    }
    let input = Var::concat(&[z, view], 0)?;
    let (color, feat) = branch(pv, cfg, "color", input)?;
    Var::concat(&[color.relu(), feat], 0)
}

/// Interleave the two branch outputs into the field channel layout.
pub fn assemble_field<'t>(opacity: Var<'t>, color: Var<'t>) -> Result<Var<'t>> {
    let f_loc = opacity.shape()[0] - 1;
    if color.shape()[0] != 3 + f_loc {
        return Err(Error::shape(
            "assemble_field",
            format!("opacity {:?}, color {:?}", opacity.shape(), color.shape()),
        ));
    }
    let c = color.narrow(0, 0, 3)?;
    let fv = color.narrow(0, 3, f_loc)?;
    Var::concat(&[c, opacity, fv], 0)
}

/// Both branches at once: `(z, view)` to the full `[F×D×D×D]` field.
pub fn volume_decoder<'t>(pv: &ParamVars<'t>, cfg: &ModelConfig, z: Var<'t>, view: Var<'t>) -> Result<Var<'t>> {
    let opacity = decode_opacity(pv, cfg, z)?;
    let color = decode_color(pv, cfg, z, view)?;
    assemble_field(opacity, color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::Model;

    #[test]
    fn field_shape_and_layout() {
        let model = Model::init(ModelConfig::default(), 2).unwrap();
        let cfg = &model.config;
        let tape = Tape::new();
        let pv = model.params.register_frozen(&tape);
        let z = tape.constant(Tensor::full([cfg.z_dim], 0.3));
        let view = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 1.0]));
        let op = decode_opacity(&pv, cfg, z).unwrap();
        let col = decode_color(&pv, cfg, z, view).unwrap();
        let field = volume_decoder(&pv, cfg, z, view).unwrap();
        assert_eq!(field.shape(), vec![20, 8, 8, 8]);
        let vol = 512;
        let (f, o, c) = (field.value(), op.value(), col.value());
        assert_eq!(&f.data()[..3 * vol], &c.data()[..3 * vol]);
        assert_eq!(&f.data()[3 * vol..12 * vol], o.data());
        assert_eq!(&f.data()[12 * vol..], &c.data()[3 * vol..]);
        assert!(f.data()[..3 * vol].iter().all(|&v| v >= 0.0));
        VoxelField::new(f.as_ref().clone()).unwrap();
    }

    #[test]
    fn opacity_branch_ignores_view() {
        let model = Model::init(ModelConfig::default(), 2).unwrap();
        let cfg = &model.config;
        let tape = Tape::new();
        let pv = model.params.register_frozen(&tape);
        let z = tape.constant(Tensor::full([cfg.z_dim], -0.2));
        let a = volume_decoder(&pv, cfg, z, tape.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0]))).unwrap();
        let b = volume_decoder(&pv, cfg, z, tape.constant(Tensor::from_vec(vec![0.0, -1.0, 0.0]))).unwrap();
        let vol = 512;
        let (a, b) = (a.value(), b.value());
        assert_eq!(&a.data()[3 * vol..12 * vol], &b.data()[3 * vol..12 * vol]);
        assert_ne!(&a.data()[..3 * vol], &b.data()[..3 * vol]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(VoxelField::new(Tensor::zeros([5, 2, 2, 2])).is_err());
        assert!(VoxelField::new(Tensor::zeros([6, 2, 2, 3])).is_err());
        let model = Model::init(ModelConfig::default(), 2).unwrap();
        let tape = Tape::new();
        let pv = model.params.register_frozen(&tape);
        let z = tape.constant(Tensor::zeros([7]));
        assert!(decode_opacity(&pv, &model.config, z).is_err());
    }
}
