//! Ready-made gradient checks over every taped operation and over the
//! complete coarse + fine rendering loss of a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{Conditioning, LatentVars, Model, ModelConfig};
use crate::objectives::{beta_prior, kl_loss, reconstruction_loss, total_loss, LossWeights, PassPredictions, BETA_EPS};
use crate::params::{ParamStore, ParamVars};
use crate::render::{march_weights, over_background, render_rays, weighted_colors, Camera, FrameVars, RenderSettings, SceneBounds};
use crate::rng::{stream, Stream};
use crate::sampling::SamplingMode;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Objective = Box<dyn for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>>;

struct Case {
    name: String,
    params: ParamStore,
    f: Objective,
}

fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `±[0.1, 1]`, away from the kinks of relu, clamp and friends.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Contract `v` with fixed pseudo-random weights so that every output
/// coordinate contributes a distinct amount to the scalar.
fn project<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(v.numel() as u64);
    let w = tensor(&v.shape(), values(&mut rng, v.numel(), -1.0, 1.0));
    Ok(v.mul(tape.constant(w))?.sum())
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t).expect("distinct names");
    }
    s
}

fn case(name: &str, params: ParamStore, f: Objective) -> Case {
    Case {
        name: name.to_string(),
        params,
        f,
    }
}

fn unary_case(name: &str, shape: &[usize], data: Vec<f64>, f: fn(Var<'_>) -> Result<Var<'_>>) -> Case {
    case(
        name,
        store(vec![("x", tensor(shape, data))]),
        Box::new(move |tape, p| project(tape, f(p.get("x")?)?)),
    )
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let pair = |r: &mut ChaCha8Rng, lo: f64, hi: f64| {
        store(vec![
            ("a", tensor(&[2, 3], values(r, 6, -1.0, 1.0))),
            ("b", tensor(&[3], values(r, 3, lo, hi))),
        ])
    };
    cases.push(case("add", pair(r, -1.0, 1.0), Box::new(|t, p| project(t, p.get("a")?.add(p.get("b")?)?))));
    cases.push(case("sub", pair(r, -1.0, 1.0), Box::new(|t, p| project(t, p.get("b")?.sub(p.get("a")?)?))));
    cases.push(case("mul", pair(r, -1.0, 1.0), Box::new(|t, p| project(t, p.get("a")?.mul(p.get("b")?)?))));
    cases.push(case("div", pair(r, 0.5, 2.0), Box::new(|t, p| project(t, p.get("a")?.div(p.get("b")?)?))));

    cases.push(unary_case("neg", &[5], values(r, 5, -1.0, 1.0), |x| Ok(x.neg())));
    cases.push(unary_case("scale", &[5], values(r, 5, -1.0, 1.0), |x| Ok(x.scale(-2.5))));
    cases.push(unary_case("add_scalar", &[5], values(r, 5, -1.0, 1.0), |x| Ok(x.add_scalar(0.7).square())));
    cases.push(unary_case("square", &[5], values(r, 5, -1.0, 1.0), |x| Ok(x.square())));
    cases.push(unary_case("exp", &[5], values(r, 5, -1.0, 1.0), |x| Ok(x.exp())));
    cases.push(unary_case("log", &[5], values(r, 5, 0.3, 2.0), |x| x.log()));
    cases.push(unary_case("sin", &[5], values(r, 5, -3.0, 3.0), |x| Ok(x.sin())));
    cases.push(unary_case("cos", &[5], values(r, 5, -3.0, 3.0), |x| Ok(x.cos())));
    cases.push(unary_case("relu", &[6], off_kink(r, 6), |x| Ok(x.relu())));
    cases.push(unary_case("leaky_relu", &[6], off_kink(r, 6), |x| Ok(x.leaky_relu(0.2))));
    let clamp_in = vec![-0.9, -0.3, -0.1, 0.2, 0.4, 0.8];
    cases.push(unary_case("clamp", &[6], clamp_in, |x| Ok(x.clamp(-0.5, 0.5))));

    cases.push(unary_case("sum", &[2, 3], values(r, 6, -1.0, 1.0), |x| Ok(x.square().sum())));
    cases.push(unary_case("mean", &[2, 3], values(r, 6, -1.0, 1.0), |x| Ok(x.square().mean())));
    cases.push(unary_case("sum_axes", &[2, 3, 4], values(r, 24, -1.0, 1.0), |x| x.sum_axes(&[1])));
    cases.push(unary_case("reshape", &[2, 3], values(r, 6, -1.0, 1.0), |x| x.reshape(&[3, 2])));
    cases.push(unary_case("narrow", &[2, 4, 3], values(r, 24, -1.0, 1.0), |x| x.narrow(1, 1, 2)));
    cases.push(unary_case("transpose", &[2, 3], values(r, 6, -1.0, 1.0), |x| x.transpose()));
    cases.push(unary_case("repeat_rows", &[4], values(r, 4, -1.0, 1.0), |x| x.repeat_rows(3)));
    cases.push(unary_case("gather_rows", &[3, 2], values(r, 6, -1.0, 1.0), |x| x.gather_rows(&[2, 0, 2, 1])));
    // distinct values spaced 0.1 apart so the arg-max is stable under eps
    let mut pool: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, r.random_range(0..=i));
    }
    cases.push(unary_case("maxpool_over_points", &[3, 4], pool, |x| x.maxpool_over_points()));
    cases.push(case(
        "concat",
        store(vec![
            ("a", tensor(&[2, 2], values(r, 4, -1.0, 1.0))),
            ("b", tensor(&[2, 3], values(r, 6, -1.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, Var::concat(&[p.get("a")?, p.get("b")?], 1)?)),
    ));

    cases.push(case(
        "matmul",
        store(vec![
            ("a", tensor(&[2, 3], values(r, 6, -1.0, 1.0))),
            ("b", tensor(&[3, 4], values(r, 12, -1.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, p.get("a")?.matmul(p.get("b")?)?)),
    ));
    cases.push(case(
        "linear",
        store(vec![
            ("x", tensor(&[3, 4], values(r, 12, -1.0, 1.0))),
            ("w", tensor(&[2, 4], values(r, 8, -1.0, 1.0))),
            ("b", tensor(&[2], values(r, 2, -1.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, p.get("x")?.linear(p.get("w")?, p.get("b")?)?)),
    ));
    cases.push(case(
        "linear_vector",
        store(vec![
            ("x", tensor(&[4], values(r, 4, -1.0, 1.0))),
            ("w", tensor(&[3, 4], values(r, 12, -1.0, 1.0))),
            ("b", tensor(&[3], values(r, 3, -1.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, p.get("x")?.linear(p.get("w")?, p.get("b")?)?)),
    ));
    cases.push(case(
        "conv2d_s2",
        store(vec![
            ("x", tensor(&[2, 4, 6], values(r, 48, -1.0, 1.0))),
            ("k", tensor(&[3, 2, 4, 4], values(r, 96, -0.5, 0.5))),
            ("b", tensor(&[3], values(r, 3, -1.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, p.get("x")?.conv2d_s2(p.get("k")?, p.get("b")?)?)),
    ));
    cases.push(case(
        "conv_transpose3d_s2",
        store(vec![
            ("x", tensor(&[2, 2, 2, 2], values(r, 16, -1.0, 1.0))),
            ("k", tensor(&[2, 3, 4, 4, 4], values(r, 384, -0.5, 0.5))),
            ("b", tensor(&[3], values(r, 3, -1.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, p.get("x")?.conv_transpose3d_s2(p.get("k")?, p.get("b")?)?)),
    ));
    cases.push(case(
        "grid_sample_trilinear",
        store(vec![
            ("grid", tensor(&[2, 4, 4, 4], values(r, 128, -1.0, 1.0))),
            ("points", tensor(&[5, 3], values(r, 15, -0.95, 0.95))),
        ]),
        Box::new(|t, p| project(t, p.get("grid")?.grid_sample_trilinear(p.get("points")?)?)),
    ));

    let deltas = tensor(&[2, 4], values(r, 8, 0.05, 0.3));
    let d2 = deltas.clone();
    cases.push(case(
        "march_weights",
        store(vec![("log_sigma", tensor(&[2, 4], values(r, 8, -1.0, 2.0)))]),
        Box::new(move |t, p| project(t, march_weights(p.get("log_sigma")?.exp(), &d2)?)),
    ));
    cases.push(case(
        "weighted_colors",
        store(vec![
            ("w", tensor(&[2, 4], values(r, 8, 0.0, 0.3))),
            ("c", tensor(&[8, 3], values(r, 24, 0.0, 1.0))),
        ]),
        Box::new(|t, p| project(t, weighted_colors(p.get("w")?, p.get("c")?)?)),
    ));
    let bg = tensor(&[3, 3], values(r, 9, 0.0, 1.0));
    cases.push(case(
        "over_background",
        store(vec![
            ("c", tensor(&[3, 3], values(r, 9, 0.0, 1.0))),
            ("a", tensor(&[3], values(r, 3, 0.1, 0.9))),
        ]),
        Box::new(move |t, p| project(t, over_background(p.get("c")?, p.get("a")?, &bg)?)),
    ));
    let gt = tensor(&[3, 3], values(r, 9, 0.0, 1.0));
    cases.push(case(
        "reconstruction_loss",
        store(vec![("pred", tensor(&[3, 3], values(r, 9, 0.0, 1.0)))]),
        Box::new(move |_, p| reconstruction_loss(p.get("pred")?, &gt)),
    ));
    cases.push(case(
        "beta_prior",
        store(vec![("alpha", tensor(&[4], values(r, 4, 0.1, 0.9)))]),
        Box::new(|_, p| beta_prior(p.get("alpha")?, BETA_EPS)),
    ));
    cases.push(case(
        "kl_loss",
        store(vec![
            ("mu", tensor(&[4], values(r, 4, -1.0, 1.0))),
            ("raw", tensor(&[4], values(r, 4, -1.0, 1.0))),
        ]),
        Box::new(|_, p| {
            kl_loss(&LatentVars {
                mu: p.get("mu")?,
                raw_logstd: p.get("raw")?,
            })
        }),
    ));
    cases
}

/// Model with a 4³ field and a two-layer scene MLP.
pub fn tiny_render_config(conditioning: Conditioning) -> ModelConfig {
    ModelConfig {
        z_dim: 4,
        grid_res: 4,
        f_loc: 2,
        enc_height: 16,
        enc_width: 8,
        enc_channels: vec![4, 4],
        enc_hidden: 4,
        dec_hidden: 4,
        dec_channels: vec![4],
        mlp_width: 8,
        mlp_depth: 2,
        mlp_color_width: 4,
        pos_freqs: 2,
        view_freqs: 1,
        kps_channels: vec![4],
        kps_hidden: vec![4],
        conditioning,
        ..ModelConfig::default()
    }
}

/// Full render loss over a handful of rays. Fine depths depend on the coarse
/// weights but are not differentiated through, so in the fine modes the
/// opacity channel is held constant; [`SamplingMode::CoarseOnly`] checks it.
fn render_case(conditioning: Conditioning, mode: SamplingMode, jitter: bool) -> Result<Case> {
    let cfg = tiny_render_config(conditioning);
    let model = Model::init(cfg.clone(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let d = cfg.grid_res;
    let vol = d * d * d;
    let mut params = model.params.filter_prefix("mlp.");
    params.insert("field.rgb", tensor(&[3, d, d, d], values(&mut rng, 3 * vol, 0.0, 1.0)))?;
    let opacity = tensor(&[1, d, d, d], values(&mut rng, vol, 0.0, 1.5));
    if mode == SamplingMode::CoarseOnly {
        params.insert("field.opacity", opacity.clone())?;
    }
    params.insert("field.codes", tensor(&[2 * cfg.f_loc, d, d, d], values(&mut rng, 2 * cfg.f_loc * vol, -1.0, 1.0)))?;
    params.insert("latent.mu", tensor(&[cfg.z_dim], values(&mut rng, cfg.z_dim, -1.0, 1.0)))?;
    params.insert("latent.raw", tensor(&[cfg.z_dim], values(&mut rng, cfg.z_dim, -1.0, 0.0)))?;

    let bounds = SceneBounds::default();
    let cam = Camera::look_at([0.3, -0.5, 0.81], [0.0; 3], [0.0, 0.0, 1.0], 5.0, 4, 4)?;
    let rays = (0..4)
        .map(|i| cam.generate_ray(1 + i % 2, 1 + i / 2, &bounds))
        .collect::<Result<Vec<_>>>()?;
    let gt = tensor(&[rays.len(), 3], values(&mut rng, rays.len() * 3, 0.0, 1.0));
    let settings = RenderSettings {
        n_coarse: 6,
        n_fine: 3,
        mode,
        ..RenderSettings::default()
    };
    let view = cam.view_vector(&bounds);

    let f: Objective = Box::new(move |tape, p| {
        let opacity = match p.get("field.opacity") {
            Ok(v) => v,
            Err(_) => tape.constant(opacity.clone()),
        };
        let field = Var::concat(&[p.get("field.rgb")?, opacity, p.get("field.codes")?], 0)?;
        let latent = LatentVars {
            mu: p.get("latent.mu")?,
            raw_logstd: p.get("latent.raw")?,
        };
        let frame = FrameVars {
            field,
            z: latent.mu,
            view,
        };
        let mut jitter_rng = stream(5, Stream::Render, 0);
        let out = render_rays(p, &cfg, &bounds, &settings, &frame, &rays, jitter.then_some(&mut jitter_rng))?;
        let pred = PassPredictions {
            coarse: out.coarse,
            coarse_alpha: out.coarse_alpha,
            fine: out.fine,
            fine_alpha: out.fine_alpha,
        };
        let weights = LossWeights {
            lambda_kl: 0.1,
            ..LossWeights::default()
        };
        Ok(total_loss(&pred, &gt, kl_loss(&latent)?, &weights)?.0)
    });
    let name = format!("render_loss[{conditioning},{mode}{}]", if jitter { ",jittered" } else { "" });
    Ok(case(&name, params, f))
}

fn run(cases: Vec<Case>) -> Result<Vec<(String, GradCheckReport)>> {
    cases
        .into_iter()
        .map(|c| Ok((c.name, grad_check(&c.f, &c.params, EPS, TOL)?)))
        .collect()
}

/// Check every taped operation on three sets of small random inputs.
pub fn op_checks() -> Result<Vec<(String, GradCheckReport)>> {
    let mut reports = Vec::new();
    for seed in [11, 12, 13] {
        for (name, report) in run(op_cases(seed))? {
            reports.push((format!("{name}#{seed}"), report));
        }
    }
    Ok(reports)
}

/// Check the coarse + fine training loss of a 4³ field with a two-layer
/// scene MLP, for both conditioning modes and every sampling mode.
pub fn render_loss_checks() -> Result<Vec<(String, GradCheckReport)>> {
    let mut cases = Vec::new();
    for cond in [Conditioning::LocalCodes, Conditioning::GlobalCode] {
        for mode in SamplingMode::ALL {
            cases.push(render_case(cond, mode, false)?);
        }
        cases.push(render_case(cond, SamplingMode::Simple, true)?);
    }
    run(cases)
}
