use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::AdamState;
use super::checkpoint::Checkpoint;
use super::inference::{conditioning_views, encode_mean, render_code};
use super::{Scope, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{assemble_field, decode_color, decode_opacity, image_encoder, reparameterize, Model};
use crate::objectives::{kl_loss, mse_8bit, psnr, total_loss, LossBreakdown, PassPredictions};
use crate::params::ParamVars;
use crate::render::{render_rays, FrameVars, MarchStats, Ray};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "iter,total,l_r_fine,l_r_coarse,l_beta_fine,l_beta_coarse,l_kl,eval_psnr";

/// Counter of the fixed batch used by [`Trainer::probe`].
const PROBE_COUNTER: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Opacity-branch decoder runs, one per distinct frame in the batch.
    pub decoder_invocations: usize,
    pub stats: MarchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: LossBreakdown,
    pub eval_psnr: Option<f64>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        let eval = self.eval_psnr.map(|p| p.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{eval}",
            self.iter, l.total, l.l_r_fine, l.l_r_coarse, l.l_beta_fine, l.l_beta_coarse, l.l_kl
        )
    }
}

/// Pixel indices drawn for one (frame, camera) pair.
type Batch = BTreeMap<(usize, usize), Vec<usize>>;

struct Forward<'t> {
    loss: Var<'t>,
    breakdown: LossBreakdown,
    pv: ParamVars<'t>,
    decoder_invocations: usize,
    stats: MarchStats,
}

/// Training state over one dataset. All randomness of iteration `i` comes
/// from counter-based streams keyed by `i`, so a run resumed from a
/// checkpoint replays the uninterrupted one exactly.
pub struct Trainer<'d> {
    pub dataset: &'d Dataset,
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub iteration: u64,
    pub scope: Scope,
    views: Vec<Tensor>,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d Dataset, model: Model, config: TrainConfig) -> Result<Self> {
        let mut config = config;
        config.render.background = dataset.background();
        config.validate()?;
        model.config.validate()?;
        let views = (0..dataset.n_frames())
            .map(|f| conditioning_views(dataset, &model.config, f))
            .collect::<Result<_>>()?;
        Ok(Trainer {
            dataset,
            model,
            config,
            adam: AdamState::new(),
            iteration: 0,
            scope: Scope::Full,
            views,
        })
    }

    pub fn resume(dataset: &'d Dataset, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(dataset, ckpt.model, ckpt.train)?;
        t.adam = ckpt.adam;
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
        }
    }

    fn sample_batch(&self, counter: u64) -> Batch {
        let ds = self.dataset;
        let cfg = &self.config;
        let mut rng = stream(cfg.seed, Stream::TrainBatch, counter);
        let n_pix = ds.config.width * ds.config.height;
        let per = cfg.rays_per_batch / cfg.views_per_batch;
        let extra = cfg.rays_per_batch % cfg.views_per_batch;
        let mut batch = Batch::new();
        for v in 0..cfg.views_per_batch {
            let frame = rng.random_range(0..ds.n_frames());
            let cam = ds.train[rng.random_range(0..ds.train.len())];
            let count = per + usize::from(v < extra);
            let pixels = batch.entry((frame, cam)).or_default();
            pixels.extend((0..count).map(|_| rng.random_range(0..n_pix)));
        }
        batch
    }

    fn latent_noise(&self, counter: u64, frame: usize) -> Vec<f64> {
        let mut rng = stream(self.config.seed, Stream::Latent, counter.wrapping_mul(1 << 20) ^ frame as u64);
        (0..self.model.config.z_dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Build the loss of batch `counter`. `stochastic` selects sampled
    /// latents and jittered depths; otherwise `z = μ` and depths are fixed.
    fn forward<'t>(&self, tape: &'t Tape, counter: u64, stochastic: bool) -> Result<Forward<'t>> {
        let ds = self.dataset;
        let mc = &self.model.config;
        let batch = self.sample_batch(counter);
        let scope = self.scope;
        let pv = self.model.params.register_with(tape, |name| scope.trains(name));
        let mut render_rng = stream(self.config.seed, Stream::Render, counter);
        let width = ds.config.width;

        let mut kl: Option<Var<'t>> = None;
        let mut parts: Vec<[Var<'t>; 4]> = Vec::new();
        let mut gt = Vec::with_capacity(self.config.rays_per_batch * 3);
        let mut stats = MarchStats::default();
        let mut decoder_invocations = 0;
        let mut current: Option<(usize, Var<'t>, Var<'t>)> = None;
        for (&(frame, cam), pixels) in &batch {
            if current.map(|c| c.0) != Some(frame) {
                let latent = image_encoder(&pv, mc, tape.constant(self.views[frame].clone()))?;
                let term = kl_loss(&latent)?;
                kl = Some(match kl {
                    Some(k) => k.add(term)?,
                    None => term,
                });
                let z = if stochastic {
                    reparameterize(&latent, &self.latent_noise(counter, frame))?
                } else {
                    latent.mu
                };
                current = Some((frame, z, decode_opacity(&pv, mc, z)?));
                decoder_invocations += 1;
            }
            let (_, z, opacity) = current.expect("set above");
            let camera = &ds.cameras[cam];
            let view = camera.view_vector(&ds.bounds);
            let color = decode_color(&pv, mc, z, tape.constant(Tensor::from_vec(view.to_vec())))?;
            let vars = FrameVars {
                field: assemble_field(opacity, color)?,
                z,
                view,
            };
            let rays: Vec<Option<Ray>> = pixels
                .iter()
                .map(|&p| camera.generate_ray(p % width, p / width, &ds.bounds))
                .collect::<Result<_>>()?;
            let rng = stochastic.then_some(&mut render_rng);
            let out = render_rays(&pv, mc, &ds.bounds, &self.config.render, &vars, &rays, rng)?;
            stats.merge(&out.stats);
            parts.push([out.coarse, out.coarse_alpha, out.fine, out.fine_alpha]);
            let img = ds.image(frame, cam);
            for &p in pixels {
                gt.extend(img.pixel(p % width, p / width));
            }
        }
        let cat = |k: usize| Var::concat(&parts.iter().map(|p| p[k]).collect::<Vec<_>>(), 0);
        let s = self.config.color_scale;
        let pred = PassPredictions {
            coarse: cat(0)?.scale(s),
            coarse_alpha: cat(1)?,
            fine: cat(2)?.scale(s),
            fine_alpha: cat(3)?,
        };
        let n = gt.len() / 3;
        gt.iter_mut().for_each(|v| *v *= s);
        let kl = kl.ok_or_else(|| Error::invalid("train_step", "empty batch"))?;
        let (loss, breakdown) = total_loss(&pred, &Tensor::new([n, 3], gt)?, kl, &self.config.loss)?;
        Ok(Forward {
            loss,
            breakdown,
            pv,
            decoder_invocations,
            stats,
        })
    }

    /// One optimization step on a fresh batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, self.iteration, true)?;
        check_breakdown(&fwd.breakdown, self.iteration)?;
        let grads = tape.backward(fwd.loss)?;
        let grads = fwd.pv.gradients(&grads);
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at iteration {}",
                    self.iteration
                )));
            }
        }
        self.adam.step(&self.config.adam, &mut self.model.params, &grads)?;
        self.iteration += 1;
        Ok(StepReport {
            loss: fwd.breakdown,
            decoder_invocations: fwd.decoder_invocations,
            stats: fwd.stats,
        })
    }

    /// Loss on a fixed batch with deterministic latents and depths; no update.
    pub fn probe(&self) -> Result<LossBreakdown> {
        let tape = Tape::new();
        Ok(self.forward(&tape, PROBE_COUNTER, false)?.breakdown)
    }

    /// Frames used for periodic evaluation: at most four, evenly spaced.
    pub fn eval_frames(&self) -> Vec<usize> {
        let n = self.dataset.n_frames();
        (0..n).step_by(n.div_ceil(4)).collect()
    }

    /// Mean fine-pass PSNR over the held-out cameras on [`Self::eval_frames`].
    pub fn evaluate(&self) -> Result<f64> {
        let ds = self.dataset;
        let mut total = 0.0;
        let mut count = 0;
        for f in self.eval_frames() {
            let z = encode_mean(&self.model, &self.views[f])?.mu;
            for &cam in &ds.test {
                let img = render_code(&self.model, &z, &ds.cameras[cam], &ds.bounds, &self.config.render, self.config.tile)?;
                total += psnr(mse_8bit(&img.fine.quantized(), ds.image(f, cam))?);
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Train until `self.iteration == until`. With `out`, metrics are
    /// appended to `metrics.csv` and checkpoints written there.
    pub fn run(&mut self, until: u64, out: Option<&Path>) -> Result<Vec<LogRow>> {
        let mut log = match out {
            Some(dir) => Some(open_metrics(dir, self.iteration > 0)?),
            None => None,
        };
        let mut rows = Vec::new();
        while self.iteration < until {
            let report = self.step()?;
            let it = self.iteration;
            let eval_now = it == until || (self.config.eval_every > 0 && it % self.config.eval_every == 0);
            let row = LogRow {
                iter: it,
                loss: report.loss,
                eval_psnr: if eval_now { Some(self.evaluate()?) } else { None },
            };
            if let (Some(w), Some(dir)) = (log.as_mut(), out) {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
                if self.config.checkpoint_every > 0 && it % self.config.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(format!("ckpt_{it:06}.crfd")))?;
                }
            }
            rows.push(row);
        }
        if let (Some(mut w), Some(dir)) = (log, out) {
            w.flush().map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
            self.checkpoint().save(&dir.join("checkpoint.crfd"))?;
        }
        Ok(rows)
    }
}

fn check_breakdown(b: &LossBreakdown, iteration: u64) -> Result<()> {
    let terms = [
        ("l_r_fine", b.l_r_fine),
        ("l_r_coarse", b.l_r_coarse),
        ("l_beta_fine", b.l_beta_fine),
        ("l_beta_coarse", b.l_beta_coarse),
        ("l_kl", b.l_kl),
        ("total", b.total),
    ];
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::NonFinite(format!("{name} = {v} at iteration {iteration}"))),
        None => Ok(()),
    }
}

fn open_metrics(dir: &Path, append: bool) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    if append && path.exists() {
        let f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        return Ok(BufWriter::new(f));
    }
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
    Ok(w)
}
