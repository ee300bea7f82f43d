use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crfd::config::RunConfig;
use crfd::data::{generate_dataset, read_keypoints, Dataset};
use crfd::experiments::{
    animate_interp, animate_keypoints, animate_sample, bench_csv, benchmark_strategies, evaluate_views, render_view,
    seqlen_csv, seqlen_sweep,
};
use crfd::image::{encode_float_channels, Image};
use crfd::model::{Conditioning, Model};
use crfd::render::RenderSettings;
use crfd::sampling::SamplingMode;
use crfd::train::{distill_keypoint_encoder, finetune, AdamState, Checkpoint, Scope, Trainer};
use crfd::{Error, Result};

/// Dynamic radiance fields from multi-view video: synthesize data, train,
/// render, evaluate and animate.
#[derive(Parser)]
#[command(name = "crfd", version)]
struct Cli {
    /// Run configuration file (`key=value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for data synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long, env = "CRFD_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scene-MLP conditioning: local or global.
        #[arg(long)]
        conditioning: Option<Conditioning>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one view of one frame.
    Render {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        frame: usize,
        /// Fine sampling: ss, hs or coarse.
        #[arg(long)]
        mode: Option<SamplingMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score renders against the dataset images.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Camera split: test or train.
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare quality and speed of the sampling modes.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train local- and global-code models on growing frame prefixes.
    Seqlen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render sequences driven by latent codes.
    Animate {
        #[command(flatten)]
        model: ModelArgs,
        /// Camera to render from; defaults to the first test camera.
        #[arg(long)]
        camera: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(subcommand)]
        kind: Animation,
    },
    /// Fit the keypoint encoder to the image encoder's codes.
    Distill {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a trained model to a new sequence.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
        /// Parameters to update: encoder or full.
        #[arg(long)]
        scope: Option<Scope>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Animation {
    /// Walk the straight line between two frames' codes.
    Interp {
        #[arg(long)]
        frame_a: usize,
        #[arg(long)]
        frame_b: usize,
        #[arg(long)]
        steps: usize,
    },
    /// Decode codes drawn from the prior.
    Sample {
        #[arg(long)]
        n: usize,
    },
    /// Drive the model with keypoint files, one image per file.
    Keypoints {
        #[arg(long = "kps-file", required = true)]
        kps_file: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Test,
    Train,
}

/// The resolved configuration plus the keys the user set explicitly.
struct Setup {
    config: RunConfig,
    explicit: Vec<(String, String)>,
}

impl Setup {
    fn new(cli: &Cli) -> Result<Setup> {
        let mut explicit = match &cli.config {
            Some(path) => RunConfig::read_pairs(path)?,
            None => Vec::new(),
        };
        for item in &cli.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            explicit.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = cli.seed {
            explicit.push(("seed".into(), seed.to_string()));
        }
        if let Some(t) = cli.threads {
            explicit.push(("threads".into(), t.to_string()));
        }
        let mut config = RunConfig::default();
        for (k, v) in &explicit {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(Setup { config, explicit })
    }

    /// The run configuration with the model and training settings of a
    /// checkpoint; explicitly set training keys still apply.
    fn with_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<RunConfig> {
        for (k, v) in &self.explicit {
            RunConfig::set_train_key(&mut ckpt.train, k, v)?;
        }
        ckpt.train.validate()?;
        Ok(RunConfig {
            model: ckpt.model.config.clone(),
            train: ckpt.train.clone(),
            ..self.config.clone()
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config echo for a directory output.
fn echo_into(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join("config.txt"), cfg.echo())
}

/// Config echo beside a file output: `x.csv` gets `x.config.txt`.
fn echo_beside(file: &Path, cfg: &RunConfig) -> Result<()> {
    write(&file.with_extension("config.txt"), cfg.echo())
}

fn render_settings(cfg: &RunConfig, ds: &Dataset) -> RenderSettings {
    RenderSettings {
        background: ds.background(),
        ..cfg.train.render.clone()
    }
}

fn check_frame(ds: &Dataset, frame: usize) -> Result<()> {
    if frame >= ds.n_frames() {
        return Err(Error::Config(format!("frame {frame} out of range (dataset has {})", ds.n_frames())));
    }
    Ok(())
}

fn check_camera(ds: &Dataset, cam: usize) -> Result<()> {
    if cam >= ds.cameras.len() {
        return Err(Error::Config(format!("unknown camera id {cam} (dataset has {})", ds.cameras.len())));
    }
    Ok(())
}

fn write_sequence(dir: &Path, images: &[Image]) -> Result<()> {
    create_dir(dir)?;
    for (i, img) in images.iter().enumerate() {
        img.write_ppm(&dir.join(format!("{i:03}.ppm")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let setup = Setup::new(&cli)?;
    let cfg = &setup.config;
    if cfg.threads > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Synth { out } => {
            let ds = generate_dataset(&cfg.data.scene(), &cfg.data, &out)?;
            echo_into(&out, cfg)?;
            eprintln!(
                "wrote {} cameras x {} frames to {}",
                ds.cameras.len(),
                ds.n_frames(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            conditioning,
            resume,
        } => {
            let ds = Dataset::load(&data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let mut ckpt = Checkpoint::load(&path)?;
                    let resolved = setup.with_checkpoint(&mut ckpt)?;
                    echo_into(&out, &resolved)?;
                    Trainer::resume(&ds, ckpt)?
                }
                None => {
                    let mut resolved = cfg.clone();
                    if let Some(c) = conditioning {
                        resolved.model.conditioning = c;
                    }
                    echo_into(&out, &resolved)?;
                    let model = Model::init(resolved.model.clone(), resolved.train.seed)?;
                    Trainer::new(&ds, model, resolved.train.clone())?
                }
            };
            let until = trainer.config.iters;
            let rows = trainer.run(until, Some(&out))?;
            if let Some(last) = rows.last() {
                eprintln!("iteration {}: loss {}", last.iter, last.loss.total);
            }
        }
        Command::Render {
            model,
            camera,
            frame,
            mode,
            out,
        } => {
            let mut ckpt = Checkpoint::load(&model.ckpt)?;
            let resolved = setup.with_checkpoint(&mut ckpt)?;
            let ds = Dataset::load(&model.data)?;
            check_camera(&ds, camera)?;
            check_frame(&ds, frame)?;
            let mut settings = render_settings(&resolved, &ds);
            if let Some(m) = mode {
                settings.mode = m;
            }
            let img = render_view(&ckpt.model, &ds, frame, camera, &settings, resolved.train.tile)?;
            create_dir(&out)?;
            img.coarse.write_ppm(&out.join("coarse.ppm"))?;
            img.fine.write_ppm(&out.join("fine.ppm"))?;
            let (w, h) = (img.fine.width, img.fine.height);
            write(&out.join("alpha.fimg"), encode_float_channels(w, h, &[&img.alpha])?)?;
            write(&out.join("depth.fimg"), encode_float_channels(w, h, &[&img.depth])?)?;
            echo_into(&out, &resolved)?;
        }
        Command::Eval { model, split, out } => {
            let mut ckpt = Checkpoint::load(&model.ckpt)?;
            let resolved = setup.with_checkpoint(&mut ckpt)?;
            let ds = Dataset::load(&model.data)?;
            let cams = match split {
                Split::Test => ds.test.clone(),
                Split::Train => ds.train.clone(),
            };
            let frames: Vec<usize> = (0..ds.n_frames()).collect();
            let summary = evaluate_views(
                &ckpt.model,
                &ds,
                &frames,
                &cams,
                &render_settings(&resolved, &ds),
                resolved.train.tile,
            )?;
            write(&out, summary.csv())?;
            echo_beside(&out, &resolved)?;
            eprintln!("mean psnr {:.2} dB, ssim {:.4}", summary.mean.psnr, summary.mean.ssim);
        }
        Command::Bench { model, out } => {
            let mut ckpt = Checkpoint::load(&model.ckpt)?;
            let resolved = setup.with_checkpoint(&mut ckpt)?;
            let ds = Dataset::load(&model.data)?;
            let n = resolved.experiment.bench_frames.clamp(1, ds.n_frames());
            let views: Vec<(usize, usize)> = (0..n)
                .map(|i| i * ds.n_frames() / n)
                .flat_map(|f| ds.test.iter().map(move |&c| (f, c)))
                .collect();
            let rows = benchmark_strategies(
                &ckpt.model,
                &ds,
                &views,
                &render_settings(&resolved, &ds),
                resolved.train.tile,
            )?;
            write(&out, bench_csv(&rows))?;
            echo_beside(&out, &resolved)?;
        }
        Command::Seqlen { data, out } => {
            let ds = Dataset::load(&data)?;
            let e = &cfg.experiment;
            if let Some(&len) = e.seqlen_lengths.iter().find(|&&l| l > ds.n_frames()) {
                return Err(Error::Config(format!(
                    "sequence length {len} exceeds the dataset's {} frames",
                    ds.n_frames()
                )));
            }
            let rows = seqlen_sweep(
                &ds,
                &cfg.model,
                &cfg.train,
                &e.seqlen_lengths,
                e.seqlen_iters,
                cfg.train.seed,
                |r, _| eprintln!("{} {}: mse {:.3}, ssim {:.4}", r.mode, r.seq_len, r.mse, r.ssim),
            )?;
            write(&out, seqlen_csv(&rows))?;
            echo_beside(&out, cfg)?;
        }
        Command::Animate {
            model,
            camera,
            out,
            kind,
        } => {
            let mut ckpt = Checkpoint::load(&model.ckpt)?;
            let resolved = setup.with_checkpoint(&mut ckpt)?;
            let ds = Dataset::load(&model.data)?;
            let cam = camera.unwrap_or(ds.test[0]);
            check_camera(&ds, cam)?;
            let settings = render_settings(&resolved, &ds);
            let tile = resolved.train.tile;
            let m = &ckpt.model;
            let images = match kind {
                Animation::Interp { frame_a, frame_b, steps } => {
                    check_frame(&ds, frame_a)?;
                    check_frame(&ds, frame_b)?;
                    if steps < 2 {
                        return Err(Error::Config(format!("--steps must be at least 2, got {steps}")));
                    }
                    animate_interp(m, &ds, (frame_a, frame_b), steps, cam, &settings, tile)?
                }
                Animation::Sample { n } => animate_sample(m, &ds, resolved.train.seed, n, cam, &settings, tile)?,
                Animation::Keypoints { kps_file } => {
                    let kps = kps_file.iter().map(|p| read_keypoints(p)).collect::<Result<Vec<_>>>()?;
                    animate_keypoints(m, &ds, &kps, cam, &settings, tile)?
                }
            };
            write_sequence(&out, &images)?;
            echo_into(&out, &resolved)?;
        }
        Command::Distill { model, out } => {
            let mut ckpt = Checkpoint::load(&model.ckpt)?;
            let resolved = setup.with_checkpoint(&mut ckpt)?;
            let ds = Dataset::load(&model.data)?;
            let history = distill_keypoint_encoder(&mut ckpt.model, &ds, &resolved.distill)?;
            let mut log = String::from("iter,latent_mse\n");
            for (i, v) in history.iter().enumerate() {
                log.push_str(&format!("{i},{v}\n"));
            }
            write(&out.join("distill.csv"), log)?;
            ckpt.save(&out.join("checkpoint.crfd"))?;
            echo_into(&out, &resolved)?;
            eprintln!("latent mse {} -> {}", history[0], history[history.len() - 1]);
        }
        Command::Finetune { model, scope, out } => {
            let mut ckpt = Checkpoint::load(&model.ckpt)?;
            let mut resolved = setup.with_checkpoint(&mut ckpt)?;
            if let Some(s) = scope {
                resolved.finetune.scope = s;
            }
            let novel = Dataset::load(&model.data)?;
            let report = finetune(ckpt.model, &novel, &resolved.train, &resolved.finetune)?;
            let mut log = String::from("step,total\n");
            for (i, l) in report.steps.iter().enumerate() {
                log.push_str(&format!("{i},{}\n", l.total));
            }
            write(&out.join("finetune.csv"), log)?;
            let result = Checkpoint {
                model: report.model,
                train: resolved.train.clone(),
                adam: AdamState::new(),
                iteration: 0,
            };
            result.save(&out.join("checkpoint.crfd"))?;
            echo_into(&out, &resolved)?;
            eprintln!("probe loss {} -> {}", report.before.total, report.after.total);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
