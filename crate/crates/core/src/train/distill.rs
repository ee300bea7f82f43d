use rand::Rng;

use super::adam::{AdamConfig, AdamState};
use super::inference::{conditioning_views, encode_mean, keypoint_tensor};
use super::trainer::Trainer;
use super::{Scope, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{keypoint_encoder, Model};
use crate::objectives::LossBreakdown;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub iters: u64,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { iters: 1500, lr: 1e-3 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub iters: u64,
    pub lr: f64,
    pub scope: Scope,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iters: 200,
            lr: 1e-4,
            scope: Scope::Encoder,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()
    }
}

/// Fit the keypoint encoder so that its code for each frame's keypoints
/// matches the image encoder's mean `μ` for that frame. Only `kps.`
/// parameters change. Returns the mean squared latent error before each
/// update and, last, after the final one.
pub fn distill_keypoint_encoder(model: &mut Model, dataset: &Dataset, cfg: &DistillConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.keypoints.len() != dataset.n_frames() || dataset.keypoints.iter().any(Vec::is_empty) {
        return Err(Error::invalid("distill_keypoint_encoder", "dataset has no keypoints"));
    }
    let targets: Vec<Vec<f64>> = (0..dataset.n_frames())
        .map(|f| Ok(encode_mean(model, &conditioning_views(dataset, &model.config, f)?)?.mu))
        .collect::<Result<_>>()?;
    let inputs: Vec<Tensor> = dataset.keypoints.iter().map(|k| keypoint_tensor(k)).collect::<Result<_>>()?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.iters as usize + 1);
    for it in 0..=cfg.iters {
        let tape = Tape::new();
        let pv = model.params.filter_prefix("kps.").register(&tape);
        let mut total: Option<Var<'_>> = None;
        for (pts, mu) in inputs.iter().zip(&targets) {
            let z = keypoint_encoder(&pv, &model.config, tape.constant(pts.clone()))?;
            let err = z.sub(tape.constant(Tensor::from_vec(mu.clone())))?.square().mean();
            total = Some(match total {
                Some(t) => t.add(err)?,
                None => err,
            });
        }
        let loss = total.expect("at least one frame").scale(1.0 / inputs.len() as f64);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("keypoint distillation loss at iteration {it}")));
        }
        history.push(value);
        if it == cfg.iters {
            break;
        }
        let grads = pv.gradients(&tape.backward(loss)?);
        adam.step(&adam_cfg, &mut model.params, &grads)?;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub model: Model,
    /// Loss on a fixed batch of the new sequence before and after.
    pub before: LossBreakdown,
    pub after: LossBreakdown,
    pub steps: Vec<LossBreakdown>,
}

/// Fit `model` to a new sequence. With [`Scope::Encoder`] the decoder and
/// scene MLP are frozen and only the image encoder moves.
pub fn finetune(model: Model, novel: &Dataset, train: &TrainConfig, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    cfg.validate()?;
    let seed = stream(train.seed, Stream::Finetune, 0).random();
    let config = TrainConfig {
        adam: AdamConfig {
            lr: cfg.lr,
            ..train.adam
        },
        iters: cfg.iters,
        seed,
        eval_every: 0,
        checkpoint_every: 0,
        ..train.clone()
    };
    let mut trainer = Trainer::new(novel, model, config)?.with_scope(cfg.scope);
    let before = trainer.probe()?;
    let mut steps = Vec::with_capacity(cfg.iters as usize);
    for _ in 0..cfg.iters {
        steps.push(trainer.step()?.loss);
    }
    let after = trainer.probe()?;
    Ok(FinetuneReport {
        model: trainer.model,
        before,
        after,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Conditioning;
    use crate::train::trainer::tests::{tiny_dataset, tiny_model, tiny_train};

    #[test]
    fn distillation_touches_only_keypoint_params() {
        let ds = tiny_dataset(3);
        let mut model = tiny_model(Conditioning::LocalCodes);
        let before = model.clone();
        let hist = distill_keypoint_encoder(&mut model, &ds, &DistillConfig { iters: 60, lr: 1e-2 }).unwrap();
        assert_eq!(hist.len(), 61);
        assert!(hist[60] < hist[0]);
        for (name, t) in before.params.iter() {
            let same = model.params.get(name).unwrap() == t;
            assert_eq!(same, !name.starts_with("kps."), "{name}");
        }
        let mut no_kps = ds.clone();
        no_kps.keypoints.iter_mut().for_each(Vec::clear);
        assert!(distill_keypoint_encoder(&mut model, &no_kps, &DistillConfig::default()).is_err());
    }

    #[test]
    fn encoder_scope_freezes_the_rest() {
        let ds = tiny_dataset(2);
        let model = tiny_model(Conditioning::LocalCodes);
        let cfg = FinetuneConfig {
            iters: 3,
            lr: 1e-3,
            scope: Scope::Encoder,
        };
        let rep = finetune(model.clone(), &ds, &tiny_train(), &cfg).unwrap();
        for (name, t) in model.params.iter() {
            let same = rep.model.params.get(name).unwrap() == t;
            assert_eq!(same, !name.starts_with("enc."), "{name}");
        }
        let full = finetune(model.clone(), &ds, &tiny_train(), &FinetuneConfig { scope: Scope::Full, ..cfg }).unwrap();
        for prefix in ["enc.", "dec.", "mlp."] {
            assert_ne!(full.model.params.filter_prefix(prefix), model.params.filter_prefix(prefix));
        }
    }
}
