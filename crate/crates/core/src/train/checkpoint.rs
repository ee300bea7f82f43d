use std::path::Path;

use super::adam::AdamState;
use super::TrainConfig;
use crate::config::{list, model_entries, parse_pairs, parse_rgb, set_model, set_train, train_entries};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

const TRAILER: &str = "trailer\n";

/// Everything needed to resume training: the model, optimizer moments,
/// iteration counter and the configuration that produced them. Random
/// streams are keyed by the iteration, so no generator state is stored.
///
/// On disk: one parameter store (`model/`, `adam/m/`, `adam/v/` prefixes)
/// followed by `trailer` and `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub iteration: u64,
}

fn prefixed(store: &ParamStore, prefix: &str, out: &mut ParamStore) -> Result<()> {
    for (name, t) in store.iter() {
        out.insert(format!("{prefix}{name}"), t.clone())?;
    }
    Ok(())
}

fn strip(store: &ParamStore, prefix: &str) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, t.clone())?;
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all = ParamStore::new();
        // names are unique within each store, so prefixed inserts cannot clash
        prefixed(&self.model.params, "model/", &mut all).expect("unique names");
        prefixed(&self.adam.m, "adam/m/", &mut all).expect("unique names");
        prefixed(&self.adam.v, "adam/v/", &mut all).expect("unique names");
        let mut out = all.to_bytes();
        out.extend_from_slice(TRAILER.as_bytes());
        let mut entries = model_entries(&self.model.config);
        entries.extend(train_entries(&self.train));
        entries.push(("render_background", list(&self.train.render.background)));
        entries.push(("iteration", self.iteration.to_string()));
        entries.push(("adam_step", self.adam.step.to_string()));
        for (k, v) in entries {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let (all, used) = ParamStore::from_bytes(bytes, origin)?;
        let bad = |detail: String| Error::malformed(origin, detail);
        let rest = std::str::from_utf8(&bytes[used..]).map_err(|_| bad("trailer is not utf-8".into()))?;
        let text = rest
            .strip_prefix(TRAILER)
            .ok_or_else(|| bad("missing trailer".into()))?;
        let mut model_cfg = ModelConfig::default();
        let mut train = TrainConfig::default();
        let (mut iteration, mut adam_step) = (None, None);
        let origin_name = origin.display().to_string();
        for (k, v) in parse_pairs(text, &origin_name).map_err(|e| bad(e.to_string()))? {
            let known = match k.as_str() {
                "iteration" => {
                    iteration = Some(v.parse::<u64>().map_err(|_| bad(format!("bad iteration {v:?}")))?);
                    true
                }
                "adam_step" => {
                    adam_step = Some(v.parse::<u64>().map_err(|_| bad(format!("bad adam_step {v:?}")))?);
                    true
                }
                "render_background" => {
                    train.render.background = parse_rgb(&k, &v).map_err(|e| bad(e.to_string()))?;
                    true
                }
                _ => {
                    set_model(&mut model_cfg, &k, &v).map_err(|e| bad(e.to_string()))?
                        || set_train(&mut train, &k, &v).map_err(|e| bad(e.to_string()))?
                }
            };
            if !known {
                return Err(bad(format!("unknown trailer key `{k}`")));
            }
        }
        let iteration = iteration.ok_or_else(|| bad("trailer lacks iteration".into()))?;
        let adam_step = adam_step.ok_or_else(|| bad("trailer lacks adam_step".into()))?;
        model_cfg.validate().map_err(|e| bad(e.to_string()))?;
        train.validate().map_err(|e| bad(e.to_string()))?;

        let params = strip(&all, "model/")?;
        let reference = Model::init(model_cfg.clone(), 0)?;
        let shapes = |s: &ParamStore| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        if shapes(&params) != shapes(&reference.params) {
            return Err(bad("parameters do not match the recorded model configuration".into()));
        }
        let adam = AdamState {
            step: adam_step,
            m: strip(&all, "adam/m/")?,
            v: strip(&all, "adam/v/")?,
        };
        Ok(Checkpoint {
            model: Model {
                config: model_cfg,
                params,
            },
            train,
            adam,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let mut adam = AdamState::new();
        let mut params = model.params.clone();
        let mut grads = ParamStore::new();
        grads.insert("mlp.sigma.b", Tensor::from_vec(vec![0.3])).unwrap();
        adam.step(&Default::default(), &mut params, &grads).unwrap();
        Checkpoint {
            model: Model {
                config: model.config,
                params,
            },
            train: TrainConfig {
                iters: 77,
                ..TrainConfig::default()
            },
            adam,
            iteration: 12,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let bytes = sample().to_bytes();
        let p = Path::new("ck.crfd");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], p).is_err());
        let cut = bytes.windows(10).rposition(|w| w == b"iteration=").unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..cut], p).unwrap_err().to_string().contains("iteration"));
        let mut extra = bytes.clone();
        extra.extend_from_slice(b"mystery=1\n");
        assert!(Checkpoint::from_bytes(&extra, p).unwrap_err().to_string().contains("mystery"));
        let mut wrong = sample();
        wrong.model.config.mlp_width = 32;
        assert!(Checkpoint::from_bytes(&wrong.to_bytes(), p).is_err());
    }
}
