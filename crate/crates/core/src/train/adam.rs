use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "adam needs lr > 0, betas in [0, 1), eps > 0 (got {} {} {} {})",
                self.lr, self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// First and second moments, created on a parameter's first gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every parameter named in `grads`.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads.iter() {
            let shape = g.shape().to_vec();
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(shape.clone()))?;
                self.v.insert(name, Tensor::zeros(shape.clone()))?;
            }
            let mut m = self.m.get(name)?.data().to_vec();
            let mut v = self.v.get(name)?.data().to_vec();
            let mut p = params.get(name)?.data().to_vec();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(&mut m).zip(&mut v).zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            self.m.set(name, Tensor::new(shape.clone(), m)?)?;
            self.v.set(name, Tensor::new(shape.clone(), v)?)?;
            params.set(name, Tensor::new(shape, p)?)?;
        }
        Ok(())
    }
}
