//! Central-difference verification of tape gradients.

mod suite;

pub use suite::{op_checks, render_loss_checks, tiny_render_config};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.register(&tape);
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::invalid("grad_check", "function must return a scalar"));
    }
    Ok(out.value().item())
}

/// Compare the tape gradient of `f` at `params` with central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` on every coordinate.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let tape = Tape::new();
        let vars = params.register(&tape);
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        let mut g = ParamStore::new();
        for (name, var) in vars.iter() {
            g.insert(name, grads.get(var))?;
        }
        g
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let shape = tensor.shape().to_vec();
        let base = tensor.data().to_vec();
        let g = analytic.get(name)?.data().to_vec();
        for i in 0..base.len() {
            let mut data = base.clone();
            data[i] = base[i] + eps;
            probe.set(name, Tensor::new(shape.clone(), data.clone())?)?;
            let plus = evaluate(&f, &probe)?;
            data[i] = base[i] - eps;
            probe.set(name, Tensor::new(shape.clone(), data)?)?;
            let minus = evaluate(&f, &probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = g[i].abs().max(numeric.abs()).max(ABS_FLOOR);
            let rel = (g[i] - numeric).abs() / denom;
            report.checked += 1;
            if !(rel <= report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = Some((name.to_string(), i));
            }
        }
        probe.set(name, Tensor::new(shape, base)?)?;
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::from_vec(vals.to_vec())).unwrap();
        s
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let r = grad_check(
            |_, p| Ok(p.get("theta")?.square().sum()),
            &store(&[0.3, -1.2, 2.5]),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = grad_check(
            |tape, p| {
                let x = p.get("theta")?;
                let value = x.value().map(|v| v * v);
                // Deliberately wrong: claims d(x²)/dx = x.
                let y = tape.custom(
                    value,
                    &[x],
                    Box::new(|ctx| {
                        vec![Some(
                            ctx.grad
                                .iter()
                                .zip(ctx.inputs[0].data())
                                .map(|(g, x)| g * x)
                                .collect(),
                        )]
                    }),
                );
                Ok(y.sum())
            },
            &store(&[0.7, 1.1]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(grad_check(|_, p| Ok(p.get("theta")?.sum()), &store(&[1.0]), 0.0, 1e-4).is_err());
    }
}
