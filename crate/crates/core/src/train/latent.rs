use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// `steps` codes evenly spaced from `z_a` to `z_b`, both ends included.
pub fn latent_interpolate(z_a: &[f64], z_b: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    if steps < 2 {
        return Err(Error::invalid("latent_interpolate", format!("need at least 2 steps, got {steps}")));
    }
    if z_a.len() != z_b.len() {
        return Err(Error::shape(
            "latent_interpolate",
            format!("codes of length {} and {}", z_a.len(), z_b.len()),
        ));
    }
    Ok((0..steps)
        .map(|i| {
            let s = i as f64 / (steps - 1) as f64;
            z_a.iter().zip(z_b).map(|(a, b)| (1.0 - s) * a + s * b).collect()
        })
        .collect())
}

/// `n` codes drawn from the standard normal prior.
pub fn latent_sample(seed: u64, n: usize, z_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Sample, 0);
    (0..n)
        .map(|_| (0..z_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints() {
        let a = vec![0.3, -1.7, 2.0];
        let b = vec![1.1, 0.2, -5.0];
        assert_eq!(latent_interpolate(&a, &b, 2).unwrap(), vec![a.clone(), b.clone()]);
        let five = latent_interpolate(&a, &b, 5).unwrap();
        assert_eq!(five[0], a);
        assert_eq!(five[4], b);
        assert_eq!(latent_interpolate(&a, &a, 3).unwrap()[1], a);
        assert!(latent_interpolate(&a, &b, 1).is_err());
        assert!(latent_interpolate(&a, &b[..2], 3).is_err());
    }

    #[test]
    fn samples_have_unit_variance() {
        let z = latent_sample(4, 10_000, 8);
        for d in 0..8 {
            let mean = z.iter().map(|v| v[d]).sum::<f64>() / 1e4;
            let var = z.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / (1e4 - 1.0);
            assert!((var - 1.0).abs() < 0.05, "dim {d}: {var}");
            assert!(mean.abs() < 0.05);
        }
        assert_eq!(latent_sample(4, 3, 2), latent_sample(4, 3, 2));
    }
}
