use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HvcmError, Result};

/// `views` perturbed copies of `sample`: additive `N(0, noise²)` noise, then
/// each coordinate zeroed independently with probability `mask_rate`.
pub fn augment_views<R: Rng + ?Sized>(
    sample: &[f64],
    views: usize,
    noise: f64,
    mask_rate: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if views < 2 {
        return Err(HvcmError::invalid("views", format!("{views} < 2")));
    }
    let normal = Normal::new(0.0, noise)
        .map_err(|e| HvcmError::invalid("aug_noise", e.to_string()))?;
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(HvcmError::invalid("mask_rate", format!("{mask_rate} outside [0, 1]")));
    }
    Ok((0..views)
        .map(|_| {
            sample
                .iter()
                .map(|&x| {
                    let v = if noise > 0.0 { x + normal.sample(rng) } else { x };
                    if mask_rate > 0.0 && rng.random::<f64>() < mask_rate {
                        0.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_op_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [1.0, -2.0, 3.5];
        let views = augment_views(&x, 4, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(views.len(), 4);
        assert!(views.iter().all(|v| v == &x));
    }

    #[test]
    fn deterministic_under_seed() {
        let x = [0.5; 8];
        let a = augment_views(&x, 3, 0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment_views(&x, 3, 0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_single_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_views(&[1.0], 1, 0.1, 0.0, &mut rng).is_err());
        assert!(augment_views(&[1.0], 2, 0.1, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mean_absolute_deviation_matches_folded_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = vec![2.0; 1000];
        let views = augment_views(&x, 20, 0.1, 0.0, &mut rng).unwrap();
        let mad = views
            .iter()
            .flat_map(|v| v.iter().zip(&x).map(|(a, b)| (a - b).abs()))
            .sum::<f64>()
            / 20_000.0;
        // E|N(0, σ²)| = σ·sqrt(2/π) ≈ 0.0798 for σ = 0.1
        let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad - expected).abs() < 2e-3, "{mad}");
    }
}
