use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// Default half-width for recurrent and projection weights.
pub const INIT_SCALE: f64 = 0.08;

/// Draws `shape` entries uniformly from the open interval (-scale, scale).
pub fn init_uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    assert!(scale > 0.0, "init scale must be positive");
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-scale..scale);
            if v != -scale {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).expect("valid init shape")
}

/// Seeded form of [`init_uniform`].
pub fn init_params(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_uniform(shape, scale, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        assert_eq!(init_params(&[4, 5], 9, 0.08), init_params(&[4, 5], 9, 0.08));
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_params(&[16], 1, 0.08);
        let b = init_params(&[16], 2, 0.08);
        let same = a.values().iter().zip(b.values()).filter(|(x, y)| x == y).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn values_inside_open_interval() {
        let t = init_params(&[100, 100], 3, 0.5);
        assert!(t.values().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn empirical_mean_within_three_standard_errors() {
        let s = 0.08;
        let n = 10_000;
        let t = init_params(&[n], 17, s);
        let mean = t.values().iter().sum::<f64>() / n as f64;
        // variance of U(-s, s) is s^2 / 3
        let se = (s * s / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, 3se {}", 3.0 * se);
    }
}
