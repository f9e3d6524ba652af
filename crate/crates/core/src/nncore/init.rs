use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DenseParams, Matrix};

/// The one RNG used everywhere: seedable, portable, and serializable.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child seed for component `stream` of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream.wrapping_add(1));
    rng.random()
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound))
}

pub fn glorot_uniform_init(fan_in: usize, fan_out: usize, seed: u64) -> DenseParams {
    DenseParams::glorot(fan_in, fan_out, &mut seeded_rng(seed))
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 - rate;
    Matrix::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_and_zero_bias() {
        let p = glorot_uniform_init(3, 3, 42);
        assert!(p.weights.iter().all(|w| w.abs() <= 1.0));
        assert!(p.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn glorot_is_deterministic() {
        assert_eq!(glorot_uniform_init(4, 7, 9), glorot_uniform_init(4, 7, 9));
        assert_ne!(glorot_uniform_init(4, 7, 9), glorot_uniform_init(4, 7, 10));
    }

    #[test]
    fn glorot_mean_is_centered() {
        let p = glorot_uniform_init(100, 100, 1);
        let bound = (6.0f64 / 200.0).sqrt();
        let mean = p.weights.mean().unwrap();
        assert_eq!(p.weights.len(), 10_000);
        assert!(mean.abs() < 0.02 * bound, "mean {mean}");
    }

    #[test]
    fn dropout_mask_values_and_rate() {
        let mut rng = seeded_rng(0);
        let m = dropout_mask(100, 100, 0.2, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 1e4;
        assert!((kept - 0.8).abs() < 0.02);
        assert_eq!(m, dropout_mask(100, 100, 0.2, &mut seeded_rng(0)));
    }
}
