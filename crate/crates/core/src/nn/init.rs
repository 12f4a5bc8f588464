//! Deterministic parameter initialisation.

use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kaiming (He) uniform bound for a ReLU network: `sqrt(6 / fan_in)`,
/// giving weight variance `2 / fan_in`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in.max(1) as f64)
}

pub fn kaiming_uniform(rng: &mut InitRng, fan_in: usize, count: usize) -> Vec<f64> {
    let b = kaiming_bound(fan_in);
    (0..count).map(|_| rng.gen_range(-b..b)).collect()
}

/// Uniform values in `[-scale, scale)`; used to build random test inputs.
pub fn uniform(rng: &mut InitRng, scale: f64, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.gen_range(-scale..scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = kaiming_uniform(&mut rng(7), 27, 50);
        let b = kaiming_uniform(&mut rng(7), 27, 50);
        assert_eq!(a, b);
        assert_ne!(a, kaiming_uniform(&mut rng(8), 27, 50));
    }

    #[test]
    fn kaiming_variance_matches_fan_in_formula() {
        let fan_in = 36;
        let w = kaiming_uniform(&mut rng(3), fan_in, 1000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = 2.0 / fan_in as f64;
        assert!((var / expected - 1.0).abs() < 0.2, "var {var} vs {expected}");
        assert!(w.iter().all(|v| v.abs() < kaiming_bound(fan_in)));
    }
}
