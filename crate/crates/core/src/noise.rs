//! Sources of additive noise.
//!
//! Mechanisms draw through [`NoiseSource`] so that a run can be made
//! noise-free ([`ZeroNoise`]) or fed a fixed script of draws
//! ([`ScriptedNoise`]) without touching the estimation code.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;

pub trait NoiseSource {
    /// One draw from Laplace(0, scale).
    fn laplace(&mut self, scale: f64) -> f64;
    /// One draw from N(0, sigma²).
    fn gaussian(&mut self, sigma: f64) -> f64;
}

/// Draws from a random number generator.
#[derive(Debug)]
pub struct RngNoise<R>(pub R);

impl<R: Rng> NoiseSource for RngNoise<R> {
    fn laplace(&mut self, scale: f64) -> f64 {
        sample_laplace(&mut self.0, scale)
    }

    fn gaussian(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        sigma * self.0.sample::<f64, _>(StandardNormal)
    }
}

/// Every draw is zero; turns each mechanism into the identity.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn laplace(&mut self, _scale: f64) -> f64 {
        0.0
    }

    fn gaussian(&mut self, _sigma: f64) -> f64 {
        0.0
    }
}

/// Replays a fixed list of draws (already on the output scale), then
/// zeros once exhausted.
#[derive(Debug, Default, Clone)]
pub struct ScriptedNoise {
    draws: VecDeque<f64>,
}

impl ScriptedNoise {
    pub fn new(draws: impl IntoIterator<Item = f64>) -> Self {
        Self {
            draws: draws.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.draws.len()
    }
}

impl NoiseSource for ScriptedNoise {
    fn laplace(&mut self, _scale: f64) -> f64 {
        self.draws.pop_front().unwrap_or(0.0)
    }

    fn gaussian(&mut self, _sigma: f64) -> f64 {
        self.draws.pop_front().unwrap_or(0.0)
    }
}

/// Inverse-CDF Laplace sampler.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        if tail > 0.0 {
            return -scale * u.signum() * tail.ln();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn laplace_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let b = 0.7;
        let n = 1_000_000;
        let (mut s, mut a) = (0.0, 0.0);
        for _ in 0..n {
            let x = sample_laplace(&mut rng, b);
            s += x;
            a += x.abs();
        }
        let mean = s / n as f64;
        // E|X| = b is the maximum-likelihood scale estimate
        let scale = a / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((scale / b - 1.0).abs() < 0.02, "{scale}");
    }

    #[test]
    fn gaussian_std() {
        let mut src = RngNoise(ChaCha20Rng::seed_from_u64(5));
        let n = 200_000;
        let v: f64 = (0..n).map(|_| src.gaussian(2.0).powi(2)).sum::<f64>() / n as f64;
        assert!((v.sqrt() / 2.0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn scripted_then_zero() {
        let mut s = ScriptedNoise::new([1.0, -2.0]);
        assert_eq!(s.laplace(9.0), 1.0);
        assert_eq!(s.gaussian(9.0), -2.0);
        assert_eq!(s.gaussian(9.0), 0.0);
    }
}
