//! Counter-addressed random stream.
//!
//! Draws come from ChaCha8 keyed by the seed; draw `i` is the 64-bit word at
//! stream position `i`, so `(seed, counter)` fully determines what comes
//! next. Gaussians use Box–Muller on two consecutive uniform draws (cosine
//! branch only), which keeps the counter arithmetic trivial: every Gaussian
//! costs exactly two draws. Changing any of this changes every seed's
//! meaning, so don't.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Serializable position of a [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    /// Stream positioned after `counter` draws.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        // two 32-bit words per draw
        inner.set_word_pos(u128::from(counter) * 2);
        Self {
            seed,
            counter,
            inner,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        Self::at(state.seed, state.counter)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            counter: self.counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    /// Uniform in the open interval (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Tensor of iid `N(mean, std²)` draws. `std = 0` gives `mean` exactly.
    pub fn sample_gaussian(&mut self, shape: impl Into<Vec<usize>>, mean: f64, std: f64) -> Result<Tensor> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian needs finite mean and std >= 0, got mean={mean} std={std}"
            )));
        }
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * self.next_gaussian()).collect();
        Tensor::new(shape, data)
    }

    /// `N(0, std²)` draw truncated to ±2·std by resampling.
    pub fn next_truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.next_gaussian();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_mean_exactly() {
        let t = RngStream::new(1).sample_gaussian([3, 2], 0.75, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn negative_std_errors() {
        assert!(RngStream::new(1).sample_gaussian([2], 0.0, -1.0).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = RngStream::new(9).sample_gaussian([64], 0.0, 0.25).unwrap();
        let b = RngStream::new(9).sample_gaussian([64], 0.0, 0.25).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn counter_advances_by_draws_and_repositions() {
        let mut r = RngStream::new(5);
        r.sample_gaussian([10], 0.0, 1.0).unwrap();
        assert_eq!(r.counter(), 20);
        let next = r.next_u64();
        let mut jumped = RngStream::at(5, 20);
        assert_eq!(jumped.next_u64(), next);
        assert_eq!(RngStream::from_state(r.state()).next_u64(), r.clone().next_u64());
    }

    #[test]
    fn routing_noise_std_matches_expert_count() {
        // std 1/E for E = 4
        let e = 4.0;
        let t = RngStream::new(3).sample_gaussian([20000], 0.0, 1.0 / e).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.25).abs() < 0.01, "std {}", var.sqrt());
    }
}
