//! Seedable random numbers with a fully specified algorithm.
//!
//! The generator is xoshiro256++ seeded through SplitMix64 (the
//! `rand_xoshiro` `seed_from_u64` path). Everything derived from it is
//! defined here so that other implementations can reproduce a stream:
//!
//! - `uniform01`: top 53 bits of the next `u64`, times 2^-53, in [0, 1).
//! - `below(n)`: `(next_u64 as u128 * n) >> 64` (multiply-shift).
//! - `standard_normal`: Box–Muller. Two uniforms `u1 = 1 - uniform01()`
//!   (so `u1` is in (0, 1]) and `u2 = uniform01()` give
//!   `r = sqrt(-2 ln u1)`, `z0 = r cos(2π u2)`, `z1 = r sin(2π u2)`;
//!   `z0` is returned first and `z1` is cached for the next call.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable so checkpoints resume the exact stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRng {
    inner: Xoshiro256PlusPlus,
    cached_normal: Option<f64>,
}

impl SimRng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    /// Derive an independent child stream; used to hand sub-components
    /// their own generator without sharing state.
    pub fn fork(&mut self, salt: u64) -> Self {
        let s = self.next_u64() ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self::seed_from(s)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn standard_normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.standard_normal()).collect()
    }
}

/// Draw `w ~ N(mean, K² I)`, computed as `mean + K * z` with `z` standard
/// normal. This is the only place the latent noise scale enters sampling.
pub fn gaussian_sample(rng: &mut SimRng, mean: &[f64], scale: f64, dim: usize) -> Result<Vec<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be positive and finite, got {scale}"
        )));
    }
    crate::error::check_dim("gaussian mean", dim, mean.len())?;
    let z = rng.standard_normal_vec(dim);
    Ok(shift_scale(mean, scale, &z))
}

/// `mean + scale * z`: the reparameterised form shared by both sampling
/// modes so that a common base draw `z` yields comparable actions.
#[inline]
pub fn shift_scale(mean: &[f64], scale: f64, z: &[f64]) -> Vec<f64> {
    mean.iter().zip(z).map(|(m, zi)| m + scale * zi).collect()
}
