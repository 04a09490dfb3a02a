//! Seedable randomness for the mechanisms: Laplace and Gaussian samplers,
//! uniform permutations, and a zero-noise mode that makes whole pipelines
//! deterministic for oracle tests.
//!
//! The generator is ChaCha8 (`rand_chacha`), which produces identical output
//! on every platform for a given seed. Per-trial sources share a master seed
//! and differ only in the ChaCha stream id, so parallel trials reproduce
//! bit-for-bit regardless of scheduling.
//!
//! This is not cryptographically hardened randomness and no floating-point
//! attack mitigations are applied; the samplers target statistical fidelity
//! and reproducibility, not adversarial robustness.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Pr[X >= t] for X ~ Laplace(0, scale).
pub(crate) fn laplace_upper_tail(t: f64, scale: f64) -> f64 {
    if t >= 0.0 {
        0.5 * (-t / scale).exp()
    } else {
        1.0 - 0.5 * (t / scale).exp()
    }
}

/// Whether a source draws real noise or behaves as the zero oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Random,
    /// Every Laplace/Gaussian draw is exactly 0 and every permutation is the
    /// identity. No generator state is consumed.
    Zero,
}

/// Deterministic noise supply for one sequential computation.
///
/// Two sources with equal seed, mode, and call sequence produce identical
/// outputs. A source is single-threaded; create one per trial via
/// [`NoiseSource::for_trial`].
#[derive(Clone, Debug)]
pub struct NoiseSource {
    mode: NoiseMode,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64, mode: NoiseMode) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn random(seed: u64) -> Self {
        Self::new(seed, NoiseMode::Random)
    }

    /// The zero-noise oracle.
    pub fn zero() -> Self {
        Self::new(0, NoiseMode::Zero)
    }

    /// Per-trial source: same master seed, ChaCha stream id = trial index.
    /// Safe to call concurrently from many threads (it is a pure function of
    /// its arguments); the returned source itself is single-threaded.
    pub fn for_trial(master_seed: u64, mode: NoiseMode, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream);
        Self { mode, rng }
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn is_zero(&self) -> bool {
        self.mode == NoiseMode::Zero
    }

    /// Child source seeded from this source's stream, for sub-computations
    /// that must use noise independent of each other.
    pub fn substream(&mut self) -> NoiseSource {
        match self.mode {
            NoiseMode::Zero => NoiseSource::zero(),
            NoiseMode::Random => NoiseSource::random(self.rng.next_u64()),
        }
    }

    /// Uniform draw from the open interval (0, 1). The grid is
    /// (i + 0.5) / 2^53, so neither endpoint is reachable. Callers must not
    /// use this in zero mode.
    pub(crate) fn open_unit(&mut self) -> f64 {
        debug_assert!(!self.is_zero());
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Draw from the Laplace distribution with density (1/2b)·exp(−|x|/b),
    /// b = `scale`, via the inverse CDF on an open-interval uniform.
    pub fn laplace(&mut self, scale: f64) -> Result<f64> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "laplace scale must be positive and finite, got {scale}"
            )));
        }
        if self.is_zero() {
            return Ok(0.0);
        }
        let v = self.open_unit() - 0.5;
        Ok(-scale * v.signum() * (1.0 - 2.0 * v.abs()).ln())
    }

    /// Bernoulli draw; `p` is clamped to [0, 1]. Callers must not use this in
    /// zero mode.
    pub(crate) fn bernoulli(&mut self, p: f64) -> bool {
        self.open_unit() < p
    }

    /// Draw from a centered normal with standard deviation `sigma`
    /// (Box-Muller; the sine mate is discarded).
    pub fn gaussian(&mut self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "gaussian sigma must be positive and finite, got {sigma}"
            )));
        }
        if self.is_zero() {
            return Ok(0.0);
        }
        let u1 = self.open_unit();
        let u2 = self.open_unit();
        Ok(sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
    }

    /// Uniform index in [0, bound). Returns 0 in zero mode, which is what
    /// makes zero-mode permutations the identity.
    pub fn uniform_index(&mut self, bound: usize) -> Result<usize> {
        if bound == 0 {
            return Err(Error::invalid("uniform_index bound must be at least 1"));
        }
        if self.is_zero() {
            return Ok(0);
        }
        Ok(self.rng.gen_range(0..bound))
    }

    /// Uniform permutation of {0, .., k−1} by Fisher-Yates; identity in zero
    /// mode.
    pub fn permutation(&mut self, k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::invalid("permutation length must be at least 1"));
        }
        let mut p: Vec<usize> = (0..k).collect();
        if self.is_zero() {
            return Ok(p);
        }
        for j in (1..k).rev() {
            let r = self.rng.gen_range(0..=j);
            p.swap(j, r);
        }
        Ok(p)
    }
}
