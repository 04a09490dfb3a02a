//! Differentially private release of k sensitivity-1 queries with ℓ∞-error
//! mechanisms, privacy-budget accounting, and a Monte Carlo measurement
//! harness.
//!
//! The centerpiece is an iterative sparse-vector correction pipeline: answers
//! start unreleased, and geometrically shrinking stages of permuted
//! AboveThreshold selection re-release the coordinates whose residuals are
//! largest, with per-stage budgets chosen so the whole run composes to a
//! requested (ε, δ). Around it sit the classical baselines (Gaussian
//! mechanism, Laplace with advanced composition), a high-probability wrapper
//! that finishes with a sparse-vector corrector, an expected-error selector
//! over two independent runs, and a harness that measures ℓ∞ error against
//! the benchmark scale B(k, ε, δ) = (1/ε)·√(k·ln(1/δ)).
//!
//! Known limitation: noise is sampled in f64 with a non-cryptographic
//! generator; floating-point side channels are out of scope.

pub mod accounting;
pub mod error;
pub mod harness;
pub mod mechanisms;
pub mod noise;
pub mod sparse_vector;

pub use error::{Error, Result};
