//! Simulation and analytics for a passive leakage removal unit: a chain of
//! disordered three-level transmons whose second excited levels are tuned into
//! resonance, so that leakage hops freely towards a reset element on the last
//! site while single excitations stay localized on the coding qubit.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: disorder realizations, ladder operators and the
//!   Bose-Hubbard, effective-propagation and non-Hermitian Hamiltonians.
//! * [`propagator`]: state vectors and time evolution (exact block
//!   diagonalization or Krylov).
//! * [`channels`]: the last-site reset channels, background noise and thermal
//!   initial states.
//! * [`engine`]: trajectory ensembles and a dense Lindblad integrator.
//! * [`observables`]: leakage populations, coherence envelopes and
//!   exponential fits.
//! * [`analytics`]: closed-form rates, populations and norms.
//! * [`experiments`]: config-driven sweeps, result files and the CLI layer.
//!
//! A narrative guide lives in the `book/` directory of the repository; its
//! code snippets are compiled as doc-tests of this crate.

pub mod analytics;
pub mod channels;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod lattice;
pub mod observables;
pub mod propagator;
pub mod units;

pub use error::{Error, ErrorCategory, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/lattice.md")]
    pub struct Lattice;
    #[doc = include_str!("../../../book/src/propagation.md")]
    pub struct Propagation;
    #[doc = include_str!("../../../book/src/trajectories.md")]
    pub struct Trajectories;
    #[doc = include_str!("../../../book/src/analytics.md")]
    pub struct Analytics;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
