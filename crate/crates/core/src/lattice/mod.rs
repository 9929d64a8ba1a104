//! Lattice description, disorder realizations and Hamiltonian construction.
//!
//! Sites are zero-based: site `0` is the coding qubit and site `L-1` carries
//! the reset element.

mod basis;
mod hamiltonian;
mod matrix;

pub use basis::{Basis, FockBasis};
pub use hamiltonian::{
    build_bose_hubbard, build_bose_hubbard_rotating, build_effective_nonhermitian,
    build_effective_propagation, build_site_operator, build_total_number, NonHermitianKind,
    SiteOperatorKind,
};
pub use matrix::{CsrMatrix, OperatorMatrix, DENSE_THRESHOLD, HERMITIAN_TOLERANCE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest Hilbert-space dimension the builders accept.
pub const MAX_DIMENSION: usize = 531_441;

/// Parameters of a transmon array. Frequencies are angular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub length: usize,
    pub local_dim: usize,
    pub mean_frequency: f64,
    pub mean_anharmonicity: f64,
    pub hopping: f64,
    pub disorder: f64,
}

impl LatticeSpec {
    /// A qutrit array of `length` sites.
    pub fn new(
        length: usize,
        mean_frequency: f64,
        mean_anharmonicity: f64,
        hopping: f64,
        disorder: f64,
    ) -> Result<Self> {
        let spec = LatticeSpec {
            length,
            local_dim: 3,
            mean_frequency,
            mean_anharmonicity,
            hopping,
            disorder,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Overrides the local truncation.
    pub fn with_local_dim(mut self, local_dim: usize) -> Result<Self> {
        self.local_dim = local_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.length == 0 {
            return bad("length must be at least 1");
        }
        if self.local_dim < 3 {
            return bad("local dimension must be at least 3");
        }
        if !(self.mean_anharmonicity > 0.0) {
            return bad("mean anharmonicity must be positive");
        }
        if !(self.hopping >= 0.0) || !self.hopping.is_finite() {
            return bad("hopping must be finite and non-negative");
        }
        if !(self.disorder >= 0.0) || !self.disorder.is_finite() {
            return bad("disorder strength must be finite and non-negative");
        }
        if !self.mean_frequency.is_finite() {
            return bad("mean frequency must be finite");
        }
        Ok(())
    }

    /// `d^L`, checked against [`MAX_DIMENSION`].
    pub fn dimension(&self) -> Result<usize> {
        let requested = (self.local_dim as u128).checked_pow(self.length as u32);
        match requested {
            Some(n) if n <= MAX_DIMENSION as u128 => Ok(n as usize),
            other => Err(Error::DimensionOverflow {
                requested: other.unwrap_or(u128::MAX),
                budget: MAX_DIMENSION,
            }),
        }
    }

    pub fn fock_basis(&self) -> Result<FockBasis> {
        self.dimension()?;
        Ok(FockBasis::new(self.length, self.local_dim))
    }

    /// Effective pair-hopping rate `J_prop = 2J²/Ū`.
    pub fn propagation_hopping(&self) -> f64 {
        2.0 * self.hopping * self.hopping / self.mean_anharmonicity
    }

    /// Energy of the second excited level, shared by every site.
    pub fn second_level_energy(&self) -> f64 {
        2.0 * self.mean_frequency - self.mean_anharmonicity
    }

    pub fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.length {
            Err(Error::InvalidSite {
                site,
                length: self.length,
            })
        } else {
            Ok(())
        }
    }
}

/// Site frequencies and anharmonicities with a common second-level energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderRealization {
    pub spec: LatticeSpec,
    /// `δω_ℓ = ω_ℓ - ω̄`.
    pub detunings: Vec<f64>,
    pub omegas: Vec<f64>,
    pub anharmonicities: Vec<f64>,
    /// Seed the realization was drawn from; `None` for explicit profiles.
    pub seed: Option<u64>,
}

impl DisorderRealization {
    /// Realization with explicitly given detunings `δω_ℓ`.
    pub fn from_detunings(spec: &LatticeSpec, detunings: &[f64]) -> Result<Self> {
        spec.validate()?;
        if detunings.len() != spec.length {
            return Err(Error::DimensionMismatch {
                expected: spec.length,
                found: detunings.len(),
            });
        }
        Ok(Self::assemble(spec, detunings.to_vec(), None))
    }

    fn assemble(spec: &LatticeSpec, detunings: Vec<f64>, seed: Option<u64>) -> Self {
        let omegas = detunings.iter().map(|d| spec.mean_frequency + d).collect();
        let anharmonicities = detunings
            .iter()
            .map(|d| spec.mean_anharmonicity + 2.0 * d)
            .collect();
        DisorderRealization {
            spec: spec.clone(),
            detunings,
            omegas,
            anharmonicities,
            seed,
        }
    }

    /// Largest violation of the common second-level energy.
    pub fn resonance_defect(&self) -> f64 {
        let e2 = self.spec.second_level_energy();
        self.omegas
            .iter()
            .zip(&self.anharmonicities)
            .map(|(w, u)| (2.0 * w - u - e2).abs())
            .fold(0.0, f64::max)
    }
}

/// Draws a disorder realization deterministically from `seed`.
pub fn realize_disorder(spec: &LatticeSpec, seed: u64) -> DisorderRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut real = realize_disorder_with(spec, &mut rng);
    real.seed = Some(seed);
    real
}

/// Draws `δω_ℓ` uniformly on `[-W/2, W/2]` from `rng`.
pub fn realize_disorder_with<R: Rng + ?Sized>(spec: &LatticeSpec, rng: &mut R) -> DisorderRealization {
    let detunings = (0..spec.length)
        .map(|_| spec.disorder * (rng.random::<f64>() - 0.5))
        .collect();
    DisorderRealization::assemble(spec, detunings, None)
}
