use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{FockBasis, OperatorMatrix};
use crate::C64;

/// Tolerance on `| ‖ψ‖² - 1 |` for the normalized flag.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Complex amplitude vector over a lattice basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    amplitudes: Vec<C64>,
    normalized: bool,
}

impl StateVector {
    pub fn new(amplitudes: Vec<C64>) -> Self {
        let mut s = StateVector {
            amplitudes,
            normalized: false,
        };
        s.normalized = (s.norm_sqr() - 1.0).abs() < NORM_TOLERANCE;
        s
    }

    /// `|index⟩` in a space of dimension `dim`.
    pub fn basis_state(dim: usize, index: usize) -> Self {
        let mut amplitudes = vec![C64::new(0.0, 0.0); dim];
        amplitudes[index] = C64::new(1.0, 0.0);
        StateVector {
            amplitudes,
            normalized: true,
        }
    }

    /// Fock state with the given occupations.
    pub fn fock(basis: &FockBasis, occupations: &[usize]) -> Self {
        Self::basis_state(basis.dimension(), basis.index_of(occupations))
    }

    /// Tensor product of single-site kets, site 0 first.
    pub fn product(basis: &FockBasis, locals: &[Vec<C64>]) -> Result<Self> {
        if locals.len() != basis.sites() {
            return Err(Error::DimensionMismatch {
                expected: basis.sites(),
                found: locals.len(),
            });
        }
        let mut amps = vec![C64::new(1.0, 0.0)];
        for local in locals {
            if local.len() != basis.local_dim() {
                return Err(Error::DimensionMismatch {
                    expected: basis.local_dim(),
                    found: local.len(),
                });
            }
            amps = amps
                .iter()
                .flat_map(|a| local.iter().map(move |b| a * b))
                .collect();
        }
        Ok(Self::new(amps))
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    /// Mutable access; clears the normalized flag.
    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        self.normalized = false;
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(C64::norm_sqr).sum()
    }

    /// Rescales to unit norm and returns the previous squared norm.
    pub fn normalize(&mut self) -> Result<f64> {
        let n2 = self.norm_sqr();
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(Error::InvalidParameter("cannot normalize a zero or non-finite state".into()));
        }
        let inv = 1.0 / n2.sqrt();
        for a in &mut self.amplitudes {
            *a *= inv;
        }
        self.normalized = true;
        Ok(n2)
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// `⟨ψ|M|ψ⟩` (not divided by the norm).
    pub fn expectation(&self, op: &OperatorMatrix) -> C64 {
        let y = op.apply_vec(&self.amplitudes);
        self.amplitudes.iter().zip(&y).map(|(a, b)| a.conj() * b).sum()
    }

    /// `Σ_i |ψ_i|² d_i` for a diagonal observable.
    pub fn expectation_diagonal(&self, diag: &[f64]) -> f64 {
        self.amplitudes
            .iter()
            .zip(diag)
            .map(|(a, d)| a.norm_sqr() * d)
            .sum()
    }

    /// `‖self - other‖`.
    pub fn distance(&self, other: &StateVector) -> f64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_ordering() {
        let b = FockBasis::new(2, 3);
        let zero = vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
        let two = vec![C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let s = StateVector::product(&b, &[two, zero]).unwrap();
        assert_eq!(s, StateVector::fock(&b, &[2, 0]));
        assert_eq!(s.amplitudes()[6], C64::new(1.0, 0.0));
    }

    #[test]
    fn normalization() {
        let mut s = StateVector::new(vec![C64::new(3.0, 0.0), C64::new(0.0, 4.0)]);
        assert!(!s.is_normalized());
        assert_eq!(s.normalize().unwrap(), 25.0);
        assert!(s.is_normalized());
        assert!(StateVector::new(vec![C64::new(0.0, 0.0)]).normalize().is_err());
    }
}
