use crate::error::{Error, Result};
use crate::C64;

use super::{Basis, DisorderRealization, FockBasis, LatticeSpec, OperatorMatrix};

/// Single-site operator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteOperatorKind {
    Annihilation,
    Creation,
    Number,
    /// `n(n-1)/2`, the leakage population of a site.
    LeakageNumber,
}

/// How the no-jump damping enters the effective Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonHermitianKind {
    /// `H - i(Γ/2) n_site`.
    Dissipation,
    /// `H - i(Γ/2) 1`: a complete projector set at rate Γ.
    FeedbackMeasurement,
}

fn real(v: f64) -> C64 {
    C64::new(v, 0.0)
}

fn bose_hubbard(real_: &DisorderRealization, frame: Option<f64>) -> Result<OperatorMatrix> {
    let spec = &real_.spec;
    let fock = spec.fock_basis()?;
    let d = spec.local_dim;
    let j = spec.hopping;
    let mut triplets = Vec::new();
    for idx in 0..fock.dimension() {
        let occ = fock.occupations(idx);
        let mut diag = 0.0;
        for (l, &n) in occ.iter().enumerate() {
            let n = n as f64;
            let w = match frame {
                Some(w0) => real_.detunings[l] + (spec.mean_frequency - w0),
                None => real_.omegas[l],
            };
            diag += w * n - 0.5 * real_.anharmonicities[l] * n * (n - 1.0);
        }
        if diag != 0.0 {
            triplets.push((idx, idx, real(diag)));
        }
        if j == 0.0 {
            continue;
        }
        for l in 0..spec.length.saturating_sub(1) {
            // a†_l a_{l+1} and its conjugate
            let (nl, nr) = (occ[l], occ[l + 1]);
            if nr > 0 && nl + 1 < d {
                let target = idx + fock.stride(l) - fock.stride(l + 1);
                let amp = j * ((nr as f64) * (nl as f64 + 1.0)).sqrt();
                triplets.push((target, idx, real(amp)));
                triplets.push((idx, target, real(amp)));
            }
        }
    }
    OperatorMatrix::from_triplets(
        Basis::Fock {
            sites: spec.length,
            local_dim: d,
        },
        triplets,
        true,
    )
}

/// Bose-Hubbard Hamiltonian
/// `Σ_ℓ [ω_ℓ n_ℓ - (U_ℓ/2) n_ℓ(n_ℓ-1)] + J Σ_ℓ (a†_ℓ a_{ℓ+1} + h.c.)`
/// with open boundaries.
pub fn build_bose_hubbard(real_: &DisorderRealization) -> Result<OperatorMatrix> {
    bose_hubbard(real_, None)
}

/// The Bose-Hubbard Hamiltonian in the frame rotating at `frame`, i.e.
/// `H - frame·N`. The detunings are used directly, which avoids cancelling
/// large GHz-scale numbers.
pub fn build_bose_hubbard_rotating(real_: &DisorderRealization, frame: f64) -> Result<OperatorMatrix> {
    bose_hubbard(real_, Some(frame))
}

/// Single-particle leakage propagation model
/// `J_prop (n_1 + n_L) - J_prop Σ (α†_ℓ α_{ℓ+1} + h.c.)`, `J_prop = 2J²/Ū`.
pub fn build_effective_propagation(real_: &DisorderRealization) -> Result<OperatorMatrix> {
    let spec = &real_.spec;
    let l = spec.length;
    let jp = spec.propagation_hopping();
    let mut triplets = vec![(0, 0, real(jp)), (l - 1, l - 1, real(jp))];
    for i in 0..l.saturating_sub(1) {
        triplets.push((i, i + 1, real(-jp)));
        triplets.push((i + 1, i, real(-jp)));
    }
    OperatorMatrix::from_triplets(Basis::LeakageParticle { sites: l }, triplets, true)
}

/// Non-Hermitian no-jump Hamiltonian for a reset channel of rate `rate` on
/// `reset_site`.
pub fn build_effective_nonhermitian(
    h: &OperatorMatrix,
    reset_site: usize,
    rate: f64,
    kind: NonHermitianKind,
) -> Result<OperatorMatrix> {
    let basis = h.basis();
    if reset_site >= basis.sites() {
        return Err(Error::InvalidSite {
            site: reset_site,
            length: basis.sites(),
        });
    }
    if !h.is_hermitian() {
        return Err(Error::NotHermitian);
    }
    if !(rate >= 0.0) {
        return Err(Error::InvalidParameter("rate must be non-negative".into()));
    }
    if rate == 0.0 {
        return Ok(h.clone());
    }
    let shift: Vec<C64> = match kind {
        NonHermitianKind::Dissipation => basis
            .excitation_number(reset_site)
            .into_iter()
            .map(|n| C64::new(0.0, -0.5 * rate * n))
            .collect(),
        NonHermitianKind::FeedbackMeasurement => vec![C64::new(0.0, -0.5 * rate); h.dimension()],
    };
    h.with_diagonal_shift(&shift)
}

/// Ladder, number or leakage-number operator acting on one site of a Fock
/// space.
pub fn build_site_operator(spec: &LatticeSpec, site: usize, kind: SiteOperatorKind) -> Result<OperatorMatrix> {
    spec.check_site(site)?;
    let fock: FockBasis = spec.fock_basis()?;
    let stride = fock.stride(site);
    let mut triplets = Vec::new();
    for idx in 0..fock.dimension() {
        let n = fock.occupation(idx, site);
        match kind {
            SiteOperatorKind::Annihilation => {
                if n > 0 {
                    triplets.push((idx - stride, idx, real((n as f64).sqrt())));
                }
            }
            SiteOperatorKind::Creation => {
                if n + 1 < fock.local_dim() {
                    triplets.push((idx + stride, idx, real((n as f64 + 1.0).sqrt())));
                }
            }
            SiteOperatorKind::Number => triplets.push((idx, idx, real(n as f64))),
            SiteOperatorKind::LeakageNumber => {
                triplets.push((idx, idx, real((n * n.saturating_sub(1)) as f64 / 2.0)))
            }
        }
    }
    let hermitian = matches!(kind, SiteOperatorKind::Number | SiteOperatorKind::LeakageNumber);
    OperatorMatrix::from_triplets(
        Basis::Fock {
            sites: spec.length,
            local_dim: spec.local_dim,
        },
        triplets,
        hermitian,
    )
}

/// Total excitation number `N = Σ_ℓ n_ℓ`.
pub fn build_total_number(spec: &LatticeSpec) -> Result<OperatorMatrix> {
    let fock = spec.fock_basis()?;
    let diag: Vec<C64> = (0..fock.dimension())
        .map(|i| real(fock.total_number(i) as f64))
        .collect();
    OperatorMatrix::diagonal(
        Basis::Fock {
            sites: spec.length,
            local_dim: spec.local_dim,
        },
        &diag,
    )
}
