//! State vectors and time evolution under Hermitian and non-Hermitian
//! Hamiltonians.

mod exact;
mod krylov;
mod state;

pub use exact::{ExactPropagator, ModalState, StepOperator};
pub use krylov::{krylov_propagate, KrylovOptions};
pub use state::{StateVector, NORM_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::OperatorMatrix;

/// Largest dimension propagated by exact block diagonalization by default.
pub const EXACT_THRESHOLD: usize = 729;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMethod {
    Exact,
    Krylov,
}

/// Method selection for [`Propagator::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagatorOptions {
    pub exact_threshold: usize,
    pub krylov: KrylovOptions,
    /// Forces a method regardless of dimension.
    pub method: Option<PropagationMethod>,
}

impl Default for PropagatorOptions {
    fn default() -> Self {
        PropagatorOptions {
            exact_threshold: EXACT_THRESHOLD,
            krylov: KrylovOptions::default(),
            method: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Engine {
    Exact {
        exact: ExactPropagator,
        step: StepOperator,
    },
    Krylov(KrylovOptions),
}

/// Time evolution `ψ ↦ e^{-iHt}ψ` for a fixed Hamiltonian, with a cached
/// step of length `dt`.
#[derive(Debug, Clone)]
pub struct Propagator {
    h: OperatorMatrix,
    engine: Engine,
    dt: f64,
}

impl Propagator {
    pub fn new(h: &OperatorMatrix, dt: f64, options: PropagatorOptions) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter("time step must be positive".into()));
        }
        let method = options.method.unwrap_or(if h.dimension() <= options.exact_threshold {
            PropagationMethod::Exact
        } else {
            PropagationMethod::Krylov
        });
        if method == PropagationMethod::Exact && h.dimension() > options.exact_threshold.max(EXACT_THRESHOLD) {
            return Err(Error::InvalidParameter(format!(
                "exact propagation requested for dimension {} above threshold",
                h.dimension()
            )));
        }
        let engine = match method {
            PropagationMethod::Exact => {
                let exact = ExactPropagator::new(h);
                let step = exact.step_operator(dt);
                Engine::Exact { exact, step }
            }
            PropagationMethod::Krylov => Engine::Krylov(options.krylov),
        };
        Ok(Propagator {
            h: h.clone(),
            engine,
            dt,
        })
    }

    pub fn method(&self) -> PropagationMethod {
        match self.engine {
            Engine::Exact { .. } => PropagationMethod::Exact,
            Engine::Krylov(_) => PropagationMethod::Krylov,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn hamiltonian(&self) -> &OperatorMatrix {
        &self.h
    }

    /// The block decomposition, when the exact method is in use.
    pub fn exact(&self) -> Option<&ExactPropagator> {
        match &self.engine {
            Engine::Exact { exact, .. } => Some(exact),
            Engine::Krylov(_) => None,
        }
    }

    fn check(&self, psi: &StateVector) -> Result<()> {
        if psi.dim() != self.h.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.h.dimension(),
                found: psi.dim(),
            });
        }
        Ok(())
    }

    /// `e^{-iHt}ψ`.
    pub fn propagate(&self, psi: &StateVector, t: f64) -> Result<StateVector> {
        self.check(psi)?;
        let out = match &self.engine {
            Engine::Exact { exact, .. } => exact.propagate(psi.amplitudes(), t),
            Engine::Krylov(opts) => krylov_propagate(&self.h, psi.amplitudes(), t, opts)?,
        };
        Ok(StateVector::new(out))
    }

    /// One step of length `dt`, in place.
    pub fn step(&self, psi: &mut StateVector) -> Result<()> {
        self.check(psi)?;
        match &self.engine {
            Engine::Exact { step, .. } => step.apply(psi.amplitudes_mut()),
            Engine::Krylov(opts) => {
                let out = krylov_propagate(&self.h, psi.amplitudes(), self.dt, opts)?;
                psi.amplitudes_mut().copy_from_slice(&out);
            }
        }
        Ok(())
    }
}

/// Squared norm `⟨ψ(t)|ψ(t)⟩` of `ψ(t) = e^{-iH_eff t}ψ₀` on a time grid.
pub fn propagate_nonhermitian_norm(h_eff: &OperatorMatrix, psi0: &StateVector, t_grid: &[f64]) -> Result<Vec<f64>> {
    if psi0.dim() != h_eff.dimension() {
        return Err(Error::DimensionMismatch {
            expected: h_eff.dimension(),
            found: psi0.dim(),
        });
    }
    if h_eff.dimension() <= EXACT_THRESHOLD {
        let exact = ExactPropagator::new(h_eff);
        let modal = exact.to_modal(psi0.amplitudes());
        return Ok(t_grid.iter().map(|&t| exact.norm_sqr_at(&modal, t)).collect());
    }
    let opts = KrylovOptions::default();
    let mut out = Vec::with_capacity(t_grid.len());
    let mut psi = psi0.amplitudes().to_vec();
    let mut now = 0.0;
    for &t in t_grid {
        psi = krylov_propagate(h_eff, &psi, t - now, &opts)?;
        now = t;
        out.push(psi.iter().map(|a| a.norm_sqr()).sum());
    }
    Ok(out)
}
