//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

pub mod invariants;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use transmon_lru::channels::ResetChannel;
use transmon_lru::engine::{CodingState, JumpScheme, SimulationConfig};
use transmon_lru::lattice::LatticeSpec;
use transmon_lru::units::mhz_to_angular;

pub const I: C64 = C64::new(0.0, 1.0);

/// Hamiltonian of the two-excitation sector of two resonant qutrits in the
/// basis `|20⟩, |02⟩, |11⟩`, measured from `2ω̄`.
pub fn pair_hamiltonian(u: f64, j: f64) -> DMatrix<f64> {
    let c = -(2f64).sqrt() * j;
    DMatrix::from_row_slice(3, 3, &[-u, 0.0, c, 0.0, -u, c, c, c, 0.0])
}

/// `(ρ₂₀, ρ₀₂, ρ₁₁)` from a dense eigendecomposition of the 3×3 block.
pub fn pair_populations(u: f64, j: f64, t: f64, psi0: [f64; 3]) -> (f64, f64, f64) {
    let eig = pair_hamiltonian(u, j).symmetric_eigen();
    let v = &eig.eigenvectors;
    let c = v.transpose() * DVector::from_row_slice(&psi0);
    let mut out = [C64::new(0.0, 0.0); 3];
    for (k, ck) in c.iter().enumerate() {
        let ph = (-I * eig.eigenvalues[k] * t).exp() * *ck;
        for (r, o) in out.iter_mut().enumerate() {
            *o += v[(r, k)] * ph;
        }
    }
    (out[0].norm_sqr(), out[1].norm_sqr(), out[2].norm_sqr())
}

/// Vectorized generator of `ρ ↦ -i(Hρ - ρH†) + Σ AρA†` (column stacking).
pub fn superoperator(h: &DMatrix<C64>, kraus_like: &[DMatrix<C64>]) -> DMatrix<C64> {
    let n = h.nrows();
    let id = DMatrix::<C64>::identity(n, n);
    let mut l = -(id.kronecker(h) * I) + h.adjoint().transpose().kronecker(&id) * I;
    for a in kraus_like {
        l += a.conjugate().kronecker(a);
    }
    l
}

fn vec_of(m: &DMatrix<C64>) -> DVector<C64> {
    DVector::from_column_slice(m.as_slice())
}

/// Two-site effective leakage model: `H = -J_p(|0⟩⟨1| + h.c.)`, leakage
/// starting on site 0. Returns the leakage left at `t`.
pub fn effective_pair_leakage(feedback: bool, rate: f64, jp: f64, t: f64) -> f64 {
    let z = C64::new(0.0, 0.0);
    let mut h = DMatrix::from_row_slice(2, 2, &[z, C64::new(-jp, 0.0), C64::new(-jp, 0.0), z]);
    let l = if feedback {
        // measurement of the reset site keeps the leaked branch off it
        let p = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), z, z, z]);
        h -= DMatrix::<C64>::identity(2, 2) * (I * 0.5 * rate);
        superoperator(&h, &[p * C64::new(rate.sqrt(), 0.0)])
    } else {
        h[(1, 1)] = -I * rate;
        superoperator(&h, &[])
    };
    let rho0 = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), z, z, z]);
    let rho = (l * C64::new(t, 0.0)).exp() * vec_of(&rho0);
    (rho[0] + rho[3]).re
}

/// `‖e^{-iHt}|0⟩‖²` for `H = [[0, -J_p], [-J_p, -iΓ]]` by matrix exponential.
pub fn pair_decay_norm(rate: f64, jp: f64, t: f64) -> f64 {
    let z = C64::new(0.0, 0.0);
    let h = DMatrix::from_row_slice(2, 2, &[z, C64::new(-jp, 0.0), C64::new(-jp, 0.0), -I * rate]);
    let u = (h * (-I * t)).exp();
    u[(0, 0)].norm_sqr() + u[(1, 0)].norm_sqr()
}

/// Log-spaced values from `a` to `b`.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (a.ln() + (b.ln() - a.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `J`, `Ū`, `W` of the reference device in rad/µs.
pub fn reference_device(length: usize) -> LatticeSpec {
    LatticeSpec::new(
        length,
        mhz_to_angular(7500.0),
        mhz_to_angular(250.0),
        mhz_to_angular(5.0),
        mhz_to_angular(100.0),
    )
    .unwrap()
}

/// An ideal (disorder-free) array with `J = 1`.
pub fn ideal(length: usize, u_over_j: f64) -> LatticeSpec {
    LatticeSpec::new(length, 0.0, u_over_j, 1.0, 0.0).unwrap()
}

/// A configuration sampled at about `points` grid times.
pub fn config(
    spec: LatticeSpec,
    channel: ResetChannel,
    state: CodingState,
    t_max: f64,
    trajectories: usize,
    seed: u64,
    points: usize,
) -> SimulationConfig {
    let mut cfg = SimulationConfig::new(spec, channel, state);
    cfg.t_max = t_max;
    cfg.n_trajectories = trajectories;
    cfg.master_seed = seed;
    cfg.jump_scheme = JumpScheme::WaitingTime;
    cfg.observable_stride = ((t_max / (points as f64 * cfg.dt)).ceil() as usize).max(1);
    cfg
}
