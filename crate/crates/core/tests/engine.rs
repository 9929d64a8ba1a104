//! Trajectory ensembles against the dense master equation and each other.

mod common;

use common::{config, ideal};
use transmon_lru::channels::{NoiseModel, ResetChannel};
use transmon_lru::engine::{
    run_ensemble, run_ensemble_halves, run_trajectory, solve_master_dense, CodingState, JumpScheme,
    SimulationConfig,
};
use transmon_lru::Error;

/// Largest deviation in standard errors over the times where the reference
/// exceeds `floor`, with `slack` added to each standard error.
fn max_z(mean: &[f64], se: &[f64], reference: &[f64], floor: f64, slack: f64) -> f64 {
    mean.iter()
        .zip(se)
        .zip(reference)
        .filter(|(_, r)| **r > floor)
        .map(|((m, s), r)| (m - r).abs() / (s + slack))
        .fold(0.0, f64::max)
}

#[test]
fn first_order_scheme_matches_master_equation() {
    let spec = ideal(2, 20.0);
    let jp = spec.propagation_hopping();
    let mut cfg = config(spec, ResetChannel::random_feedback(2.0 * jp), CodingState::Ket2, 40.0, 800, 3, 40);
    cfg.jump_scheme = JumpScheme::FirstOrder;
    let obs = run_ensemble(&cfg).unwrap();
    let master = solve_master_dense(&cfg, &obs.time_grid).unwrap();
    let z = max_z(&obs.leakage_total.mean, &obs.leakage_total.standard_error, &master.leakage_total, 0.05, 1e-3);
    assert!(z < 5.0, "worst deviation {z:.2} standard errors");
}

#[test]
fn waiting_time_dissipation_matches_master_with_disorder() {
    let spec = transmon_lru::lattice::LatticeSpec::new(3, 0.0, 20.0, 1.0, 0.0).unwrap();
    let mut cfg = config(spec, ResetChannel::dissipation(0.3), CodingState::Ket2, 60.0, 1000, 11, 30);
    cfg.disorder_override = Some(vec![0.4, -0.2, 0.1]);
    let obs = run_ensemble(&cfg).unwrap();
    let master = solve_master_dense(&cfg, &obs.time_grid).unwrap();
    let z = max_z(&obs.leakage_total.mean, &obs.leakage_total.standard_error, &master.leakage_total, 0.05, 1e-3);
    assert!(z < 5.0, "worst deviation {z:.2} standard errors");
    for (s, (traj, dense)) in obs.occupations.iter().zip(&master.occupations).enumerate() {
        let worst = traj.iter().zip(dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 0.1, "site {s} occupation off by {worst}");
    }
}

#[test]
fn dephasing_envelope_matches_master_equation() {
    let spec = ideal(1, 20.0);
    let mut cfg = config(spec, ResetChannel::off(), CodingState::Plus, 4.0, 1000, 5, 20);
    cfg.noise = NoiseModel::from_times(f64::INFINITY, 1.5, 0.0);
    let obs = run_ensemble(&cfg).unwrap();
    let master = solve_master_dense(&cfg, &obs.time_grid).unwrap();
    let env = obs.coherence_envelope();
    for (k, c) in master.coherence_site1.iter().enumerate() {
        let err = (env[k] - 2.0 * c.norm()).abs();
        let tol = 5.0 * 2.0 * obs.coherence_modulus.standard_error[k] + 1e-3;
        assert!(err < tol, "t = {}: {} vs {}", obs.time_grid[k], env[k], 2.0 * c.norm());
    }
}

#[test]
fn same_seed_same_bits() {
    let spec = transmon_lru::lattice::LatticeSpec::new(3, 0.0, 20.0, 1.0, 2.0).unwrap();
    let mut cfg = config(spec, ResetChannel::periodic_feedback(0.2), CodingState::Ket2, 10.0, 48, 7, 10);
    cfg.jump_scheme = JumpScheme::FirstOrder;
    let a = run_ensemble(&cfg).unwrap();
    let b = run_ensemble(&cfg).unwrap();
    assert_eq!(a, b);
    cfg.master_seed = 8;
    let c = run_ensemble(&cfg).unwrap();
    assert_ne!(a.leakage_total.mean, c.leakage_total.mean);
}

#[test]
fn single_trajectories_are_reproducible() {
    let spec = transmon_lru::lattice::LatticeSpec::new(2, 0.0, 20.0, 1.0, 3.0).unwrap();
    let cfg = config(spec, ResetChannel::random_feedback(0.5), CodingState::Ket2, 20.0, 4, 1, 20);
    let a = run_trajectory(&cfg, 2).unwrap();
    let b = run_trajectory(&cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.leakage_total.len(), cfg.time_grid().len());
    assert_ne!(a.detunings, run_trajectory(&cfg, 3).unwrap().detunings);
}

#[test]
fn halves_bracket_the_full_ensemble() {
    let spec = ideal(2, 20.0);
    let cfg = config(spec, ResetChannel::dissipation(0.2), CodingState::Ket2, 30.0, 64, 2, 10);
    let (full, a, b) = run_ensemble_halves(&cfg).unwrap();
    assert_eq!(full.n_trajectories_used, 64);
    assert_eq!(a.n_trajectories_used + b.n_trajectories_used, 64);
    for k in 0..full.time_grid.len() {
        let avg = 0.5 * (a.leakage_total.mean[k] + b.leakage_total.mean[k]);
        assert!((avg - full.leakage_total.mean[k]).abs() < 1e-12);
    }
    let mut small = cfg.clone();
    small.n_trajectories = 16;
    assert!(matches!(run_ensemble_halves(&small), Err(Error::InvalidParameter(_))));
}

#[test]
fn leakage_stays_without_a_channel() {
    let spec = ideal(3, 20.0);
    let cfg = config(spec, ResetChannel::off(), CodingState::Ket2, 20.0, 16, 0, 10);
    let obs = run_ensemble(&cfg).unwrap();
    for l in &obs.leakage_total.mean {
        assert!(*l > 0.95, "leakage {l}");
    }
    assert_eq!(obs.mean_jumps, 0.0);
}

#[test]
fn invalid_configurations_are_rejected() {
    let base = SimulationConfig::new(ideal(2, 20.0), ResetChannel::dissipation(1.0), CodingState::Ket1);
    let mut c = base.clone();
    c.t_max = -1.0;
    assert!(run_ensemble(&c).is_err());
    let mut c = base.clone();
    c.n_trajectories = 0;
    assert!(run_ensemble(&c).is_err());
    let mut c = base.clone();
    c.channel.site = Some(5);
    assert!(matches!(run_ensemble(&c), Err(Error::InvalidSite { .. })));
    let mut c = base.clone();
    c.disorder_override = Some(vec![1.0]);
    assert!(run_ensemble(&c).is_err());
    let mut c = base;
    c.threads = Some(0);
    assert!(run_ensemble(&c).is_err());
}

#[test]
fn time_grid_ends_at_t_max() {
    let mut cfg = SimulationConfig::new(ideal(2, 20.0), ResetChannel::off(), CodingState::Ket1);
    cfg.t_max = 1.0;
    cfg.dt = 0.03;
    cfg.observable_stride = 4;
    let g = cfg.time_grid();
    assert_eq!(g[0], 0.0);
    assert_eq!(*g.last().unwrap(), 1.0);
    assert!(g.windows(2).all(|w| w[1] > w[0]));
    assert!((g[1] - 0.12).abs() < 1e-12);
}
