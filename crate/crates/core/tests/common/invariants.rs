//! Invariant checks, each parameterized so that property tests can drive
//! them with random inputs and the acceptance run with fixed samples.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transmon_lru::channels::{
    apply_feedback_measurement, noise_jump_operators, sample_thermal_initial, site_probabilities, NoiseModel,
    ResetChannel,
};
use transmon_lru::engine::{
    run_ensemble, solve_master_dense, solve_master_dense_with, CodingState, MasterOptions, SimulationConfig,
};
use transmon_lru::lattice::{
    build_bose_hubbard, build_effective_nonhermitian, build_site_operator, build_total_number, realize_disorder,
    DisorderRealization, LatticeSpec, NonHermitianKind, OperatorMatrix, SiteOperatorKind,
};
use transmon_lru::observables::{fit_exponential, leakage_population, LeakageSites};
use transmon_lru::propagator::{
    krylov_propagate, ExactPropagator, KrylovOptions, Propagator, PropagatorOptions, StateVector,
};

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> StateVector {
    let amps = (0..dim)
        .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect();
    let mut s = StateVector::new(amps);
    s.normalize().unwrap();
    s
}

fn spec(length: usize, u: f64, w: f64) -> LatticeSpec {
    LatticeSpec::new(length, 0.0, u, 1.0, w).unwrap()
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Shared second-level energy and disorder bounds of a realization.
pub fn resonance(length: usize, w: f64, seed: u64) -> Check {
    let s = spec(length, 50.0, w);
    let r = realize_disorder(&s, seed);
    let e2 = 2.0 * s.mean_frequency - s.mean_anharmonicity;
    for l in 0..length {
        let defect = ((2.0 * r.omegas[l] - r.anharmonicities[l]) - e2).abs();
        ensure(defect < 1e-12, || format!("resonance defect {defect:e} at site {l}"))?;
        ensure((r.omegas[l] - s.mean_frequency).abs() <= w / 2.0, || "frequency outside W/2".into())?;
        ensure((r.anharmonicities[l] - s.mean_anharmonicity).abs() <= w, || "anharmonicity outside W".into())?;
    }
    Ok(())
}

/// `[H, N] = 0` and Hermiticity of the Bose-Hubbard Hamiltonian.
pub fn number_conservation(length: usize, w: f64, seed: u64) -> Check {
    let s = spec(length, 50.0, w);
    let h = build_bose_hubbard(&realize_disorder(&s, seed)).map_err(|e| e.to_string())?;
    let n = build_total_number(&s).map_err(|e| e.to_string())?;
    let (hd, nd) = (h.to_dense(), n.to_dense());
    let comm = max_abs(&(&hd * &nd - &nd * &hd));
    ensure(comm < 1e-10, || format!("‖HN - NH‖ = {comm:e}"))?;
    ensure(h.is_hermitian() && h.hermiticity_defect() < 1e-12, || "H not Hermitian".into())
}

/// Hermitian flags of the single-site operators are honest.
pub fn operator_flags(length: usize) -> Check {
    let s = spec(length, 50.0, 0.0);
    for site in 0..length {
        for kind in [
            SiteOperatorKind::Annihilation,
            SiteOperatorKind::Creation,
            SiteOperatorKind::Number,
            SiteOperatorKind::LeakageNumber,
        ] {
            let op = build_site_operator(&s, site, kind).map_err(|e| e.to_string())?;
            ensure(op.dimension() == 3usize.pow(length as u32), || "dimension is not d^L".into())?;
            if op.is_hermitian() {
                ensure(op.hermiticity_defect() < 1e-12, || format!("{kind:?} flagged but not Hermitian"))?;
            }
        }
    }
    Ok(())
}

/// Oscillation frequency of `|20⟩ ↔ |02⟩` under the full model equals
/// `2J_prop` within 2% at `Ū/J = 250`.
pub fn effective_hopping_frequency() -> Check {
    let s = spec(2, 250.0, 0.0);
    let h = build_bose_hubbard(&DisorderRealization::from_detunings(&s, &[0.0, 0.0]).unwrap()).unwrap();
    let fock = s.fock_basis().unwrap();
    let exact = ExactPropagator::new(&h);
    let psi = StateVector::fock(&fock, &[2, 0]);
    let modal = exact.to_modal(psi.amplitudes());
    let i02 = fock.index_of(&[0, 2]);
    let jp = s.propagation_hopping();
    // first maximum of |⟨02|ψ(t)⟩|² sits at half a period π/(2J_prop)
    let (mut best_t, mut best) = (0.0, 0.0);
    let t_end = 1.5 * std::f64::consts::PI / (2.0 * jp);
    let n = 30_000;
    let mut out = vec![C64::new(0.0, 0.0); fock.dimension()];
    for k in 0..=n {
        let t = t_end * k as f64 / n as f64;
        exact.evaluate(&modal, t, &mut out);
        let p = out[i02].norm_sqr();
        if p > best {
            best = p;
            best_t = t;
        }
    }
    let omega = std::f64::consts::PI / best_t;
    let rel = (omega / (2.0 * jp) - 1.0).abs();
    ensure(rel < 0.02, || format!("oscillation frequency off by {rel:.3}"))
}

fn hamiltonian(length: usize, seed: u64) -> (LatticeSpec, OperatorMatrix) {
    let s = spec(length, 20.0, 8.0);
    let h = build_bose_hubbard(&realize_disorder(&s, seed)).unwrap();
    (s, h)
}

/// Norm, energy and excitation number over `steps` Hermitian steps.
pub fn unitarity(length: usize, seed: u64, steps: usize) -> Check {
    let (s, h) = hamiltonian(length, seed);
    let n = build_total_number(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = random_state(h.dimension(), &mut rng);
    let prop = Propagator::new(&h, 0.05, PropagatorOptions::default()).map_err(|e| e.to_string())?;
    let e0 = psi.expectation(&h).re;
    let n0 = psi.expectation(&n).re;
    for _ in 0..steps {
        prop.step(&mut psi).map_err(|e| e.to_string())?;
    }
    let dn = (psi.norm_sqr().sqrt() - 1.0).abs();
    let de = ((psi.expectation(&h).re - e0) / e0.abs().max(1.0)).abs();
    let dnum = (psi.expectation(&n).re - n0).abs();
    ensure(dn < 1e-9, || format!("norm drift {dn:e}"))?;
    ensure(de < 1e-8, || format!("energy drift {de:e}"))?;
    ensure(dnum < 1e-8, || format!("excitation drift {dnum:e}"))
}

/// `U(t₁)U(t₂) = U(t₁ + t₂)`.
pub fn composition(length: usize, seed: u64, t1: f64, t2: f64) -> Check {
    let (_, h) = hamiltonian(length, seed);
    let exact = ExactPropagator::new(&h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let psi = random_state(h.dimension(), &mut rng);
    let a = exact.propagate(&exact.propagate(psi.amplitudes(), t1), t2);
    let b = exact.propagate(psi.amplitudes(), t1 + t2);
    let d = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    ensure(d < 1e-8, || format!("composition defect {d:e}"))
}

/// Krylov against eigendecomposition over `steps` steps of length `dt`.
pub fn krylov_agreement(length: usize, seed: u64, dt: f64, steps: usize) -> Result<f64, String> {
    let (_, h) = hamiltonian(length, seed);
    let exact = ExactPropagator::new(&h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
    let psi0 = random_state(h.dimension(), &mut rng);
    let opts = KrylovOptions::default();
    let mut psi = psi0.amplitudes().to_vec();
    let mut worst: f64 = 0.0;
    for k in 1..=steps {
        psi = krylov_propagate(&h, &psi, dt, &opts).map_err(|e| e.to_string())?;
        let reference = exact.propagate(psi0.amplitudes(), k as f64 * dt);
        let d = psi.iter().zip(&reference).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// The no-jump norm never grows.
pub fn nonhermitian_decay(length: usize, seed: u64, rate: f64) -> Check {
    let (s, h) = hamiltonian(length, seed);
    let heff = build_effective_nonhermitian(&h, s.length - 1, rate, NonHermitianKind::Dissipation).unwrap();
    let exact = ExactPropagator::new(&heff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modal = exact.to_modal(random_state(h.dimension(), &mut rng).amplitudes());
    let mut last = 1.0 + 1e-12;
    for k in 0..200 {
        let n = exact.norm_sqr_at(&modal, 0.05 * k as f64);
        ensure(n <= last + 1e-12, || format!("norm grew from {last} to {n}"))?;
        last = n;
    }
    Ok(())
}

/// A feedback measurement leaves the measured site empty.
pub fn feedback_empties_site(length: usize, site: usize, seed: u64) -> Check {
    let s = spec(length, 50.0, 0.0);
    let fock = s.fock_basis().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = random_state(fock.dimension(), &mut rng);
    let (out, _) = apply_feedback_measurement(&psi, &fock, site, &mut rng).map_err(|e| e.to_string())?;
    let p = site_probabilities(out.amplitudes(), &fock, site);
    ensure(p[1] == 0.0 && p[2] == 0.0, || format!("site {site} keeps population {p:?}"))
}

/// Outcome frequencies of feedback measurements follow the Born rule
/// (chi-square with two degrees of freedom at p = 0.001).
pub fn born_statistics(seed: u64, samples: usize) -> Check {
    let s = spec(2, 50.0, 0.0);
    let fock = s.fock_basis().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = random_state(fock.dimension(), &mut rng);
    let probs = site_probabilities(psi.amplitudes(), &fock, 1);
    let mut counts = [0usize; 3];
    for _ in 0..samples {
        let (_, k) = apply_feedback_measurement(&psi, &fock, 1, &mut rng).map_err(|e| e.to_string())?;
        counts[k] += 1;
    }
    let chi2: f64 = (0..3)
        .map(|k| {
            let e = probs[k] * samples as f64;
            (counts[k] as f64 - e).powi(2) / e
        })
        .sum();
    ensure(chi2 < 13.816, || format!("chi-square {chi2:.2} for counts {counts:?} and p {probs:?}"))
}

/// `Σ δp_k + ‖no-jump branch‖² = 1` within `10·dt²` for one step.
pub fn jump_probability_budget(seed: u64, dt: f64) -> Check {
    let s = spec(2, 20.0, 4.0);
    let real = realize_disorder(&s, seed);
    let h = build_bose_hubbard(&real).unwrap();
    let noise = NoiseModel {
        relaxation_rate: 0.3,
        dephasing_rate: 0.2,
        temperature: 0.0,
    };
    let mut ops = noise_jump_operators(&noise, &s).unwrap();
    let gamma: f64 = 0.7;
    ops.push(
        build_site_operator(&s, 1, SiteOperatorKind::Annihilation)
            .unwrap()
            .scale(C64::new(gamma.sqrt(), 0.0)),
    );
    let mut heff = h.clone();
    for l in &ops {
        let ll = l.adjoint().matmul(l).unwrap().scale(C64::new(0.0, -0.5));
        heff = heff.add(&ll).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = random_state(h.dimension(), &mut rng);
    let jumps: f64 = ops
        .iter()
        .map(|l| dt * l.apply_vec(psi.amplitudes()).iter().map(C64::norm_sqr).sum::<f64>())
        .sum();
    let no_jump = ExactPropagator::new(&heff).propagate(psi.amplitudes(), dt);
    let total = jumps + no_jump.iter().map(C64::norm_sqr).sum::<f64>();
    let defect = (total - 1.0).abs();
    ensure(defect < 10.0 * dt * dt, || format!("probability defect {defect:e} at dt {dt}"))
}

/// At `J = 0` the thermal sampler is product-form: occupations of two idle
/// sites are uncorrelated.
pub fn thermal_product_form(seed: u64, samples: usize) -> Check {
    let s = LatticeSpec::new(3, 2.0 * std::f64::consts::PI * 1500.0, 2.0 * std::f64::consts::PI * 250.0, 0.0, 0.0)
        .unwrap();
    let real = realize_disorder(&s, seed);
    let noise = NoiseModel::from_times(f64::INFINITY, f64::INFINITY, 0.15);
    let coding = CodingState::Ket0.amplitudes(3);
    let n1 = build_site_operator(&s, 1, SiteOperatorKind::Number).unwrap();
    let n2 = build_site_operator(&s, 2, SiteOperatorKind::Number).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b, mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..samples {
        let psi = sample_thermal_initial(&real, &noise, &coding, &mut rng).unwrap();
        let x = psi.expectation(&n1).re;
        let y = psi.expectation(&n2).re;
        a += x;
        b += y;
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let n = samples as f64;
    let (ma, mb) = (a / n, b / n);
    let cov = ab / n - ma * mb;
    let se = ((aa / n - ma * ma) * (bb / n - mb * mb) / n).sqrt();
    ensure(ma > 0.0 && mb > 0.0, || "no thermal population drawn".into())?;
    ensure(cov.abs() < 5.0 * se, || format!("covariance {cov:e} vs standard error {se:e}"))
}

fn small_ensemble(seed: u64, trajectories: usize) -> SimulationConfig {
    let s = spec(3, 20.0, 6.0);
    let mut cfg = SimulationConfig::new(s, ResetChannel::periodic_feedback(0.3), CodingState::Plus);
    cfg.noise = NoiseModel::from_times(60.0, 40.0, 0.0);
    cfg.t_max = 20.0;
    cfg.observable_stride = 100;
    cfg.n_trajectories = trajectories;
    cfg.master_seed = seed;
    cfg
}

/// Ensemble means are bitwise identical for 1 and several worker threads.
pub fn parallel_determinism(seed: u64, threads: usize) -> Check {
    let mut cfg = small_ensemble(seed, 40);
    cfg.threads = Some(1);
    let a = run_ensemble(&cfg).map_err(|e| e.to_string())?;
    cfg.threads = Some(threads);
    let b = run_ensemble(&cfg).map_err(|e| e.to_string())?;
    ensure(a == b, || format!("results differ between 1 and {threads} threads"))
}

/// Populations stay in `[0, 1]` within standard errors and standard errors
/// shrink as `1/√n`.
pub fn ensemble_statistics(seed: u64) -> Check {
    let small = run_ensemble(&small_ensemble(seed, 100)).map_err(|e| e.to_string())?;
    let big = run_ensemble(&small_ensemble(seed + 1, 400)).map_err(|e| e.to_string())?;
    for (m, s) in small.leakage_total.mean.iter().zip(&small.leakage_total.standard_error) {
        ensure(*m >= -s - 1e-12 && *m <= 1.0 + s + 1e-12, || format!("population {m} outside [0, 1]"))?;
    }
    let k = big.time_grid.len() / 2;
    let ratio = small.occupation_site1.standard_error[k] / big.occupation_site1.standard_error[k];
    ensure((1.5..=2.7).contains(&ratio), || format!("standard-error ratio {ratio:.3} for 4x trajectories"))
}

/// Without channel and noise the leakage population is conserved.
pub fn leakage_conserved(seed: u64) -> Check {
    let s = spec(3, 30.0, 5.0);
    let mut cfg = SimulationConfig::new(s, ResetChannel::off(), CodingState::Ket2);
    cfg.t_max = 10.0;
    cfg.observable_stride = 50;
    cfg.n_trajectories = 20;
    cfg.master_seed = seed;
    let obs = run_ensemble(&cfg).map_err(|e| e.to_string())?;
    // virtual |11⟩ admixture makes P⋆ dip slightly; its sum with ⟨N⟩/2 is exact
    let drift = obs
        .occupations
        .iter()
        .map(|n| n.last().unwrap() - n[0])
        .sum::<f64>()
        .abs();
    ensure(drift < 1e-9, || format!("excitation number drift {drift:e}"))?;
    let dip = obs.leakage_total.mean.iter().fold(1.0f64, |a, &b| a.min(b));
    ensure(dip > 0.9, || format!("leakage fell to {dip}"))
}

/// Trace, Hermitian positivity and purity of the dense solution.
pub fn master_properties(seed: u64) -> Check {
    let s = spec(2, 20.0, 4.0);
    let mut cfg = SimulationConfig::new(s.clone(), ResetChannel::dissipation(0.5), CodingState::Plus);
    cfg.noise = NoiseModel::from_times(30.0, 20.0, 0.0);
    cfg.master_seed = seed;
    let grid: Vec<f64> = (0..=40).map(|k| 0.5 * k as f64).collect();
    let sol = solve_master_dense(&cfg, &grid).map_err(|e| e.to_string())?;
    let tr = sol.trace.iter().map(|t| (t - 1.0).abs()).fold(0.0, f64::max);
    ensure(tr < 1e-8, || format!("trace defect {tr:e}"))?;
    let me = sol.min_eigenvalue.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(me >= -1e-8, || format!("negative eigenvalue {me:e}"))?;
    let pure = SimulationConfig::new(s, ResetChannel::off(), CodingState::Plus);
    // the default tolerances bound the local error only; rank-1 at 1e-9 needs tighter ones
    let tight = MasterOptions {
        absolute_tolerance: 1e-13,
        relative_tolerance: 1e-12,
        ..MasterOptions::default()
    };
    let sol = solve_master_dense_with(&pure, &grid, &tight).map_err(|e| e.to_string())?;
    let p = sol.purity.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    ensure(p < 1e-9, || format!("purity defect {p:e} without dissipation"))
}

/// Leakage depends only on Fock-basis populations.
pub fn leakage_basis_diagonal(seed: u64) -> Check {
    let s = spec(3, 20.0, 0.0);
    let fock = s.fock_basis().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = random_state(fock.dimension(), &mut rng);
    let phased = StateVector::new(
        psi.amplitudes()
            .iter()
            .map(|a| a * C64::from_polar(1.0, 6.3 * rng.random::<f64>()))
            .collect(),
    );
    for sites in [LeakageSites::All, LeakageSites::First] {
        let d = (leakage_population(&psi, &fock, sites) - leakage_population(&phased, &fock, sites)).abs();
        ensure(d < 1e-12, || format!("phases changed leakage by {d:e}"))?;
    }
    Ok(())
}

/// Fits recover exact exponentials and are scale-equivariant.
pub fn fit_properties(tau: f64, amplitude: f64, scale: f64) -> Check {
    let t: Vec<f64> = (0..200).map(|k| 0.05 * tau * k as f64).collect();
    let y: Vec<f64> = t.iter().map(|t| amplitude * (-t / tau).exp()).collect();
    let f = fit_exponential(&t, &y, 0.0, None);
    ensure(f.converged && f.rms_residual < 1e-10, || format!("residual {:e}", f.rms_residual))?;
    ensure(((f.decay_time - tau) / tau).abs() < 1e-6, || format!("τ = {} vs {tau}", f.decay_time))?;
    let ys: Vec<f64> = y.iter().map(|v| scale * v).collect();
    let g = fit_exponential(&t, &ys, 0.0, None);
    ensure(((g.decay_time - f.decay_time) / tau).abs() < 1e-9, || "scaling changed τ".into())?;
    ensure(((g.amplitude / f.amplitude) / scale - 1.0).abs() < 1e-9, || "amplitude not scaled".into())
}
