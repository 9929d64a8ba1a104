//! Ensembles of quantum trajectories and a dense master-equation integrator
//! for small arrays.
//!
//! Dynamics run in the frame rotating at the mean frequency `ω̄`, so GHz-scale
//! site frequencies never enter the propagators. Populations and the modulus
//! of the qubit coherence are frame independent.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{
    measurement_times, project_and_reset, sample_outcome, sample_thermal_initial, site_probabilities,
    thermal_weights, ChannelKind, NoiseModel, ResetChannel,
};
use crate::error::{Error, Result};
use crate::lattice::{
    build_bose_hubbard_rotating, realize_disorder_with, DisorderRealization, FockBasis, LatticeSpec, OperatorMatrix,
};
use crate::observables::{leakage_diagonal, site_coherence, site_coherence_density, LeakageSites};
use crate::propagator::{
    krylov_propagate, ExactPropagator, KrylovOptions, ModalState, PropagationMethod, Propagator, PropagatorOptions,
    StateVector, StepOperator,
};
use crate::units::thermal_angular_frequency;
use crate::C64;

/// Trajectories per reduction chunk. Fixed so that results do not depend on
/// the number of worker threads.
pub const CHUNK_SIZE: usize = 16;

/// Largest number of density-matrix entries the dense integrator accepts.
pub const DENSE_BUDGET: usize = 1 << 20;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Initial state of the coding site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodingState {
    Ket0,
    Ket1,
    Ket2,
    /// `(|0⟩ + |1⟩)/√2`.
    Plus,
}

impl CodingState {
    pub fn amplitudes(self, local_dim: usize) -> Vec<C64> {
        let mut v = vec![ZERO; local_dim];
        match self {
            CodingState::Ket0 => v[0] = C64::new(1.0, 0.0),
            CodingState::Ket1 => v[1] = C64::new(1.0, 0.0),
            CodingState::Ket2 => v[2] = C64::new(1.0, 0.0),
            CodingState::Plus => {
                v[0] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                v[1] = v[0];
            }
        }
        v
    }
}

/// How jumps are sampled between channel events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JumpScheme {
    /// Per step of length `dt` a jump happens with probability
    /// `dt Σ_k ‖L_k ψ‖²`; otherwise the no-jump evolution is applied.
    #[default]
    FirstOrder,
    /// Jump times are drawn from the decay of the no-jump norm and located by
    /// bisection, which is exact in `dt`.
    WaitingTime,
}

fn default_stride() -> usize {
    1
}

/// Everything needed to run an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub lattice: LatticeSpec,
    pub channel: ResetChannel,
    #[serde(default)]
    pub noise: NoiseModel,
    pub initial_coding_state: CodingState,
    pub t_max: f64,
    pub dt: f64,
    pub n_trajectories: usize,
    pub master_seed: u64,
    #[serde(default = "default_stride")]
    pub observable_stride: usize,
    /// Fixed detunings `δω_ℓ` used by every trajectory instead of fresh draws.
    #[serde(default)]
    pub disorder_override: Option<Vec<f64>>,
    #[serde(default)]
    pub jump_scheme: JumpScheme,
    #[serde(default)]
    pub propagator: PropagatorOptions,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Default time step: `dt·max(J, Γ, W, Ū) ≤ 0.05`, and `dt ≤ 0.01/Γ` when a
/// channel is active.
pub fn default_time_step(spec: &LatticeSpec, channel: &ResetChannel) -> f64 {
    let u = if spec.mean_anharmonicity.is_finite() {
        spec.mean_anharmonicity
    } else {
        0.0
    };
    let scale = [spec.hopping, channel.rate, spec.disorder, u]
        .into_iter()
        .fold(0.0, f64::max);
    let mut dt = if scale > 0.0 { 0.05 / scale } else { 0.05 };
    if channel.rate > 0.0 {
        dt = dt.min(0.01 / channel.rate);
    }
    dt
}

impl SimulationConfig {
    /// A configuration with no noise, `t_max = 1`, the default time step, a
    /// single trajectory and seed 0.
    pub fn new(lattice: LatticeSpec, channel: ResetChannel, initial_coding_state: CodingState) -> Self {
        let dt = default_time_step(&lattice, &channel);
        SimulationConfig {
            lattice,
            channel,
            noise: NoiseModel::default(),
            initial_coding_state,
            t_max: 1.0,
            dt,
            n_trajectories: 1,
            master_seed: 0,
            observable_stride: 1,
            disorder_override: None,
            jump_scheme: JumpScheme::FirstOrder,
            propagator: PropagatorOptions::default(),
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice.validate()?;
        self.channel.validate(&self.lattice)?;
        self.noise.validate()?;
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::InvalidParameter("t_max must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        if self.n_trajectories == 0 {
            return Err(Error::InvalidParameter("at least one trajectory is needed".into()));
        }
        if self.observable_stride == 0 {
            return Err(Error::InvalidParameter("observable stride must be at least 1".into()));
        }
        if self.lattice.local_dim < 3 {
            return Err(Error::InvalidParameter("local dimension must be at least 3".into()));
        }
        if let Some(d) = &self.disorder_override {
            DisorderRealization::from_detunings(&self.lattice, d)?;
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidParameter("thread count must be at least 1".into()));
        }
        Ok(())
    }

    /// Observable times `{0, s·dt, 2s·dt, …, t_max}` with `s` the stride.
    pub fn time_grid(&self) -> Vec<f64> {
        let spacing = self.observable_stride as f64 * self.dt;
        let mut grid = vec![0.0];
        let mut k = 1u64;
        loop {
            let t = k as f64 * spacing;
            if t >= self.t_max * (1.0 - 1e-12) {
                break;
            }
            grid.push(t);
            k += 1;
        }
        grid.push(self.t_max);
        grid
    }

    fn fixed_realization(&self) -> Result<Option<DisorderRealization>> {
        if let Some(d) = &self.disorder_override {
            return Ok(Some(DisorderRealization::from_detunings(&self.lattice, d)?));
        }
        if self.lattice.disorder == 0.0 {
            return Ok(Some(DisorderRealization::from_detunings(
                &self.lattice,
                &vec![0.0; self.lattice.length],
            )?));
        }
        Ok(None)
    }
}

/// The RNG stream of trajectory `index`.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy)]
enum JumpKind {
    /// `√rate · a_site`.
    Lower,
    /// `√rate · n_site`.
    Number,
}

#[derive(Debug, Clone, Copy)]
struct Jump {
    kind: JumpKind,
    site: usize,
    rate: f64,
}

/// Disorder-independent data shared by all trajectories of an ensemble.
struct Setup {
    basis: FockBasis,
    occupations: Vec<Vec<u8>>,
    jumps: Vec<Jump>,
    damping: Vec<C64>,
    leak_all: Vec<f64>,
    leak_first: Vec<f64>,
    coding: Vec<C64>,
    reset_site: usize,
    grid: Vec<f64>,
    fixed: Option<Dynamics>,
}

enum Evolution {
    Exact(ExactPropagator),
    Krylov(OperatorMatrix, KrylovOptions),
}

/// No-jump evolution for one disorder realization.
struct Dynamics {
    real: DisorderRealization,
    evolution: Evolution,
    stepper: Option<Propagator>,
    /// One measurement period of unitary evolution, for periodic feedback
    /// without jumps.
    period: Option<(f64, StepOperator)>,
}

impl Setup {
    fn new(cfg: &SimulationConfig) -> Result<Self> {
        cfg.validate()?;
        let basis = cfg.lattice.fock_basis()?;
        let l = cfg.lattice.length;
        let occupations: Vec<Vec<u8>> = (0..l)
            .map(|s| (0..basis.dimension()).map(|i| basis.occupation(i, s) as u8).collect())
            .collect();
        let reset_site = cfg.channel.resolved_site(l)?;
        let mut jumps = Vec::new();
        if cfg.channel.kind == ChannelKind::Dissipation && cfg.channel.rate > 0.0 {
            jumps.push(Jump {
                kind: JumpKind::Lower,
                site: reset_site,
                rate: cfg.channel.rate,
            });
        }
        for site in 0..l {
            if cfg.noise.relaxation_rate > 0.0 {
                jumps.push(Jump {
                    kind: JumpKind::Lower,
                    site,
                    rate: cfg.noise.relaxation_rate,
                });
            }
            if cfg.noise.dephasing_rate > 0.0 {
                jumps.push(Jump {
                    kind: JumpKind::Number,
                    site,
                    rate: 2.0 * cfg.noise.dephasing_rate,
                });
            }
        }
        let damping = (0..basis.dimension())
            .map(|i| {
                let g: f64 = jumps.iter().map(|j| j.rate * weight_factor(j, &occupations, i)).sum();
                C64::new(0.0, -0.5 * g)
            })
            .collect();
        let mut setup = Setup {
            leak_all: leakage_diagonal(&basis, LeakageSites::All),
            leak_first: leakage_diagonal(&basis, LeakageSites::First),
            coding: cfg.initial_coding_state.amplitudes(cfg.lattice.local_dim),
            basis,
            occupations,
            jumps,
            damping,
            reset_site,
            grid: cfg.time_grid(),
            fixed: None,
        };
        if let Some(real) = cfg.fixed_realization()? {
            setup.fixed = Some(setup.dynamics(cfg, real)?);
        }
        Ok(setup)
    }

    fn dynamics(&self, cfg: &SimulationConfig, real: DisorderRealization) -> Result<Dynamics> {
        let h = build_bose_hubbard_rotating(&real, cfg.lattice.mean_frequency)?;
        let h_eff = if self.jumps.is_empty() {
            h
        } else {
            h.with_diagonal_shift(&self.damping)?
        };
        let stepper = match cfg.jump_scheme {
            JumpScheme::FirstOrder => Some(Propagator::new(&h_eff, cfg.dt, cfg.propagator)?),
            JumpScheme::WaitingTime => None,
        };
        let exact = match &stepper {
            Some(p) => p.method() == PropagationMethod::Exact,
            None => match cfg.propagator.method {
                Some(m) => m == PropagationMethod::Exact,
                None => h_eff.dimension() <= cfg.propagator.exact_threshold,
            },
        };
        let evolution = if exact {
            match stepper.as_ref().and_then(|p| p.exact()) {
                Some(e) => Evolution::Exact(e.clone()),
                None => Evolution::Exact(ExactPropagator::new(&h_eff)),
            }
        } else {
            Evolution::Krylov(h_eff, cfg.propagator.krylov)
        };
        let period = match &evolution {
            Evolution::Exact(e)
                if cfg.jump_scheme == JumpScheme::WaitingTime
                    && cfg.channel.kind == ChannelKind::PeriodicFeedback
                    && cfg.channel.rate > 0.0
                    && self.jumps.is_empty() =>
            {
                Some((1.0 / cfg.channel.rate, e.step_operator(1.0 / cfg.channel.rate)))
            }
            _ => None,
        };
        Ok(Dynamics {
            real,
            evolution,
            stepper,
            period,
        })
    }

    fn jump_weight(&self, jump: &Jump, amps: &[C64]) -> f64 {
        amps.iter()
            .enumerate()
            .map(|(i, a)| a.norm_sqr() * weight_factor(jump, &self.occupations, i))
            .sum::<f64>()
            * jump.rate
    }

    /// Applies the jump operator (without its rate) and returns the result.
    fn apply_jump(&self, jump: &Jump, amps: &[C64]) -> Vec<C64> {
        let occ = &self.occupations[jump.site];
        match jump.kind {
            JumpKind::Lower => {
                let stride = self.basis.stride(jump.site);
                let mut out = vec![ZERO; amps.len()];
                for (i, a) in amps.iter().enumerate() {
                    let n = occ[i];
                    if n > 0 {
                        out[i - stride] = a * (n as f64).sqrt();
                    }
                }
                out
            }
            JumpKind::Number => amps.iter().zip(occ).map(|(a, &n)| a * n as f64).collect(),
        }
    }

    /// Draws and applies one jump; returns the normalized post-jump state.
    fn jump<R: Rng + ?Sized>(&self, amps: &[C64], rng: &mut R) -> Result<Vec<C64>> {
        let weights: Vec<f64> = self.jumps.iter().map(|j| self.jump_weight(j, amps)).collect();
        let k = sample_outcome(&weights, rng.random::<f64>());
        let mut out = StateVector::new(self.apply_jump(&self.jumps[k], amps));
        out.normalize()?;
        Ok(out.into_amplitudes())
    }

    fn feedback<R: Rng + ?Sized>(&self, amps: &mut [C64], rng: &mut R) -> Result<()> {
        let occ = &self.occupations[self.reset_site];
        let mut probs = [0.0; 8];
        let probs = &mut probs[..self.basis.local_dim().min(8)];
        if self.basis.local_dim() > 8 {
            let p = site_probabilities(amps, &self.basis, self.reset_site);
            let outcome = sample_outcome(&p, rng.random::<f64>());
            project_and_reset(amps, &self.basis, self.reset_site, outcome);
            return normalize(amps);
        }
        for (a, &n) in amps.iter().zip(occ) {
            probs[n as usize] += a.norm_sqr();
        }
        let outcome = sample_outcome(probs, rng.random::<f64>());
        let shift = outcome * self.basis.stride(self.reset_site);
        let scale = 1.0 / probs[outcome].sqrt();
        for i in 0..amps.len() {
            let n = occ[i] as usize;
            if n == 0 && outcome != 0 {
                amps[i] = amps[i + shift] * scale;
            } else if n == 0 {
                amps[i] *= scale;
            } else {
                amps[i] = ZERO;
            }
        }
        Ok(())
    }
}

fn weight_factor(jump: &Jump, occupations: &[Vec<u8>], i: usize) -> f64 {
    let n = occupations[jump.site][i] as f64;
    match jump.kind {
        JumpKind::Lower => n,
        JumpKind::Number => n * n,
    }
}

fn normalize(amps: &mut [C64]) -> Result<()> {
    let n: f64 = amps.iter().map(C64::norm_sqr).sum();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidParameter("state has vanishing norm".into()));
    }
    let s = 1.0 / n.sqrt();
    amps.iter_mut().for_each(|a| *a *= s);
    Ok(())
}

/// Observable series of one trajectory on the configuration's time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub index: u64,
    pub leakage_total: Vec<f64>,
    pub leakage_site1: Vec<f64>,
    /// `occupations[site][k]`.
    pub occupations: Vec<Vec<f64>>,
    pub coherence_site1: Vec<C64>,
    pub jumps: u64,
    pub measurements: u64,
    /// Detunings `δω_ℓ` of the realization used.
    pub detunings: Vec<f64>,
}

impl TrajectoryRecord {
    fn new(index: u64, sites: usize, points: usize, detunings: Vec<f64>) -> Self {
        TrajectoryRecord {
            index,
            leakage_total: Vec::with_capacity(points),
            leakage_site1: Vec::with_capacity(points),
            occupations: vec![Vec::with_capacity(points); sites],
            coherence_site1: Vec::with_capacity(points),
            jumps: 0,
            measurements: 0,
            detunings,
        }
    }

    fn record(&mut self, setup: &Setup, amps: &[C64]) {
        let n: f64 = amps.iter().map(C64::norm_sqr).sum();
        let mut leak = 0.0;
        let mut leak1 = 0.0;
        for (i, a) in amps.iter().enumerate() {
            let p = a.norm_sqr();
            leak += p * setup.leak_all[i];
            leak1 += p * setup.leak_first[i];
        }
        self.leakage_total.push(leak / n);
        self.leakage_site1.push(leak1 / n);
        for (site, series) in self.occupations.iter_mut().enumerate() {
            let occ = &setup.occupations[site];
            let v: f64 = amps.iter().zip(occ).map(|(a, &k)| a.norm_sqr() * k as f64).sum();
            series.push(v / n);
        }
        self.coherence_site1.push(site_coherence(amps, &setup.basis, 0) / n);
    }
}

/// Runs trajectory `index` of the ensemble described by `config`.
pub fn run_trajectory(config: &SimulationConfig, index: u64) -> Result<TrajectoryRecord> {
    let setup = Setup::new(config)?;
    trajectory(config, &setup, index).map_err(|e| Error::Trajectory {
        index: index as usize,
        source: Box::new(e),
    })
}

fn trajectory(cfg: &SimulationConfig, setup: &Setup, index: u64) -> Result<TrajectoryRecord> {
    let mut rng = trajectory_rng(cfg.master_seed, index);
    let owned;
    let dyn_ = match &setup.fixed {
        Some(d) => d,
        None => {
            let real = realize_disorder_with(&cfg.lattice, &mut rng);
            owned = setup.dynamics(cfg, real)?;
            &owned
        }
    };
    let psi0 = sample_thermal_initial(&dyn_.real, &cfg.noise, &setup.coding, &mut rng)?;
    let feedback_times = if cfg.channel.kind.is_feedback() {
        measurement_times(&cfg.channel, cfg.t_max, cfg.dt, &mut rng)?
    } else {
        Vec::new()
    };
    let mut rec = TrajectoryRecord::new(index, cfg.lattice.length, setup.grid.len(), dyn_.real.detunings.clone());
    match cfg.jump_scheme {
        JumpScheme::FirstOrder => first_order(cfg, setup, dyn_, psi0.into_amplitudes(), &feedback_times, &mut rng, &mut rec)?,
        JumpScheme::WaitingTime => waiting_time(setup, dyn_, psi0.into_amplitudes(), &feedback_times, &mut rng, &mut rec)?,
    }
    Ok(rec)
}

fn first_order<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    setup: &Setup,
    dyn_: &Dynamics,
    mut psi: Vec<C64>,
    feedback: &[f64],
    rng: &mut R,
    rec: &mut TrajectoryRecord,
) -> Result<()> {
    let stepper = dyn_.stepper.as_ref().expect("first-order scheme builds a stepper");
    let mut fb = feedback.iter().peekable();
    let mut next_grid = 1;
    rec.record(setup, &psi);
    let mut k = 0u64;
    let mut now = 0.0;
    while next_grid < setup.grid.len() {
        let end = ((k + 1) as f64 * cfg.dt).min(setup.grid[next_grid]);
        while let Some(&&tf) = fb.peek() {
            if tf > end {
                break;
            }
            fb.next();
            if tf > now {
                substep(setup, stepper, &mut psi, tf - now, rng, rec)?;
                now = tf;
            }
            setup.feedback(&mut psi, rng)?;
            rec.measurements += 1;
        }
        if end > now {
            substep(setup, stepper, &mut psi, end - now, rng, rec)?;
            now = end;
        }
        if end >= setup.grid[next_grid] {
            rec.record(setup, &psi);
            next_grid += 1;
        }
        if end >= (k + 1) as f64 * cfg.dt {
            k += 1;
        }
    }
    Ok(())
}

fn substep<R: Rng + ?Sized>(
    setup: &Setup,
    stepper: &Propagator,
    psi: &mut Vec<C64>,
    tau: f64,
    rng: &mut R,
    rec: &mut TrajectoryRecord,
) -> Result<()> {
    if !setup.jumps.is_empty() {
        let weights: Vec<f64> = setup.jumps.iter().map(|j| tau * setup.jump_weight(j, psi)).collect();
        let total: f64 = weights.iter().sum();
        if total >= 1.0 {
            return Err(Error::StepTooLarge { probability: total });
        }
        let u = rng.random::<f64>();
        if u < total {
            let k = sample_outcome(&weights, u / total);
            let mut out = StateVector::new(setup.apply_jump(&setup.jumps[k], psi));
            out.normalize()?;
            *psi = out.into_amplitudes();
            rec.jumps += 1;
            return Ok(());
        }
    }
    let mut state = StateVector::new(std::mem::take(psi));
    if (tau - stepper.dt()).abs() <= 1e-12 * stepper.dt() {
        stepper.step(&mut state)?;
    } else {
        state = stepper.propagate(&state, tau)?;
    }
    *psi = state.into_amplitudes();
    if !setup.jumps.is_empty() {
        normalize(psi)?;
    }
    Ok(())
}

/// No-jump evolution from a fixed starting state, evaluated at offsets `τ`.
struct Segment<'a> {
    evolution: &'a Evolution,
    modal: Option<ModalState>,
    anchor: Vec<C64>,
    anchor_tau: f64,
}

impl<'a> Segment<'a> {
    fn start(evolution: &'a Evolution, psi: &[C64]) -> Self {
        let modal = match evolution {
            Evolution::Exact(e) => Some(e.to_modal(psi)),
            Evolution::Krylov(..) => None,
        };
        Segment {
            evolution,
            modal,
            anchor: psi.to_vec(),
            anchor_tau: 0.0,
        }
    }

    fn eval(&self, tau: f64, out: &mut Vec<C64>) -> Result<()> {
        match self.evolution {
            Evolution::Exact(e) => {
                out.resize(e.dim(), ZERO);
                e.evaluate(self.modal.as_ref().expect("modal state"), tau, out);
            }
            Evolution::Krylov(h, opts) => {
                *out = krylov_propagate(h, &self.anchor, tau - self.anchor_tau, opts)?;
            }
        }
        Ok(())
    }

    /// Moves the Krylov anchor to `tau`, where the state is `state`.
    fn advance(&mut self, tau: f64, state: &[C64]) {
        if matches!(self.evolution, Evolution::Krylov(..)) {
            self.anchor.copy_from_slice(state);
            self.anchor_tau = tau;
        }
    }
}

fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(C64::norm_sqr).sum()
}

fn waiting_time<R: Rng + ?Sized>(
    setup: &Setup,
    dyn_: &Dynamics,
    mut psi: Vec<C64>,
    feedback: &[f64],
    rng: &mut R,
    rec: &mut TrajectoryRecord,
) -> Result<()> {
    let grid = &setup.grid;
    let dissipative = !setup.jumps.is_empty();
    rec.record(setup, &psi);
    let mut next_grid = 1;
    let mut fb = 0;
    let mut seg = Some(Segment::start(&dyn_.evolution, &psi));
    let mut t_seg = 0.0;
    let mut now = 0.0;
    let draw = |rng: &mut R| if dissipative { rng.random::<f64>() } else { 0.0 };
    let mut threshold = draw(rng);
    let mut buf = Vec::with_capacity(psi.len());
    while next_grid < grid.len() {
        let t_grid = grid[next_grid];
        let t_fb = feedback.get(fb).copied().unwrap_or(f64::INFINITY);
        let t_next = t_grid.min(t_fb);
        if let Some((period, step)) = &dyn_.period {
            if t_fb < t_grid && now == t_seg && (t_fb - t_seg - period).abs() <= 1e-9 * period {
                step.apply(&mut psi);
                fb += 1;
                setup.feedback(&mut psi, rng)?;
                rec.measurements += 1;
                now = t_fb;
                t_seg = now;
                seg = None;
                continue;
            }
        }
        let sg = seg.get_or_insert_with(|| Segment::start(&dyn_.evolution, &psi));
        sg.eval(t_next - t_seg, &mut buf)?;
        if dissipative && norm_sqr(&buf) <= threshold {
            // the jump lies in (now, t_next]
            let (mut lo, mut hi) = (now - t_seg, t_next - t_seg);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                sg.eval(mid, &mut buf)?;
                if norm_sqr(&buf) > threshold {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            sg.eval(hi, &mut buf)?;
            psi = setup.jump(&buf, rng)?;
            rec.jumps += 1;
            now = t_seg + hi;
            t_seg = now;
            seg = None;
            threshold = draw(rng);
            continue;
        }
        now = t_next;
        sg.advance(t_next - t_seg, &buf);
        if t_fb <= t_next {
            fb += 1;
            psi.clone_from(&buf);
            setup.feedback(&mut psi, rng)?;
            rec.measurements += 1;
            t_seg = now;
            seg = None;
            threshold = draw(rng);
            if t_grid <= t_next {
                rec.record(setup, &psi);
                next_grid += 1;
            }
            continue;
        }
        rec.record(setup, &buf);
        next_grid += 1;
    }
    Ok(())
}

/// Mean and standard error of a series over trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
}

/// Trajectory-averaged observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleObservables {
    pub time_grid: Vec<f64>,
    /// Leakage population of the whole array.
    pub leakage_total: SeriesStats,
    /// Leakage population of the coding site.
    pub leakage_site1: SeriesStats,
    pub occupation_site1: SeriesStats,
    /// Mean occupation of every site, `occupations[site][k]`.
    pub occupations: Vec<Vec<f64>>,
    /// Ensemble mean of `⟨0|ρ₁|1⟩` in the rotating frame.
    pub coherence_site1: Vec<C64>,
    /// Ensemble mean of the per-trajectory modulus `|⟨0|ρ₁|1⟩|`.
    pub coherence_modulus: SeriesStats,
    pub n_trajectories_used: usize,
    pub mean_jumps: f64,
    pub mean_measurements: f64,
}

impl EnsembleObservables {
    /// The envelope `2|c|` of `⟨σ_x⟩` from the per-trajectory modulus.
    pub fn coherence_envelope(&self) -> Vec<f64> {
        self.coherence_modulus.mean.iter().map(|c| 2.0 * c).collect()
    }
}

#[derive(Debug, Clone)]
struct Accumulator {
    n: usize,
    points: usize,
    sites: usize,
    /// `[leak_total, leak_site1, occ_0 … occ_{L-1}, |c|]` series, each of
    /// length `points`.
    sum: Vec<f64>,
    sq: Vec<f64>,
    coherence: Vec<C64>,
    jumps: u64,
    measurements: u64,
}

impl Accumulator {
    fn new(points: usize, sites: usize) -> Self {
        let width = (sites + 3) * points;
        Accumulator {
            n: 0,
            points,
            sites,
            sum: vec![0.0; width],
            sq: vec![0.0; width],
            coherence: vec![ZERO; points],
            jumps: 0,
            measurements: 0,
        }
    }

    fn add(&mut self, r: &TrajectoryRecord) {
        let p = self.points;
        let mut put = |slot: usize, series: &mut dyn Iterator<Item = f64>| {
            for (k, v) in series.enumerate() {
                self.sum[slot * p + k] += v;
                self.sq[slot * p + k] += v * v;
            }
        };
        put(0, &mut r.leakage_total.iter().copied());
        put(1, &mut r.leakage_site1.iter().copied());
        for (s, occ) in r.occupations.iter().enumerate() {
            put(2 + s, &mut occ.iter().copied());
        }
        put(2 + self.sites, &mut r.coherence_site1.iter().map(|c| c.norm()));
        for (acc, c) in self.coherence.iter_mut().zip(&r.coherence_site1) {
            *acc += c;
        }
        self.n += 1;
        self.jumps += r.jumps;
        self.measurements += r.measurements;
    }

    fn merge(mut self, other: &Accumulator) -> Self {
        self.n += other.n;
        self.jumps += other.jumps;
        self.measurements += other.measurements;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.sq.iter_mut().zip(&other.sq).for_each(|(a, b)| *a += b);
        self.coherence.iter_mut().zip(&other.coherence).for_each(|(a, b)| *a += b);
        self
    }

    fn stats(&self, slot: usize) -> SeriesStats {
        let p = self.points;
        let n = self.n as f64;
        let mut mean = Vec::with_capacity(p);
        let mut se = Vec::with_capacity(p);
        for k in 0..p {
            let m = self.sum[slot * p + k] / n;
            let var = if self.n > 1 {
                ((self.sq[slot * p + k] - n * m * m) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            mean.push(m);
            se.push((var / n).sqrt());
        }
        SeriesStats {
            mean,
            standard_error: se,
        }
    }
}

fn pairwise(mut parts: Vec<Accumulator>) -> Accumulator {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(&b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

fn ensemble_parts(config: &SimulationConfig, setup: &Setup) -> Result<Vec<Accumulator>> {
    let n = config.n_trajectories;
    let chunks: Vec<(usize, usize)> = (0..n.div_ceil(CHUNK_SIZE))
        .map(|c| (c * CHUNK_SIZE, ((c + 1) * CHUNK_SIZE).min(n)))
        .collect();
    let points = setup.grid.len();
    let sites = config.lattice.length;
    let work = || -> Result<Vec<Accumulator>> {
        chunks
            .par_iter()
            .map(|&(a, b)| {
                let mut acc = Accumulator::new(points, sites);
                for i in a..b {
                    let rec = trajectory(config, setup, i as u64).map_err(|e| Error::Trajectory {
                        index: i,
                        source: Box::new(e),
                    })?;
                    acc.add(&rec);
                }
                Ok(acc)
            })
            .collect()
    };
    match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

fn observables(grid: &[f64], acc: &Accumulator) -> EnsembleObservables {
    let sites = acc.sites;
    let nf = acc.n as f64;
    EnsembleObservables {
        time_grid: grid.to_vec(),
        leakage_total: acc.stats(0),
        leakage_site1: acc.stats(1),
        occupation_site1: acc.stats(2),
        occupations: (0..sites).map(|s| acc.stats(2 + s).mean).collect(),
        coherence_site1: acc.coherence.iter().map(|c| c / nf).collect(),
        coherence_modulus: acc.stats(2 + sites),
        n_trajectories_used: acc.n,
        mean_jumps: acc.jumps as f64 / nf,
        mean_measurements: acc.measurements as f64 / nf,
    }
}

/// Runs `config.n_trajectories` trajectories and averages them.
///
/// Trajectory `i` uses the RNG stream `i` of `master_seed`, draws its own
/// disorder (unless overridden) and thermal state, and is accumulated into a
/// fixed chunk; chunks are combined pairwise in index order. The result is
/// bitwise independent of the number of threads.
pub fn run_ensemble(config: &SimulationConfig) -> Result<EnsembleObservables> {
    let setup = Setup::new(config)?;
    let parts = ensemble_parts(config, &setup)?;
    Ok(observables(&setup.grid, &pairwise(parts)))
}

/// The full ensemble together with the averages over its first and second
/// halves of chunks, for split-half error estimates of derived quantities.
pub fn run_ensemble_halves(
    config: &SimulationConfig,
) -> Result<(EnsembleObservables, EnsembleObservables, EnsembleObservables)> {
    if config.n_trajectories < 2 * CHUNK_SIZE {
        return Err(Error::InvalidParameter(format!(
            "split-half estimates need at least {} trajectories",
            2 * CHUNK_SIZE
        )));
    }
    let setup = Setup::new(config)?;
    let parts = ensemble_parts(config, &setup)?;
    let full = observables(&setup.grid, &pairwise(parts.clone()));
    let mid = parts.len() / 2;
    let mut first = parts;
    let second = first.split_off(mid);
    Ok((
        full,
        observables(&setup.grid, &pairwise(first)),
        observables(&setup.grid, &pairwise(second)),
    ))
}

/// Observables of the dense master-equation solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterSolution {
    pub time_grid: Vec<f64>,
    pub leakage_total: Vec<f64>,
    pub leakage_site1: Vec<f64>,
    pub occupation_site1: Vec<f64>,
    pub occupations: Vec<Vec<f64>>,
    pub coherence_site1: Vec<C64>,
    pub trace: Vec<f64>,
    pub purity: Vec<f64>,
    pub min_eigenvalue: Vec<f64>,
    pub steps: usize,
}

/// Integrator settings for [`solve_master_dense_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasterOptions {
    /// Largest number of density-matrix entries.
    pub budget: usize,
    pub absolute_tolerance: f64,
    pub relative_tolerance: f64,
    pub max_steps: usize,
}

impl Default for MasterOptions {
    fn default() -> Self {
        MasterOptions {
            budget: DENSE_BUDGET,
            absolute_tolerance: 1e-10,
            relative_tolerance: 1e-9,
            max_steps: 50_000_000,
        }
    }
}

struct Lindblad {
    h_eff: OperatorMatrix,
    jumps: Vec<Jump>,
    occupations: Vec<Vec<u8>>,
    strides: Vec<usize>,
    feedback: Option<(usize, f64)>,
    local_dim: usize,
}

impl Lindblad {
    fn apply(&self, rho: &DMatrix<C64>, out: &mut DMatrix<C64>) {
        let n = rho.nrows();
        let i_unit = C64::new(0.0, 1.0);
        // K = H_eff ρ; for Hermitian ρ, ρ H_eff† = K†
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            let col: Vec<C64> = rho.column(j).iter().copied().collect();
            let mut y = vec![ZERO; n];
            self.h_eff.apply(&col, &mut y);
            for (r, v) in y.into_iter().enumerate() {
                k[(r, j)] = v;
            }
        }
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] = -i_unit * (k[(i, j)] - k[(j, i)].conj());
            }
        }
        for jump in &self.jumps {
            let occ = &self.occupations[jump.site];
            match jump.kind {
                JumpKind::Lower => {
                    let s = self.strides[jump.site];
                    let top = (self.local_dim - 1) as u8;
                    for j in 0..n {
                        if occ[j] >= top {
                            continue;
                        }
                        let fj = ((occ[j] + 1) as f64).sqrt();
                        for i in 0..n {
                            if occ[i] >= top {
                                continue;
                            }
                            let fi = ((occ[i] + 1) as f64).sqrt();
                            out[(i, j)] += rho[(i + s, j + s)] * (jump.rate * fi * fj);
                        }
                    }
                }
                JumpKind::Number => {
                    for j in 0..n {
                        for i in 0..n {
                            let f = occ[i] as f64 * occ[j] as f64;
                            if f != 0.0 {
                                out[(i, j)] += rho[(i, j)] * (jump.rate * f);
                            }
                        }
                    }
                }
            }
        }
        if let Some((site, rate)) = self.feedback {
            let occ = &self.occupations[site];
            let s = self.strides[site];
            for j in 0..n {
                if occ[j] != 0 {
                    continue;
                }
                for i in 0..n {
                    if occ[i] != 0 {
                        continue;
                    }
                    let mut acc = ZERO;
                    for m in 0..self.local_dim {
                        acc += rho[(i + m * s, j + m * s)];
                    }
                    out[(i, j)] += acc * rate;
                }
            }
        }
    }
}

/// Integrates the Lindblad equation for `config` on `t_grid` with default
/// [`MasterOptions`].
///
/// Uses the disorder override, or the realization drawn from `master_seed`
/// when the disorder is nonzero. Idle sites start in the truncated Gibbs
/// state. Feedback channels of either kind enter as
/// `Γ(Σ_n Π_n ρ Π_n† - ρ)` with `Π_n = |0⟩⟨n|` on the reset site,
/// dissipation as `√Γ a`, and noise as `√γ a_ℓ` and `√(2κ) n_ℓ`.
pub fn solve_master_dense(config: &SimulationConfig, t_grid: &[f64]) -> Result<MasterSolution> {
    solve_master_dense_with(config, t_grid, &MasterOptions::default())
}

/// [`solve_master_dense`] with explicit integrator settings.
pub fn solve_master_dense_with(
    config: &SimulationConfig,
    t_grid: &[f64],
    options: &MasterOptions,
) -> Result<MasterSolution> {
    config.lattice.validate()?;
    config.channel.validate(&config.lattice)?;
    config.noise.validate()?;
    let dim = config.lattice.dimension()?;
    if dim.saturating_mul(dim) > options.budget {
        return Err(Error::DenseBudgetExceeded {
            dimension: dim,
            budget: options.budget,
        });
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid[0] < 0.0 {
        return Err(Error::InvalidParameter("time grid must be non-negative and sorted".into()));
    }
    let mut cfg = config.clone();
    cfg.jump_scheme = JumpScheme::WaitingTime;
    cfg.t_max = t_grid.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let setup = Setup::new(&cfg)?;
    let real = match cfg.fixed_realization()? {
        Some(r) => r,
        None => crate::lattice::realize_disorder(&cfg.lattice, cfg.master_seed),
    };
    let h = build_bose_hubbard_rotating(&real, cfg.lattice.mean_frequency)?;
    let mut shift = setup.damping.clone();
    let feedback = if cfg.channel.kind.is_feedback() && cfg.channel.rate > 0.0 {
        shift.iter_mut().for_each(|s| *s += C64::new(0.0, -0.5 * cfg.channel.rate));
        Some((setup.reset_site, cfg.channel.rate))
    } else {
        None
    };
    let h_eff = h.with_diagonal_shift(&shift)?;
    let basis = setup.basis;
    let lindblad = Lindblad {
        h_eff,
        jumps: setup.jumps.clone(),
        strides: (0..basis.sites()).map(|s| basis.stride(s)).collect(),
        occupations: setup.occupations.clone(),
        feedback,
        local_dim: basis.local_dim(),
    };

    // ρ₀ = |c⟩⟨c| ⊗ Gibbs states of the idle sites
    let kt = thermal_angular_frequency(cfg.noise.temperature);
    let site_weights: Vec<[f64; 3]> = (0..basis.sites())
        .map(|s| {
            if kt == 0.0 || s == 0 {
                [1.0, 0.0, 0.0]
            } else {
                thermal_weights(real.omegas[s], real.anharmonicities[s], kt)
            }
        })
        .collect();
    let coding = &setup.coding;
    let mut rho = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            let mut v = coding[setup.occupations[0][i] as usize] * coding[setup.occupations[0][j] as usize].conj();
            if v == ZERO {
                continue;
            }
            for s in 1..basis.sites() {
                let (ni, nj) = (setup.occupations[s][i] as usize, setup.occupations[s][j] as usize);
                if ni != nj || ni > 2 {
                    v = ZERO;
                    break;
                }
                v *= site_weights[s][ni];
            }
            rho[(i, j)] = v;
        }
    }

    let mut sol = MasterSolution {
        time_grid: t_grid.to_vec(),
        leakage_total: Vec::new(),
        leakage_site1: Vec::new(),
        occupation_site1: Vec::new(),
        occupations: vec![Vec::new(); basis.sites()],
        coherence_site1: Vec::new(),
        trace: Vec::new(),
        purity: Vec::new(),
        min_eigenvalue: Vec::new(),
        steps: 0,
    };
    let record = |rho: &DMatrix<C64>, sol: &mut MasterSolution| {
        let tr: f64 = (0..dim).map(|i| rho[(i, i)].re).sum();
        let diag = |w: &dyn Fn(usize) -> f64| (0..dim).map(|i| rho[(i, i)].re * w(i)).sum::<f64>() / tr;
        sol.leakage_total.push(diag(&|i| setup.leak_all[i]));
        sol.leakage_site1.push(diag(&|i| setup.leak_first[i]));
        for s in 0..basis.sites() {
            let v = diag(&|i| setup.occupations[s][i] as f64);
            sol.occupations[s].push(v);
        }
        sol.occupation_site1.push(sol.occupations[0].last().copied().unwrap_or(0.0));
        sol.coherence_site1.push(site_coherence_density(rho, &basis, 0) / tr);
        sol.trace.push(tr);
        sol.purity.push(rho.iter().map(C64::norm_sqr).sum::<f64>() / (tr * tr));
        let herm = (rho + rho.adjoint()) * C64::new(0.5, 0.0);
        let ev = herm.symmetric_eigenvalues();
        sol.min_eigenvalue.push(ev.iter().copied().fold(f64::INFINITY, f64::min));
    };

    let mut t = 0.0;
    let scale = lindblad.h_eff.max_abs().max(cfg.channel.rate).max(1e-300);
    let mut h = 0.01 / scale;
    let mut integ = Rk45::new(dim);
    for &target in t_grid {
        while t < target {
            let h_try = h.min(target - t);
            let (err, accepted) = integ.step(&lindblad, &rho, h_try, options);
            if accepted {
                std::mem::swap(&mut rho, &mut integ.y_new);
                t = if h_try == target - t { target } else { t + h_try };
                sol.steps += 1;
                if sol.steps > options.max_steps {
                    return Err(Error::InvalidParameter("master equation exceeded step limit".into()));
                }
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = if accepted { h_try * factor } else { h_try * factor.min(1.0) };
            if !(h > 0.0) || h < 1e-14 * target.max(1.0) / scale {
                return Err(Error::InvalidParameter("master equation step size underflow".into()));
            }
        }
        record(&rho, &mut sol);
    }
    Ok(sol)
}

/// Dormand-Prince 5(4) stepper on density matrices.
struct Rk45 {
    k: Vec<DMatrix<C64>>,
    tmp: DMatrix<C64>,
    y_new: DMatrix<C64>,
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

impl Rk45 {
    fn new(dim: usize) -> Self {
        Rk45 {
            k: (0..7).map(|_| DMatrix::zeros(dim, dim)).collect(),
            tmp: DMatrix::zeros(dim, dim),
            y_new: DMatrix::zeros(dim, dim),
        }
    }

    /// Attempts one step; returns the scaled error norm and acceptance.
    fn step(&mut self, f: &Lindblad, y: &DMatrix<C64>, h: f64, opts: &MasterOptions) -> (f64, bool) {
        let (first, rest) = self.k.split_at_mut(1);
        f.apply(y, &mut first[0]);
        for s in 1..7 {
            self.tmp.copy_from(y);
            for (j, a) in A[s - 1].iter().enumerate().take(s) {
                if *a != 0.0 {
                    let kj = if j == 0 { &first[0] } else { &rest[j - 1] };
                    self.tmp.zip_apply(kj, |t, k| *t += k * (h * a));
                }
            }
            f.apply(&self.tmp, &mut rest[s - 1]);
        }
        self.y_new.copy_from(y);
        let mut err = 0.0f64;
        let n = y.len();
        for idx in 0..n {
            let mut hi = ZERO;
            let mut lo = ZERO;
            for s in 0..7 {
                let kv = self.k[s].as_slice()[idx];
                hi += kv * B5[s];
                lo += kv * B4[s];
            }
            let yn = y.as_slice()[idx] + hi * h;
            self.y_new.as_mut_slice()[idx] = yn;
            let sc = opts.absolute_tolerance + opts.relative_tolerance * y.as_slice()[idx].norm().max(yn.norm());
            err = err.max(((hi - lo) * h).norm() / sc);
        }
        (err, err <= 1.0)
    }
}
