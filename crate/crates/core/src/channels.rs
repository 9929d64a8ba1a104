//! Reset channels on the last site, background noise and thermal initial
//! states.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    build_site_operator, Basis, DisorderRealization, FockBasis, LatticeSpec, OperatorMatrix, SiteOperatorKind,
};
use crate::propagator::{Propagator, StateVector};
use crate::units::thermal_angular_frequency;
use crate::C64;

/// Outcomes with Born probability below this are never sampled.
pub const OUTCOME_CUTOFF: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Feedback measurements at `t₀ + k/Γ` with random offset `t₀`.
    PeriodicFeedback,
    /// Feedback measurements as a Poisson process of rate Γ.
    RandomFeedback,
    /// Engineered decay `√Γ a` on the reset site.
    Dissipation,
}

impl ChannelKind {
    pub fn is_feedback(self) -> bool {
        !matches!(self, ChannelKind::Dissipation)
    }
}

/// Reset element attached to one site of the array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetChannel {
    pub kind: ChannelKind,
    pub rate: f64,
    /// Reset site; `None` means the last site.
    #[serde(default)]
    pub site: Option<usize>,
}

impl ResetChannel {
    pub fn new(kind: ChannelKind, rate: f64) -> Self {
        ResetChannel { kind, rate, site: None }
    }

    pub fn periodic_feedback(rate: f64) -> Self {
        Self::new(ChannelKind::PeriodicFeedback, rate)
    }

    pub fn random_feedback(rate: f64) -> Self {
        Self::new(ChannelKind::RandomFeedback, rate)
    }

    pub fn dissipation(rate: f64) -> Self {
        Self::new(ChannelKind::Dissipation, rate)
    }

    /// A channel that never acts.
    pub fn off() -> Self {
        Self::new(ChannelKind::Dissipation, 0.0)
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }

    /// The reset site for an array of `length` sites.
    pub fn resolved_site(&self, length: usize) -> Result<usize> {
        let site = self.site.unwrap_or(length.saturating_sub(1));
        if site >= length {
            return Err(Error::InvalidSite { site, length });
        }
        Ok(site)
    }

    pub fn validate(&self, spec: &LatticeSpec) -> Result<()> {
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(Error::InvalidParameter("channel rate must be finite and non-negative".into()));
        }
        self.resolved_site(spec.length).map(|_| ())
    }
}

/// Background relaxation and dephasing of every site, plus the temperature of
/// the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    /// `γ = 1/T₁` of a bare qubit.
    pub relaxation_rate: f64,
    /// `κ = 1/T_φ` of a bare qubit.
    pub dephasing_rate: f64,
    /// Temperature in kelvin.
    pub temperature: f64,
}

impl NoiseModel {
    /// Noise from bare-qubit times `T₁`, `T_φ` (infinite means absent).
    pub fn from_times(t1: f64, t_phi: f64, temperature: f64) -> Self {
        let rate = |t: f64| if t.is_finite() && t > 0.0 { 1.0 / t } else { 0.0 };
        NoiseModel {
            relaxation_rate: rate(t1),
            dephasing_rate: rate(t_phi),
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation_rate >= 0.0 && self.dephasing_rate >= 0.0) {
            return Err(Error::InvalidParameter("noise rates must be non-negative".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidParameter("temperature must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        self.relaxation_rate == 0.0 && self.dephasing_rate == 0.0
    }
}

/// `t₀ + k/Γ` for all `k ≥ 0` with time not exceeding `t_max`.
pub fn periodic_times(rate: f64, t0: f64, t_max: f64) -> Vec<f64> {
    if !(rate > 0.0) {
        return Vec::new();
    }
    let period = 1.0 / rate;
    (0..)
        .map(|k| t0 + k as f64 * period)
        .take_while(|&t| t <= t_max)
        .collect()
}

/// Draws the number of whole steps until the next Bernoulli success of
/// probability `p` per step, counting the successful step.
pub fn steps_to_next_event<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<u64> {
    if !(p > 0.0) {
        return Ok(u64::MAX);
    }
    if p > 1.0 {
        return Err(Error::StepTooLarge { probability: p });
    }
    let geo = Geometric::new(p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(geo.sample(rng).saturating_add(1))
}

/// Measurement times of a feedback channel up to `t_max`.
///
/// Periodic channels draw `t₀` uniformly on `[0, 1/Γ)`. Random channels test
/// every step of length `dt` with probability `Γ·dt`; the successes are found
/// by geometric skipping, which has the same distribution.
pub fn measurement_times<R: Rng + ?Sized>(
    channel: &ResetChannel,
    t_max: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !channel.kind.is_feedback() {
        return Err(Error::Unsupported("measurement times need a feedback channel".into()));
    }
    if channel.rate == 0.0 {
        return Ok(Vec::new());
    }
    match channel.kind {
        ChannelKind::PeriodicFeedback => {
            let t0 = rng.random::<f64>() / channel.rate;
            Ok(periodic_times(channel.rate, t0, t_max))
        }
        _ => {
            let p = channel.rate * dt;
            let n_steps = (t_max / dt + 1e-9).floor() as u64;
            let mut times = Vec::new();
            let mut step = 0u64;
            loop {
                step = step.saturating_add(steps_to_next_event(p, rng)?);
                if step > n_steps {
                    break;
                }
                times.push(step as f64 * dt);
            }
            Ok(times)
        }
    }
}

/// Born probabilities of the occupation of `site`.
pub fn site_probabilities(amplitudes: &[C64], basis: &FockBasis, site: usize) -> Vec<f64> {
    let mut probs = vec![0.0; basis.local_dim()];
    for (i, a) in amplitudes.iter().enumerate() {
        probs[basis.occupation(i, site)] += a.norm_sqr();
    }
    probs
}

/// Samples an outcome from unnormalized probabilities, skipping outcomes below
/// [`OUTCOME_CUTOFF`] of the total. `u` is uniform on `[0, 1)`.
pub fn sample_outcome(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let allowed: Vec<bool> = probs.iter().map(|&p| p > OUTCOME_CUTOFF * total).collect();
    let support: f64 = probs.iter().zip(&allowed).filter(|(_, &a)| a).map(|(p, _)| p).sum();
    let target = u * support;
    let mut acc = 0.0;
    let mut last = 0;
    for (n, (&p, &a)) in probs.iter().zip(&allowed).enumerate() {
        if !a {
            continue;
        }
        last = n;
        acc += p;
        if target < acc {
            return n;
        }
    }
    last
}

/// Projects `site` onto occupation `outcome` and maps it to `|0⟩`, in place.
/// The result is not normalized.
pub fn project_and_reset(amplitudes: &mut [C64], basis: &FockBasis, site: usize, outcome: usize) {
    let stride = basis.stride(site);
    for i in 0..amplitudes.len() {
        let n = basis.occupation(i, site);
        if n == 0 {
            let src = i + outcome * stride;
            amplitudes[i] = if outcome == 0 { amplitudes[i] } else { amplitudes[src] };
        }
    }
    for (i, a) in amplitudes.iter_mut().enumerate() {
        if basis.occupation(i, site) != 0 {
            *a = C64::new(0.0, 0.0);
        }
    }
}

/// Measures the occupation of `site` and resets it to `|0⟩`.
pub fn apply_feedback_measurement<R: Rng + ?Sized>(
    psi: &StateVector,
    basis: &FockBasis,
    site: usize,
    rng: &mut R,
) -> Result<(StateVector, usize)> {
    if site >= basis.sites() {
        return Err(Error::InvalidSite {
            site,
            length: basis.sites(),
        });
    }
    if psi.dim() != basis.dimension() {
        return Err(Error::DimensionMismatch {
            expected: basis.dimension(),
            found: psi.dim(),
        });
    }
    let probs = site_probabilities(psi.amplitudes(), basis, site);
    let outcome = sample_outcome(&probs, rng.random::<f64>());
    let mut amps = psi.amplitudes().to_vec();
    project_and_reset(&mut amps, basis, site, outcome);
    let mut out = StateVector::new(amps);
    out.normalize()?;
    Ok((out, outcome))
}

/// One first-order trajectory step.
///
/// With probability `dt‖L_k ψ‖²` the normalized jump `L_k ψ` is applied;
/// otherwise `ψ` is evolved by `no_jump` (built from
/// `H - (i/2) Σ L_k† L_k` with step `dt`) and renormalized.
pub fn dissipation_jump_step<R: Rng + ?Sized>(
    psi: &StateVector,
    jump_ops: &[OperatorMatrix],
    no_jump: &Propagator,
    rng: &mut R,
) -> Result<StateVector> {
    let dt = no_jump.dt();
    let jumped: Vec<Vec<C64>> = jump_ops.iter().map(|l| l.apply_vec(psi.amplitudes())).collect();
    let weights: Vec<f64> = jumped
        .iter()
        .map(|v| dt * v.iter().map(C64::norm_sqr).sum::<f64>())
        .collect();
    let total: f64 = weights.iter().sum();
    if total >= 1.0 {
        return Err(Error::StepTooLarge { probability: total });
    }
    let u = rng.random::<f64>();
    if u < total {
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc || k + 1 == weights.len() {
                let mut out = StateVector::new(jumped[k].clone());
                out.normalize()?;
                return Ok(out);
            }
        }
    }
    let mut out = psi.clone();
    no_jump.step(&mut out)?;
    out.normalize()?;
    Ok(out)
}

/// Relaxation `√γ a_ℓ` and dephasing `√(2κ) n_ℓ` on every site; operators with
/// zero rate are omitted.
pub fn noise_jump_operators(model: &NoiseModel, spec: &LatticeSpec) -> Result<Vec<OperatorMatrix>> {
    model.validate()?;
    let mut ops = Vec::new();
    for site in 0..spec.length {
        if model.relaxation_rate > 0.0 {
            let a = build_site_operator(spec, site, SiteOperatorKind::Annihilation)?;
            ops.push(a.scale(C64::new(model.relaxation_rate.sqrt(), 0.0)));
        }
        if model.dephasing_rate > 0.0 {
            let n = build_site_operator(spec, site, SiteOperatorKind::Number)?;
            ops.push(n.scale(C64::new((2.0 * model.dephasing_rate).sqrt(), 0.0)));
        }
    }
    Ok(ops)
}

/// Boltzmann weights of `|0⟩, |1⟩, |2⟩` for a site with frequency `omega` and
/// anharmonicity `u` at thermal energy `kt` (all angular), truncated at `n = 2`
/// and renormalized.
pub fn thermal_weights(omega: f64, u: f64, kt: f64) -> [f64; 3] {
    if kt == 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let e = [0.0, omega, 2.0 * omega - u];
    let w: Vec<f64> = e.iter().map(|&en| (-en / kt).exp()).collect();
    let z: f64 = w.iter().sum();
    [w[0] / z, w[1] / z, w[2] / z]
}

/// Idle-site occupations drawn from the `J = 0` Gibbs state. Frequencies are
/// taken to be in rad/µs when converting the temperature.
pub fn sample_thermal_occupations<R: Rng + ?Sized>(
    real: &DisorderRealization,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<Vec<usize>> {
    model.validate()?;
    let kt = thermal_angular_frequency(model.temperature);
    let mut occ = vec![0; real.spec.length];
    for (site, n) in occ.iter_mut().enumerate().skip(1) {
        if kt == 0.0 {
            continue;
        }
        let w = thermal_weights(real.omegas[site], real.anharmonicities[site], kt);
        *n = sample_outcome(&w, rng.random::<f64>());
    }
    Ok(occ)
}

/// `coding_state ⊗ |n₂ … n_L⟩` with idle occupations from the Gibbs state.
pub fn sample_thermal_initial<R: Rng + ?Sized>(
    real: &DisorderRealization,
    model: &NoiseModel,
    coding_state: &[C64],
    rng: &mut R,
) -> Result<StateVector> {
    let basis = real.spec.fock_basis()?;
    if coding_state.len() != basis.local_dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.local_dim(),
            found: coding_state.len(),
        });
    }
    let occ = sample_thermal_occupations(real, model, rng)?;
    let mut locals = vec![coding_state.to_vec()];
    for &n in &occ[1..] {
        let mut ket = vec![C64::new(0.0, 0.0); basis.local_dim()];
        ket[n] = C64::new(1.0, 0.0);
        locals.push(ket);
    }
    StateVector::product(&basis, &locals)
}

/// Basis tag of the Fock space of `spec`.
pub fn fock_tag(spec: &LatticeSpec) -> Basis {
    Basis::Fock {
        sites: spec.length,
        local_dim: spec.local_dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::realize_disorder;
    use crate::units::mhz_to_angular;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn periodic_progression() {
        assert_eq!(periodic_times(1.0, 0.2, 3.5), vec![0.2, 1.2, 2.2, 3.2]);
        assert!(periodic_times(0.0, 0.2, 3.5).is_empty());
    }

    #[test]
    fn zero_rate_has_no_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ch = ResetChannel::random_feedback(0.0);
        assert!(measurement_times(&ch, 10.0, 0.01, &mut rng).unwrap().is_empty());
        let ch = ResetChannel::periodic_feedback(0.0);
        assert!(measurement_times(&ch, 10.0, 0.01, &mut rng).unwrap().is_empty());
        assert!(measurement_times(&ResetChannel::dissipation(1.0), 1.0, 0.1, &mut rng).is_err());
    }

    #[test]
    fn random_event_count_is_poisson() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = ResetChannel::random_feedback(2.0);
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|_| measurement_times(&ch, 5.0, 0.001, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 10.0).abs() < 0.3, "{mean}");
    }

    #[test]
    fn periodic_offset_within_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = measurement_times(&ResetChannel::periodic_feedback(4.0), 10.0, 0.01, &mut rng).unwrap();
            assert!(t[0] >= 0.0 && t[0] < 0.25);
            assert!(t.windows(2).all(|w| (w[1] - w[0] - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn feedback_on_leaked_last_site() {
        let b = FockBasis::new(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (post, n) = apply_feedback_measurement(&StateVector::fock(&b, &[0, 2]), &b, 1, &mut rng).unwrap();
        assert_eq!(n, 2);
        assert_eq!(post, StateVector::fock(&b, &[0, 0]));
    }

    #[test]
    fn feedback_on_superposition() {
        let b = FockBasis::new(2, 3);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut amps = vec![c(0.0); 9];
        amps[b.index_of(&[0, 1])] = c(s);
        amps[b.index_of(&[0, 0])] = c(s);
        let psi = StateVector::new(amps);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ones = 0;
        for _ in 0..2000 {
            let (post, n) = apply_feedback_measurement(&psi, &b, 1, &mut rng).unwrap();
            ones += n;
            assert_eq!(post, StateVector::fock(&b, &[0, 0]));
        }
        assert!((ones as f64 / 2000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn zero_probability_outcomes_never_drawn() {
        assert_eq!(sample_outcome(&[0.0, 1e-20, 1.0], 0.0), 2);
        assert_eq!(sample_outcome(&[0.5, 1e-20, 0.5], 0.999_999), 2);
    }

    #[test]
    fn noise_operators() {
        let spec = LatticeSpec::new(3, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert!(noise_jump_operators(&NoiseModel::default(), &spec).unwrap().is_empty());
        let m = NoiseModel {
            relaxation_rate: 0.1,
            dephasing_rate: 0.3,
            temperature: 0.0,
        };
        assert_eq!(noise_jump_operators(&m, &spec).unwrap().len(), 6);
        let single = LatticeSpec::new(1, 0.0, 1.0, 1.0, 0.0).unwrap();
        let ops = noise_jump_operators(
            &NoiseModel {
                dephasing_rate: 0.3,
                ..Default::default()
            },
            &single,
        )
        .unwrap();
        assert!((ops[0].get(1, 1).norm_sqr() - 0.6).abs() < 1e-14);
    }

    #[test]
    fn zero_temperature_gives_ground_state() {
        let spec = LatticeSpec::new(3, mhz_to_angular(7500.0), mhz_to_angular(250.0), 1.0, 10.0).unwrap();
        let real = realize_disorder(&spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = vec![c(0.0), c(1.0), c(0.0)];
        let psi = sample_thermal_initial(&real, &NoiseModel::default(), &one, &mut rng).unwrap();
        assert_eq!(psi, StateVector::fock(&spec.fock_basis().unwrap(), &[1, 0, 0]));
        assert!(sample_thermal_initial(
            &real,
            &NoiseModel {
                temperature: -1.0,
                ..Default::default()
            },
            &one,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn thermal_weights_normalized() {
        let w = thermal_weights(mhz_to_angular(7500.0), mhz_to_angular(250.0), thermal_angular_frequency(0.1));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[1] / w[0] - (-3.5995f64).exp()).abs() < 1e-4);
    }
}
