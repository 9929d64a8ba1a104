//! Closed-form rates, populations and norms for the two-site problem and the
//! effective propagation model.
//!
//! Every function takes rates and energies in one consistent unit system
//! (for example everything in units of `J`, or everything in rad/µs) and
//! returns rates in the same unit.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

/// Relative half-width of the band around an exceptional point where the
/// limiting value is returned.
pub const EXCEPTIONAL_GUARD: f64 = 1e-6;

/// Largest `β/Δ` for which the perturbative Liouvillian gap is trusted.
pub const GAP_VALIDITY: f64 = 0.35;

/// Parameters of the two-site problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSiteParams {
    pub anharmonicity: f64,
    pub hopping: f64,
    /// `ω₁ - ω₂`.
    pub detuning: f64,
    pub rate: f64,
}

impl TwoSiteParams {
    pub fn new(anharmonicity: f64, hopping: f64, detuning: f64, rate: f64) -> Result<Self> {
        if !(anharmonicity > 0.0) {
            return Err(Error::InvalidParameter("anharmonicity must be positive".into()));
        }
        if !(hopping >= 0.0) || !(rate >= 0.0) {
            return Err(Error::InvalidParameter("hopping and rate must be non-negative".into()));
        }
        Ok(TwoSiteParams {
            anharmonicity,
            hopping,
            detuning,
            rate,
        })
    }
}

/// Frequency of the `|20⟩,|02⟩ ↔ |11⟩` oscillation, `√(Ū² + 16J²)`.
pub fn disintegration_frequency(p: &TwoSiteParams) -> f64 {
    (p.anharmonicity.powi(2) + 16.0 * p.hopping.powi(2)).sqrt()
}

/// Initial state of the two-excitation sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairState {
    /// `(|20⟩ + |02⟩)/√2`.
    Symmetric,
    /// `|20⟩`.
    Localized,
}

/// `(ρ₂₀,₂₀, ρ₀₂,₀₂, ρ₁₁,₁₁)` at time `t` for unitary two-site dynamics.
pub fn two_site_populations(p: &TwoSiteParams, t: f64, initial: PairState) -> Result<(f64, f64, f64)> {
    if p.rate != 0.0 {
        return Err(Error::InvalidParameter("closed-form populations need a vanishing rate".into()));
    }
    let u = p.anharmonicity;
    let j = p.hopping;
    let w = disintegration_frequency(p);
    Ok(match initial {
        PairState::Symmetric => {
            let c = (w * t).cos();
            let leak = u * u / (2.0 * w * w) * (1.0 - c) + 0.5 * (1.0 + c);
            let single = 8.0 * j * j / (w * w) * (1.0 - c);
            (leak / 2.0, leak / 2.0, single)
        }
        PairState::Localized => {
            let (sw, cw) = (0.5 * w * t).sin_cos();
            let (su, cu) = (0.5 * u * t).sin_cos();
            let a = u / (2.0 * w) * sw;
            let r20 = (a + 0.5 * su).powi(2) + (0.5 * cw + 0.5 * cu).powi(2);
            let r02 = (a - 0.5 * su).powi(2) + (0.5 * cw - 0.5 * cu).powi(2);
            let r11 = 8.0 * j * j / (w * w) * sw * sw;
            (r20, r02, r11)
        }
    })
}

/// Residual of `sin(Ūπ/2ω_dis) = (8J² - Ū²)/(Ū ω_dis)` at `Ū/J = ratio`.
pub fn disintegration_residual(ratio: f64) -> f64 {
    let w = (ratio * ratio + 16.0).sqrt();
    (ratio * PI / (2.0 * w)).sin() - (8.0 - ratio * ratio) / (ratio * w)
}

fn residual_derivative(ratio: f64) -> f64 {
    let h = 1e-6 * ratio.max(1.0);
    (disintegration_residual(ratio + h) - disintegration_residual(ratio - h)) / (2.0 * h)
}

/// Root of [`disintegration_residual`] by bisection on `[1, 3]`: the `Ū/J`
/// above which leakage propagates as a pair rather than disintegrating.
pub fn disintegration_threshold() -> Result<f64> {
    let (mut lo, mut hi) = (1.0f64, 3.0f64);
    let (flo, fhi) = (disintegration_residual(lo), disintegration_residual(hi));
    if flo.signum() == fhi.signum() {
        return Err(Error::RootNotFound);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = disintegration_residual(mid);
        if fm == 0.0 || hi - lo < 1e-15 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The same root by Newton iteration from `Ū/J = 2`.
pub fn disintegration_threshold_newton() -> Result<f64> {
    let mut x = 2.0;
    for _ in 0..100 {
        let step = disintegration_residual(x) / residual_derivative(x);
        if !step.is_finite() {
            return Err(Error::RootNotFound);
        }
        x -= step;
        if step.abs() < 1e-14 {
            return Ok(x);
        }
    }
    Err(Error::RootNotFound)
}

/// Leakage removal rate by feedback in the propagation regime,
/// `2J_prop²Γ/(4J_prop² + Γ²)`, largest at `Γ = 2J_prop`.
pub fn fb_leakage_rate_low(rate: f64, j_prop: f64) -> f64 {
    let d = 4.0 * j_prop * j_prop + rate * rate;
    if d == 0.0 {
        0.0
    } else {
        2.0 * j_prop * j_prop * rate / d
    }
}

/// Leakage removal rate by feedback in the disintegration regime,
/// `4J²Γ/(Γ² + Ū²)`, largest at `Γ = Ū`.
pub fn fb_leakage_rate_high(rate: f64, hopping: f64, anharmonicity: f64) -> f64 {
    4.0 * hopping * hopping * rate / (rate * rate + anharmonicity * anharmonicity)
}

/// Qubit `(T₁, T₂)` under feedback at rate Γ with detuning `δω = ω₁ - ω₂`:
/// `T₁ = (Γ² + δω²)/(2J²Γ)` and `T₂ = 2T₁`.
pub fn fb_qubit_times(rate: f64, hopping: f64, detuning: f64) -> Result<(f64, f64)> {
    if rate == 0.0 || hopping == 0.0 {
        return Err(Error::Unbounded);
    }
    let t1 = (rate * rate + detuning * detuning) / (2.0 * hopping * hopping * rate);
    Ok((t1, 2.0 * t1))
}

/// Leakage removal rate by dissipation in the propagation regime,
/// `2J_prop²Γ/(2J_prop² + Γ²)`, largest at `Γ = √2 J_prop`.
pub fn diss_rate_low(rate: f64, j_prop: f64) -> f64 {
    let d = 2.0 * j_prop * j_prop + rate * rate;
    if d == 0.0 {
        0.0
    } else {
        2.0 * j_prop * j_prop * rate / d
    }
}

/// Leakage removal rate by dissipation in the disintegration regime,
/// `8J²Γ/(4Ū² + Γ²)`, largest at `Γ = 2Ū`.
pub fn diss_rate_high(rate: f64, hopping: f64, anharmonicity: f64) -> f64 {
    8.0 * hopping * hopping * rate / (4.0 * anharmonicity * anharmonicity + rate * rate)
}

/// No-jump norm of the two-site effective propagation model with dissipation
/// at rate Γ on site 2, starting from the leakage on site 1.
///
/// Uses the oscillating branch below the exceptional point `Γ = 2J_prop` and
/// the hyperbolic branch above it. Within a relative band of
/// [`EXCEPTIONAL_GUARD`] around it the limit
/// `e^{-2J_prop t}(1 + 2J_prop t + 2J_prop² t²)` is returned; exact equality is
/// rejected.
pub fn diss_norm_exact_l2(rate: f64, j_prop: f64, t: f64) -> Result<f64> {
    if !(rate >= 0.0 && j_prop > 0.0) {
        return Err(Error::InvalidParameter("need Γ ≥ 0 and J_prop > 0".into()));
    }
    let ep = 2.0 * j_prop;
    if rate == ep {
        return Err(Error::ExceptionalPoint);
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let x = rate / j_prop;
    if (rate - ep).abs() <= EXCEPTIONAL_GUARD * ep {
        let a = j_prop * t;
        return Ok((-2.0 * a).exp() * (1.0 + 2.0 * a + 2.0 * a * a));
    }
    let decay = (-rate * t).exp();
    if rate < ep {
        let s = (4.0 * j_prop * j_prop - rate * rate).sqrt();
        let bracket = 4.0 - x * x * (s * t).cos() + 2.0 * x * (1.0 - x * x / 4.0).sqrt() * (s * t).sin();
        Ok(decay / (4.0 - x * x) * bracket)
    } else {
        let s = (rate * rate - 4.0 * j_prop * j_prop).sqrt();
        // e^{-Γt} cosh(st) and e^{-Γt} sinh(st) without overflow
        let ep_ = 0.5 * (-(rate - s) * t).exp();
        let em_ = 0.5 * (-(rate + s) * t).exp();
        let (ch, sh) = (ep_ + em_, ep_ - em_);
        let bracket = -4.0 * decay + x * x * ch + 2.0 * x * (x * x / 4.0 - 1.0).sqrt() * sh;
        Ok(bracket / (x * x - 4.0))
    }
}

/// Asymptotic regime of the effective propagation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRegime {
    /// `Γ ≪ J_prop`.
    Low,
    /// `Γ ≫ J_prop`.
    High,
}

/// Weights and rates of the multi-exponential norm `Σ w_k e^{-r_k t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTerms {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl NormTerms {
    pub fn evaluate(&self, t: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(w, r)| w * (-r * t).exp())
            .sum()
    }
}

/// Exponential terms of the no-jump norm for a chain of `length` sites in
/// the effective propagation model, dissipated at the last site.
///
/// With `borders = false` the boundary on-site terms are dropped and the
/// sine-mode sums hold for any length. With `borders = true` only lengths 2
/// and 3 are available; for length 3 the low-rate eigenvectors
/// `(-1,0,1)/√2, (1,2,1)/√6, (1,-1,1)/√3` and the high-rate golden-ratio
/// eigenvectors `(a,1,0)`, `(b,1,0)` with `a = (√5-1)/2`, `b = -(1+√5)/2`
/// give weights `a²/(1+a²)`, `b²/(1+b²)` and rates `(2J_prop²/Γ)/(1+a²)`,
/// `(2J_prop²/Γ)/(1+b²)`.
pub fn diss_norm_terms(
    length: usize,
    rate: f64,
    j_prop: f64,
    regime: RateRegime,
    borders: bool,
) -> Result<NormTerms> {
    if length < 2 {
        return Err(Error::InvalidParameter("length must be at least 2".into()));
    }
    if !(rate > 0.0 && j_prop > 0.0) {
        return Err(Error::InvalidParameter("need Γ > 0 and J_prop > 0".into()));
    }
    let zeno = 2.0 * j_prop * j_prop / rate;
    if borders {
        return match (length, regime) {
            (2, RateRegime::Low) => Ok(NormTerms {
                weights: vec![1.0],
                rates: vec![rate],
            }),
            (2, RateRegime::High) => Ok(NormTerms {
                weights: vec![1.0],
                rates: vec![zeno],
            }),
            (3, RateRegime::Low) => Ok(NormTerms {
                weights: vec![0.5, 1.0 / 6.0, 1.0 / 3.0],
                rates: vec![rate, rate / 3.0, 2.0 * rate / 3.0],
            }),
            (3, RateRegime::High) => {
                let a = 0.5 * (5f64.sqrt() - 1.0);
                let b = -0.5 * (1.0 + 5f64.sqrt());
                Ok(NormTerms {
                    weights: vec![a * a / (1.0 + a * a), b * b / (1.0 + b * b)],
                    rates: vec![zeno / (1.0 + a * a), zeno / (1.0 + b * b)],
                })
            }
            _ => Err(Error::Unsupported(format!(
                "edge-localized closed form for length {length}"
            ))),
        };
    }
    let l = length as f64;
    match regime {
        RateRegime::Low => {
            let (mut weights, mut rates) = (Vec::new(), Vec::new());
            for m in 1..=length {
                let k = m as f64 * PI / (l + 1.0);
                let norm: f64 = (1..=length).map(|j| (j as f64 * k).sin().powi(2)).sum();
                weights.push(k.sin().powi(2) / norm);
                rates.push(4.0 / (l + 1.0) * (l * k).sin().powi(2) * rate);
            }
            Ok(NormTerms { weights, rates })
        }
        RateRegime::High => {
            let (mut weights, mut rates) = (Vec::new(), Vec::new());
            for m in 1..length {
                let k = m as f64 * PI / l;
                let norm: f64 = (1..length).map(|j| (j as f64 * k).sin().powi(2)).sum();
                weights.push(k.sin().powi(2) / norm);
                rates.push(zeno * ((l - 1.0) * k).sin().powi(2) / norm);
            }
            Ok(NormTerms { weights, rates })
        }
    }
}

/// Evaluates [`diss_norm_terms`] at time `t`.
pub fn diss_norm_general_l(
    length: usize,
    rate: f64,
    j_prop: f64,
    t: f64,
    regime: RateRegime,
    borders: bool,
) -> Result<f64> {
    Ok(diss_norm_terms(length, rate, j_prop, regime, borders)?.evaluate(t))
}

/// Qubit dissipation times `(τ₁, τ₂)` under engineered dissipation:
/// `τ₁ = (4δω² + Γ²)/(4FJ²Γ)`, `τ₂ = 2τ₁`, with `δω = ω₁ - ω_L` and
/// `F = Π_{n=2}^{L-1} J²/(ω₁ - ω_n)²`. `intermediate_detunings` holds
/// `ω₁ - ω_n` for the `L - 2` interior sites.
pub fn diss_qubit_times(
    rate: f64,
    hopping: f64,
    detuning_first_last: f64,
    length: usize,
    intermediate_detunings: &[f64],
) -> Result<(f64, f64)> {
    if length < 2 {
        return Err(Error::InvalidParameter("length must be at least 2".into()));
    }
    if intermediate_detunings.len() != length - 2 {
        return Err(Error::DimensionMismatch {
            expected: length - 2,
            found: intermediate_detunings.len(),
        });
    }
    let mut f = 1.0;
    for (k, d) in intermediate_detunings.iter().enumerate() {
        if *d == 0.0 {
            return Err(Error::DegenerateDetuning { site: k + 1 });
        }
        f *= hopping * hopping / (d * d);
    }
    if rate == 0.0 || hopping == 0.0 {
        return Err(Error::Unbounded);
    }
    let tau1 = (4.0 * detuning_first_last.powi(2) + rate * rate) / (4.0 * f * hopping * hopping * rate);
    Ok((tau1, 2.0 * tau1))
}

/// Slowest nonzero eigenvalue of the Liouvillian of a qubit
/// `H = Δσ_z + βσ_x` under standard measurements at rate `Γ_st`.
///
/// On resonance (`Δ = 0`) the exact value `(-Γ + √(Γ² - 16β²))/2` is returned
/// (complex below the exceptional point `Γ = 4β`). Otherwise the perturbative
/// gap `-4Γβ²/(Γ² + 4Δ²)`, trusted for `β/|Δ| ≤` [`GAP_VALIDITY`].
pub fn liouvillian_qubit_gap(detuning: f64, drive: f64, rate: f64) -> C64 {
    if detuning == 0.0 {
        let disc = C64::new(rate * rate - 16.0 * drive * drive, 0.0).sqrt();
        return (C64::new(-rate, 0.0) + disc) / 2.0;
    }
    C64::new(-4.0 * rate * drive * drive / (rate * rate + 4.0 * detuning * detuning), 0.0)
}

/// Whether [`liouvillian_qubit_gap`] is within its perturbative validity.
pub fn liouvillian_gap_is_reliable(detuning: f64, drive: f64) -> bool {
    detuning == 0.0 || (drive / detuning).abs() <= GAP_VALIDITY
}

/// The four exact on-resonance Liouvillian eigenvalues
/// `{0, (-Γ ∓ √(Γ² - 16β²))/2, -Γ}`.
pub fn liouvillian_resonant_spectrum(drive: f64, rate: f64) -> [C64; 4] {
    let disc = C64::new(rate * rate - 16.0 * drive * drive, 0.0).sqrt();
    [
        C64::new(0.0, 0.0),
        (C64::new(-rate, 0.0) - disc) / 2.0,
        (C64::new(-rate, 0.0) + disc) / 2.0,
        C64::new(-rate, 0.0),
    ]
}
