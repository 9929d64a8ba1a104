//! Leakage populations, qubit coherences and exponential decay fits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::FockBasis;
use crate::propagator::StateVector;
use crate::C64;

/// Which sites contribute to a leakage population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageSites {
    All,
    /// Only the coding site.
    First,
}

/// `Σ n_ℓ(n_ℓ-1)/2` over the selected sites for every basis state.
pub fn leakage_diagonal(basis: &FockBasis, sites: LeakageSites) -> Vec<f64> {
    let range = match sites {
        LeakageSites::All => 0..basis.sites(),
        LeakageSites::First => 0..1,
    };
    (0..basis.dimension())
        .map(|i| {
            range
                .clone()
                .map(|s| {
                    let n = basis.occupation(i, s);
                    (n * n.saturating_sub(1)) as f64 / 2.0
                })
                .sum()
        })
        .collect()
}

/// Occupation `n_site` for every basis state.
pub fn occupation_diagonal(basis: &FockBasis, site: usize) -> Vec<f64> {
    (0..basis.dimension())
        .map(|i| basis.occupation(i, site) as f64)
        .collect()
}

/// Leakage population of a pure state (normalized by `⟨ψ|ψ⟩`).
pub fn leakage_population(psi: &StateVector, basis: &FockBasis, sites: LeakageSites) -> f64 {
    psi.expectation_diagonal(&leakage_diagonal(basis, sites)) / psi.norm_sqr()
}

/// Leakage population of a density matrix.
pub fn leakage_population_density(rho: &DMatrix<C64>, basis: &FockBasis, sites: LeakageSites) -> f64 {
    let d = leakage_diagonal(basis, sites);
    let tr: f64 = (0..rho.nrows()).map(|i| rho[(i, i)].re).sum();
    (0..rho.nrows()).map(|i| rho[(i, i)].re * d[i]).sum::<f64>() / tr
}

/// `⟨0|ρ_site|1⟩` of the reduced density matrix of `site` for the pure state
/// with the given amplitudes (not normalized).
pub fn site_coherence(amplitudes: &[C64], basis: &FockBasis, site: usize) -> C64 {
    let stride = basis.stride(site);
    let mut acc = C64::new(0.0, 0.0);
    for (i, a) in amplitudes.iter().enumerate() {
        if basis.occupation(i, site) == 0 {
            acc += a * amplitudes[i + stride].conj();
        }
    }
    acc
}

/// `⟨0|ρ_site|1⟩` from a full density matrix.
pub fn site_coherence_density(rho: &DMatrix<C64>, basis: &FockBasis, site: usize) -> C64 {
    let stride = basis.stride(site);
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..rho.nrows() {
        if basis.occupation(i, site) == 0 {
            acc += rho[(i, i + stride)];
        }
    }
    acc
}

/// `2|c(t)|`, the envelope of `⟨σ_x⟩ = 2 Re c(t)`.
pub fn coherence_envelope(series: &[C64]) -> Vec<f64> {
    series.iter().map(|c| 2.0 * c.norm()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Linear least squares on `ln y`.
    LogLinear,
    /// Levenberg-Marquardt on `A e^{-t/τ}`.
    Nonlinear,
}

/// Result of fitting `A e^{-t/τ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub decay_time: f64,
    /// Amplitude `A` extrapolated to `t = 0`.
    pub amplitude: f64,
    pub fit_window: (f64, f64),
    /// Root-mean-square of `y - A e^{-t/τ}` over the window.
    pub rms_residual: f64,
    pub converged: bool,
    pub points: usize,
    pub method: FitMethod,
}

impl FitResult {
    /// The decay time, or a fit error if the fit did not converge.
    pub fn time(&self) -> Result<f64> {
        if self.converged {
            Ok(self.decay_time)
        } else {
            Err(Error::Fit(format!(
                "no converged exponential on window [{}, {}]",
                self.fit_window.0, self.fit_window.1
            )))
        }
    }

    pub fn rate(&self) -> f64 {
        1.0 / self.decay_time
    }
}

/// Minimum number of samples inside a fit window.
pub const MIN_FIT_POINTS: usize = 10;

/// Samples below this switch the fit from log space to nonlinear.
pub const LOG_FIT_FLOOR: f64 = 1e-6;

fn rms(t: &[f64], y: &[f64], a: f64, k: f64) -> f64 {
    let s: f64 = t
        .iter()
        .zip(y)
        .map(|(&ti, &yi)| (yi - a * (-k * ti).exp()).powi(2))
        .sum();
    (s / t.len() as f64).sqrt()
}

fn log_linear(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|ti| (ti - mt).powi(2)).sum();
    let sxy: f64 = t.iter().zip(&ly).map(|(ti, li)| (ti - mt) * (li - my)).sum();
    let slope = sxy / sxx;
    ((my - slope * mt).exp(), -slope)
}

/// Levenberg-Marquardt for `(A, k)` in `A e^{-k t}`.
fn levenberg_marquardt(t: &[f64], y: &[f64], mut a: f64, mut k: f64) -> Option<(f64, f64)> {
    let cost = |a: f64, k: f64| -> f64 {
        t.iter()
            .zip(y)
            .map(|(&ti, &yi)| (yi - a * (-k * ti).exp()).powi(2))
            .sum()
    };
    let mut lambda = 1e-3;
    let mut c = cost(a, k);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&ti, &yi) in t.iter().zip(y) {
            let e = (-k * ti).exp();
            let r = yi - a * e;
            let g = [e, -a * ti * e];
            for p in 0..2 {
                jtr[p] += g[p] * r;
                for q in 0..2 {
                    jtj[p][q] += g[p] * g[q];
                }
            }
        }
        let mut improved = false;
        for _ in 0..50 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det == 0.0 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let da = (m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let dk = (m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let (na, nk) = (a + da, k + dk);
            let nc = cost(na, nk);
            if nc.is_finite() && nc <= c {
                let rel = (c - nc) / c.max(f64::MIN_POSITIVE);
                a = na;
                k = nk;
                c = nc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-15 || (da.abs() <= 1e-13 * a.abs() && dk.abs() <= 1e-13 * k.abs()) {
                    return Some((a, k));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            return Some((a, k));
        }
    }
    Some((a, k))
}

/// Least-squares fit of `A e^{-t/τ}` to the samples with `t_start ≤ t ≤ t_end`
/// (`t_end = None` means the last sample).
///
/// The fit is done on `ln y` when every sample in the window exceeds
/// [`LOG_FIT_FLOOR`], and by Levenberg-Marquardt otherwise. Windows with fewer
/// than [`MIN_FIT_POINTS`] samples, negative samples, or a non-decaying best
/// fit give `converged = false`.
pub fn fit_exponential(times: &[f64], values: &[f64], t_start: f64, t_end: Option<f64>) -> FitResult {
    let t_end = t_end.unwrap_or(f64::INFINITY);
    let (t, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(&ti, _)| ti >= t_start - 1e-12 * ti.abs().max(1.0) && ti <= t_end)
        .map(|(&ti, &yi)| (ti, yi))
        .unzip();
    let window = (
        t.first().copied().unwrap_or(t_start),
        t.last().copied().unwrap_or(t_start),
    );
    let mut result = FitResult {
        decay_time: f64::NAN,
        amplitude: f64::NAN,
        fit_window: window,
        rms_residual: f64::NAN,
        converged: false,
        points: t.len(),
        method: FitMethod::LogLinear,
    };
    if t.len() < MIN_FIT_POINTS || y.iter().any(|v| !v.is_finite() || *v < 0.0) || y.iter().all(|&v| v <= 0.0) {
        return result;
    }
    let t0 = window.0;
    let shifted: Vec<f64> = t.iter().map(|ti| ti - t0).collect();
    let (a, k) = if y.iter().all(|&v| v > LOG_FIT_FLOOR) {
        log_linear(&shifted, &y)
    } else {
        result.method = FitMethod::Nonlinear;
        let pos: Vec<(f64, f64)> = shifted
            .iter()
            .zip(&y)
            .filter(|(_, &v)| v > 0.0)
            .map(|(&a, &b)| (a, b))
            .collect();
        let (a0, k0) = if pos.len() >= 2 {
            let (pt, py): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
            log_linear(&pt, &py)
        } else {
            (y[0].max(f64::MIN_POSITIVE), 1.0 / (shifted.last().unwrap() + 1e-300))
        };
        let k0 = if k0.is_finite() && k0 > 0.0 { k0 } else { 1.0 / shifted.last().unwrap() };
        match levenberg_marquardt(&shifted, &y, a0, k0) {
            Some(p) => p,
            None => return result,
        }
    };
    result.rms_residual = rms(&shifted, &y, a, k);
    if !(k > 0.0) || !k.is_finite() || !a.is_finite() {
        return result;
    }
    result.decay_time = 1.0 / k;
    result.amplitude = a * (k * t0).exp();
    result.converged = true;
    result
}

/// Leakage hop time `T_prop = π/(2J_prop) = πŪ/(4J²)`.
pub fn propagation_time(hopping: f64, anharmonicity: f64) -> Result<f64> {
    if !(hopping > 0.0 && anharmonicity > 0.0) {
        return Err(Error::InvalidParameter("J and Ū must be positive".into()));
    }
    Ok(std::f64::consts::PI * anharmonicity / (4.0 * hopping * hopping))
}

/// First interior local minimum of a sampled curve, refined by a parabola
/// through the three neighbouring samples. Returns `(t, value)`.
pub fn first_local_minimum(times: &[f64], values: &[f64]) -> Option<(f64, f64)> {
    for i in 1..values.len().saturating_sub(1) {
        if values[i] < values[i - 1] && values[i] <= values[i + 1] {
            let (t0, t1, t2) = (times[i - 1], times[i], times[i + 1]);
            let (y0, y1, y2) = (values[i - 1], values[i], values[i + 1]);
            let denom = (t0 - t1) * (t0 - t2) * (t1 - t2);
            let a = (t2 * (y1 - y0) + t1 * (y0 - y2) + t0 * (y2 - y1)) / denom;
            let b = (t2 * t2 * (y0 - y1) + t1 * t1 * (y2 - y0) + t0 * t0 * (y1 - y2)) / denom;
            if a > 0.0 {
                let tv = -b / (2.0 * a);
                if tv >= t0 && tv <= t2 {
                    let c = y1 - a * t1 * t1 - b * t1;
                    return Some((tv, a * tv * tv + b * tv + c));
                }
            }
            return Some((t1, y1));
        }
    }
    None
}
