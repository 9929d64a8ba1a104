//! Unit conventions.
//!
//! Internally every rate and energy is an angular frequency with ħ = 1. When
//! physical units are used, frequencies are in rad/µs and times in µs, so an
//! ordinary frequency of `f` MHz becomes `2π f` rad/µs.

use std::f64::consts::PI;

/// Boltzmann constant over Planck constant, in MHz per kelvin.
pub const KB_OVER_H_MHZ_PER_K: f64 = 20_836.619_123_327_57;

/// Ordinary frequency in MHz to angular frequency in rad/µs.
pub fn mhz_to_angular(f_mhz: f64) -> f64 {
    2.0 * PI * f_mhz
}

/// Angular frequency in rad/µs to ordinary frequency in MHz.
pub fn angular_to_mhz(omega: f64) -> f64 {
    omega / (2.0 * PI)
}

/// Thermal energy k_B T as an angular frequency in rad/µs.
pub fn thermal_angular_frequency(temperature_kelvin: f64) -> f64 {
    2.0 * PI * KB_OVER_H_MHZ_PER_K * temperature_kelvin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        assert!((angular_to_mhz(mhz_to_angular(7500.0)) - 7500.0).abs() < 1e-9);
    }

    #[test]
    fn boltzmann_exponent_for_transmon_at_100_mk() {
        // ħω / k_B T for 7.5 GHz at 100 mK
        let x = mhz_to_angular(7500.0) / thermal_angular_frequency(0.1);
        assert!((x - 3.5995).abs() < 1e-3, "{x}");
    }
}
