//! Transmitter and channel impairments on baseband frames.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dsp::ComplexFrame;

/// Baseband equivalent of up-converting with mismatched mixers
/// `g_I cos(wt - eps_p/2)` and `g_Q sin(wt + eps_p/2)` followed by ideal
/// quadrature down-conversion.
pub fn apply_iq_imbalance(x: &ComplexFrame, g_i: f64, g_q: f64, eps_p: f64) -> ComplexFrame {
    let (s, c) = (eps_p / 2.0).sin_cos();
    x.map(|v| {
        let (i, q) = (g_i * v.re, g_q * v.im);
        Complex64::new(i * c + q * s, i * s + q * c)
    })
}

/// Memoryless rational AM/AM and AM/PM power-amplifier model:
/// amplitude `alpha_a r / (1 + beta_a r^2)`, phase shift `alpha_phi r^2 / (1 + beta_phi r^2)`.
pub fn apply_pa(x: &ComplexFrame, alpha_a: f64, beta_a: f64, alpha_phi: f64, beta_phi: f64) -> ComplexFrame {
    x.map(|v| {
        let r = v.norm();
        if r == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let r2 = r * r;
        let gain = alpha_a / (1.0 + beta_a * r2);
        let dphi = alpha_phi * r2 / (1.0 + beta_phi * r2);
        v * gain * Complex64::from_polar(1.0, dphi)
    })
}

/// Residual carrier rotation `exp(-j 2 pi eps_f n / f_s)`.
pub fn apply_cfo(x: &ComplexFrame, eps_f: f64, sample_rate: f64) -> ComplexFrame {
    let w = -2.0 * PI * eps_f / sample_rate;
    let samples = x
        .samples()
        .iter()
        .enumerate()
        .map(|(n, v)| v * Complex64::from_polar(1.0, w * n as f64))
        .collect();
    x.with_samples(samples)
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the frame's
/// own mean power. An infinite SNR returns the frame unchanged.
pub fn apply_awgn(x: &ComplexFrame, snr_db: f64, rng: &mut impl Rng) -> ComplexFrame {
    if snr_db == f64::INFINITY {
        return x.clone();
    }
    let noise_power = x.mean_power() / 10f64.powf(snr_db / 10.0);
    let sigma = (noise_power / 2.0).sqrt();
    x.map(|v| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        v + Complex64::new(re * sigma, im * sigma)
    })
}
