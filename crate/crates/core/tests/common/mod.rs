#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rfp_core::dsp::{normalize_energy, ComplexFrame, Window, SAMPLE_RATE_HZ};
use rfp_core::radio::profile::{sample_device_profile, ProfileRanges};
use rfp_core::radio::{stream_rng, synthesize_frame, Stream};

pub fn random_frame(rng: &mut impl Rng, n: usize) -> ComplexFrame {
    let s = (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    ComplexFrame::wifi(s).unwrap()
}

pub fn tone(theta: f64, n: usize) -> ComplexFrame {
    ComplexFrame::wifi((0..n).map(|i| Complex64::from_polar(1.0, theta * i as f64)).collect()).unwrap()
}

/// O(N^2) forward DFT.
pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

/// STFT by direct summation, `frames x j` row-major.
pub fn direct_stft(x: &[Complex64], j: usize, k: usize, window: Window) -> Vec<Complex64> {
    let w = window.coefficients(j);
    let frames = (x.len() - j) / k + 1;
    let mut out = Vec::new();
    for m in 0..frames {
        let seg: Vec<Complex64> = (0..j).map(|n| x[m * k + n] * w[n]).collect();
        out.extend(naive_dft(&seg));
    }
    out
}

pub const CARRIER_HZ: f64 = 400e6;
/// Passband samples per carrier period.
pub const PASSBAND_OVERSAMPLE: usize = 64;

/// Up-converts each baseband sample with the impaired mixers
/// `g_i cos(wt - eps_p/2)` and `g_q sin(wt + eps_p/2)`, then down-converts
/// with ideal `2cos(wt)` / `2sin(wt)` and lowpasses with a triangular window
/// two carrier periods wide centred on the sample instant. The window has a
/// double zero at twice the carrier, so the mixing products cancel even while
/// the baseband signal moves. `signal(t)` is evaluated at passband resolution.
pub fn passband_iq_oracle(
    signal: impl Fn(f64) -> Complex64,
    n: usize,
    sample_rate: f64,
    g_i: f64,
    g_q: f64,
    eps_p: f64,
) -> Vec<Complex64> {
    let w = 2.0 * PI * CARRIER_HZ;
    let m = PASSBAND_OVERSAMPLE as i64;
    let dt = 1.0 / (CARRIER_HZ * m as f64);
    (0..n)
        .map(|i| {
            let t0 = i as f64 / sample_rate;
            let mut acc = Complex64::new(0.0, 0.0);
            for k in -(m - 1)..m {
                let weight = (m - k.abs()) as f64 / (m * m) as f64;
                let t = t0 + k as f64 * dt;
                let x = signal(t);
                let s = g_i * x.re * (w * t - eps_p / 2.0).cos() + g_q * x.im * (w * t + eps_p / 2.0).sin();
                acc += Complex64::new(2.0 * s * (w * t).cos(), 2.0 * s * (w * t).sin()) * weight;
            }
            acc
        })
        .collect()
}

/// Complex white Gaussian noise of the given total power.
pub fn noise(rng: &mut impl Rng, n: usize, power: f64) -> Vec<Complex64> {
    let sigma = (power / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * sigma, im * sigma)
        })
        .collect()
}

/// Adds `frame * gain` into `stream` starting at `at`.
pub fn place(stream: &mut [Complex64], at: usize, frame: &ComplexFrame, gain: f64) {
    for (k, v) in frame.samples().iter().enumerate() {
        stream[at + k] += v * gain;
    }
}

/// Unit-power L-STF from the nominal profile of synthetic device `i`.
pub fn impaired_frame(seed: u64, i: u64) -> ComplexFrame {
    let p = sample_device_profile(&mut stream_rng(seed, Stream::Profile, i), &ProfileRanges::default());
    let f = synthesize_frame(&p.nominal, None, SAMPLE_RATE_HZ, &mut stream_rng(seed, Stream::Frame, i)).unwrap();
    normalize_energy(&f).unwrap()
}
