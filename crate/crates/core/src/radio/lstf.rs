//! Legacy short training field (802.11a/g/n L-STF).

use num_complex::Complex64;

use crate::dsp::{ComplexFrame, FRAME_LEN};

const FFT_SIZE: usize = 64;
/// Occupied subcarriers, sign of the (1 + j) constellation point on each.
const SUBCARRIERS: [(i32, f64); 12] = [
    (-24, 1.0),
    (-20, -1.0),
    (-16, 1.0),
    (-12, -1.0),
    (-8, -1.0),
    (-4, 1.0),
    (4, -1.0),
    (8, -1.0),
    (12, 1.0),
    (16, 1.0),
    (20, 1.0),
    (24, 1.0),
];

/// The 160-sample L-STF at 20 MSa/s: ten repetitions of a 16-sample symbol,
/// with unit mean power.
pub fn generate_lstf() -> ComplexFrame {
    let amp = (13.0f64 / 6.0).sqrt() / 52f64.sqrt();
    let samples = (0..FRAME_LEN)
        .map(|n| {
            SUBCARRIERS
                .iter()
                .map(|&(k, sign)| {
                    let phase = 2.0 * std::f64::consts::PI * k as f64 * n as f64 / FFT_SIZE as f64;
                    Complex64::new(sign, sign) * Complex64::from_polar(amp, phase)
                })
                .sum()
        })
        .collect();
    ComplexFrame::wifi(samples).expect("finite by construction")
}
