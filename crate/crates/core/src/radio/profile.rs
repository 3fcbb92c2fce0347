//! Synthetic per-device hardware profiles and their day-to-day drift.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfpError};

/// Impairment parameters of one transmitter on one capture day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impairments {
    pub g_i: f64,
    pub g_q: f64,
    /// Mixer phase error, radians.
    pub eps_p: f64,
    pub alpha_a: f64,
    pub beta_a: f64,
    pub alpha_phi: f64,
    pub beta_phi: f64,
    /// Carrier frequency offset, Hz.
    pub eps_f: f64,
}

impl Impairments {
    /// All impairments at their identity values.
    pub const IDEAL: Impairments = Impairments {
        g_i: 1.0,
        g_q: 1.0,
        eps_p: 0.0,
        alpha_a: 1.0,
        beta_a: 0.0,
        alpha_phi: 0.0,
        beta_phi: 0.0,
        eps_f: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.g_i > 0.0
            && self.g_q > 0.0
            && self.beta_a >= 0.0
            && self.beta_phi >= 0.0
            && self.eps_p.abs() < PI / 2.0
            && [self.alpha_a, self.alpha_phi, self.eps_f].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(RfpError::Usage(format!("invalid impairment parameters {self:?}")))
        }
    }
}

/// A device: its nominal impairments and how much they wander between days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub nominal: Impairments,
    /// Standard deviation of the per-day relative jitter.
    pub drift_sigma: f64,
}

/// Closed sampling interval.
pub type Range = (f64, f64);

/// Uniform sampling ranges for synthetic devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRanges {
    pub g_i: Range,
    pub g_q: Range,
    pub eps_p: Range,
    pub alpha_a: Range,
    pub beta_a: Range,
    pub alpha_phi: Range,
    pub beta_phi: Range,
    pub eps_f: Range,
    pub drift_sigma: f64,
}

impl Default for ProfileRanges {
    /// Commodity-WiFi magnitudes: +-10 % mixer gain, +-5 deg phase error,
    /// +-50 kHz CFO (about 20 ppm at 2.4 GHz), 2 % daily drift.
    fn default() -> Self {
        let deg = PI / 180.0;
        Self {
            g_i: (0.90, 1.10),
            g_q: (0.90, 1.10),
            eps_p: (-5.0 * deg, 5.0 * deg),
            alpha_a: (1.5, 2.5),
            beta_a: (0.2, 1.0),
            alpha_phi: (0.5, 2.0),
            beta_phi: (0.5, 2.0),
            eps_f: (-50e3, 50e3),
            drift_sigma: 0.02,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): Range) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_device_profile(rng: &mut impl Rng, ranges: &ProfileRanges) -> DeviceProfile {
    DeviceProfile {
        nominal: Impairments {
            g_i: uniform(rng, ranges.g_i),
            g_q: uniform(rng, ranges.g_q),
            eps_p: uniform(rng, ranges.eps_p),
            alpha_a: uniform(rng, ranges.alpha_a),
            beta_a: uniform(rng, ranges.beta_a),
            alpha_phi: uniform(rng, ranges.alpha_phi),
            beta_phi: uniform(rng, ranges.beta_phi),
            eps_f: uniform(rng, ranges.eps_f),
        },
        drift_sigma: ranges.drift_sigma,
    }
}

impl DeviceProfile {
    /// Parameters for one day: every parameter scaled by its own `1 + delta`,
    /// `delta ~ N(0, drift_sigma^2)`. The caller supplies the (device, day) stream.
    pub fn realize_day(&self, rng: &mut impl Rng) -> Impairments {
        if self.drift_sigma == 0.0 {
            return self.nominal;
        }
        let normal = Normal::new(0.0, self.drift_sigma).expect("finite sigma");
        let mut j = |v: f64| v * (1.0 + normal.sample(rng));
        let n = self.nominal;
        Impairments {
            g_i: j(n.g_i),
            g_q: j(n.g_q),
            eps_p: j(n.eps_p),
            alpha_a: j(n.alpha_a),
            beta_a: j(n.beta_a).max(0.0),
            alpha_phi: j(n.alpha_phi),
            beta_phi: j(n.beta_phi).max(0.0),
            eps_f: j(n.eps_f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_profile() {
        let r = ProfileRanges::default();
        let a = sample_device_profile(&mut ChaCha8Rng::seed_from_u64(9), &r);
        let b = sample_device_profile(&mut ChaCha8Rng::seed_from_u64(9), &r);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_drift_is_constant() {
        let r = ProfileRanges {
            drift_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_device_profile(&mut rng, &r);
        for _ in 0..8 {
            assert_eq!(p.realize_day(&mut rng), p.nominal);
        }
    }

    #[test]
    fn sampled_profiles_are_valid() {
        let r = ProfileRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = sample_device_profile(&mut rng, &r);
            p.nominal.validate().unwrap();
            p.realize_day(&mut rng).validate().unwrap();
        }
    }
}
