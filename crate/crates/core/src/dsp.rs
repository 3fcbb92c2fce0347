//! Frame preprocessing and the four signal representations fed to the model:
//! raw IQ, lag-16 phase differences, the frame DFT and a short-time DFT.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfpError};

/// Samples per L-STF burst at 20 MSa/s.
pub const FRAME_LEN: usize = 160;
pub const SAMPLE_RATE_HZ: f64 = 20e6;
/// Length of the short training symbol; the CFO estimator correlates at this lag.
pub const CFO_LAG: usize = 16;

/// One baseband burst.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrame {
    samples: Vec<Complex64>,
    sample_rate: f64,
}

impl ComplexFrame {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(RfpError::DegenerateInput("non-finite sample".into()));
        }
        if !(sample_rate > 0.0) {
            return Err(RfpError::Usage(format!("sample rate {sample_rate}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Frame at the WiFi sampling rate.
    pub fn wifi(samples: Vec<Complex64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE_HZ)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// New frame with the same rate and `f` applied to every sample.
    pub fn map(&self, f: impl FnMut(&Complex64) -> Complex64) -> Self {
        Self {
            samples: self.samples.iter().map(f).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn with_samples(&self, samples: Vec<Complex64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Angle in (-pi, pi].
pub fn angle(z: Complex64) -> f64 {
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Divides by the RMS magnitude so the output has unit mean power.
pub fn normalize_energy(frame: &ComplexFrame) -> Result<ComplexFrame> {
    let p = frame.mean_power();
    if !(p > 0.0) {
        return Err(RfpError::DegenerateInput("frame has zero energy".into()));
    }
    let inv = 1.0 / p.sqrt();
    Ok(frame.map(|s| s * inv))
}

fn lag_products(frame: &ComplexFrame) -> Result<impl Iterator<Item = Complex64> + '_> {
    let s = frame.samples();
    if s.len() <= CFO_LAG {
        return Err(RfpError::Shape(format!(
            "CFO estimation needs at least {} samples, got {}",
            CFO_LAG + 1,
            s.len()
        )));
    }
    Ok(s.iter().zip(&s[CFO_LAG..]).map(|(a, b)| a.conj() * b))
}

/// Coarse CFO in radians per sample: the angle of the summed lag-16
/// autocorrelation divided by 16. Unambiguous only within (-pi/16, pi/16].
pub fn estimate_cfo(frame: &ComplexFrame) -> Result<f64> {
    let acc: Complex64 = lag_products(frame)?.sum();
    Ok(angle(acc) / CFO_LAG as f64)
}

/// Per-sample lag-16 phase differences, zero-padded at the end to the frame length.
pub fn cfo_representation(frame: &ComplexFrame) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = lag_products(frame)?.map(angle).collect();
    out.resize(frame.len(), 0.0);
    Ok(out)
}

/// Unnormalised forward DFT of the whole frame.
pub fn fft_representation(frame: &ComplexFrame) -> Vec<Complex64> {
    let mut buf = frame.samples().to_vec();
    if buf.is_empty() {
        return buf;
    }
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / J)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

/// Number of STFT frames for `n` samples, window `j`, hop `k`.
pub fn stft_frames(n: usize, j: usize, k: usize) -> usize {
    (n - j) / k + 1
}

/// Short-time DFT: frame `m` transforms samples `[m*hop, m*hop + window_len)`
/// weighted by the window. Returns `frames x window_len` coefficients, row-major.
pub fn stft_representation(
    frame: &ComplexFrame,
    window_len: usize,
    hop: usize,
    window: Window,
) -> Result<Vec<Complex64>> {
    let n = frame.len();
    if window_len == 0 || window_len > n {
        return Err(RfpError::Shape(format!(
            "STFT window {window_len} does not fit frame of {n}"
        )));
    }
    if hop == 0 {
        return Err(RfpError::Usage("STFT hop must be >= 1".into()));
    }
    let frames = stft_frames(n, window_len, hop);
    let w = window.coefficients(window_len);
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let mut out = Vec::with_capacity(frames * window_len);
    for m in 0..frames {
        let seg = &frame.samples()[m * hop..m * hop + window_len];
        let mut buf: Vec<Complex64> = seg.iter().zip(&w).map(|(s, w)| s * w).collect();
        fft.process(&mut buf);
        out.extend(buf);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprConfig {
    pub stft_window_len: usize,
    pub stft_hop: usize,
    pub window: Window,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            stft_window_len: 120,
            stft_hop: 5,
            window: Window::Hann,
        }
    }
}

/// The four model inputs for one frame. All arrays are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBundle {
    pub n_samples: usize,
    /// `n_samples x 2`: columns I, Q.
    pub r_iq: Vec<f64>,
    /// `n_samples`, the last 16 entries zero.
    pub r_cfo: Vec<f64>,
    /// `2 x n_samples`: real row then imaginary row.
    pub r_fft: Vec<f64>,
    /// `2 x stft_frames x stft_bins`: real plane then imaginary plane.
    pub r_stft: Vec<f64>,
    pub stft_frames: usize,
    pub stft_bins: usize,
}

/// Energy-normalises `frame` and computes all four representations.
pub fn build_bundle(frame: &ComplexFrame, cfg: &ReprConfig) -> Result<RepresentationBundle> {
    let y = normalize_energy(frame)?;
    let n = y.len();
    let r_iq = y.samples().iter().flat_map(|s| [s.re, s.im]).collect();
    let r_cfo = cfo_representation(&y)?;
    let spec = fft_representation(&y);
    let r_fft = spec.iter().map(|c| c.re).chain(spec.iter().map(|c| c.im)).collect();
    let stft = stft_representation(&y, cfg.stft_window_len, cfg.stft_hop, cfg.window)?;
    let r_stft = stft.iter().map(|c| c.re).chain(stft.iter().map(|c| c.im)).collect();
    Ok(RepresentationBundle {
        n_samples: n,
        r_iq,
        r_cfo,
        r_fft,
        r_stft,
        stft_frames: stft_frames(n, cfg.stft_window_len, cfg.stft_hop),
        stft_bins: cfg.stft_window_len,
    })
}
