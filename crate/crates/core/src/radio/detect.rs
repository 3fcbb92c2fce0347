//! L-STF frame detection in a long capture.
//!
//! A sliding lag-16 autocorrelation, normalised by the energies of both
//! windows, sits near 1 while the window is inside a short-training field.
//! Every run above `plateau_threshold` lasting at least `min_run` samples is a
//! candidate. The start is taken from the run midpoint, then refined by
//! correlating the CFO-corrected capture against the known L-STF. Candidates
//! much weaker than the median candidate are dropped, which removes
//! low-power downlink frames from the access point.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{CFO_LAG, FRAME_LEN};
use crate::radio::lstf::generate_lstf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub plateau_threshold: f64,
    pub min_run: usize,
    /// Correlation window length.
    pub window: usize,
    /// Half-width of the template search around the coarse start.
    pub refine_radius: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            plateau_threshold: 0.9,
            min_run: 128,
            window: CFO_LAG,
            refine_radius: 4,
        }
    }
}

/// Normalised lag-16 autocorrelation `|P(n)| / sqrt(E(n) E(n+16))` and the raw `P(n)`.
pub fn autocorrelation_metric(stream: &[Complex64], window: usize) -> (Vec<f64>, Vec<Complex64>) {
    let span = window + CFO_LAG;
    if stream.len() < span {
        return (Vec::new(), Vec::new());
    }
    let count = stream.len() - span + 1;
    let prod = |k: usize| stream[k].conj() * stream[k + CFO_LAG];
    let pow = |k: usize| stream[k].norm_sqr();
    let mut p: Complex64 = (0..window).map(prod).sum();
    let mut e1: f64 = (0..window).map(pow).sum();
    let mut e2: f64 = (CFO_LAG..CFO_LAG + window).map(pow).sum();
    let mut metric = Vec::with_capacity(count);
    let mut corr = Vec::with_capacity(count);
    for n in 0..count {
        if n > 0 {
            // Running sums drift; recompute exactly every 4096 steps.
            if n % 4096 == 0 {
                p = (n..n + window).map(prod).sum();
                e1 = (n..n + window).map(pow).sum();
                e2 = (n + CFO_LAG..n + CFO_LAG + window).map(pow).sum();
            } else {
                p += prod(n + window - 1) - prod(n - 1);
                e1 += pow(n + window - 1) - pow(n - 1);
                e2 += pow(n + CFO_LAG + window - 1) - pow(n + CFO_LAG - 1);
            }
        }
        let denom = (e1.max(0.0) * e2.max(0.0)).sqrt();
        metric.push(if denom > 0.0 { p.norm() / denom } else { 0.0 });
        corr.push(p);
    }
    (metric, corr)
}

/// Start offsets of detected frames, ascending.
pub fn detect_frames(stream: &[Complex64], power_threshold: f64, cfg: &DetectorConfig) -> Vec<usize> {
    if stream.len() < FRAME_LEN {
        return Vec::new();
    }
    let (metric, corr) = autocorrelation_metric(stream, cfg.window);
    let template = generate_lstf();
    let template = template.samples();
    // Nominal plateau of a clean L-STF spans this many positions after the start.
    let plateau = FRAME_LEN - CFO_LAG - cfg.window;

    let mut candidates = Vec::new();
    let mut n = 0;
    while n < metric.len() {
        if metric[n] <= cfg.plateau_threshold {
            n += 1;
            continue;
        }
        let a = n;
        while n < metric.len() && metric[n] > cfg.plateau_threshold {
            n += 1;
        }
        let b = n - 1;
        if b - a + 1 < cfg.min_run {
            continue;
        }
        let mid = (a + b).div_ceil(2);
        let coarse = mid as isize - (plateau / 2) as isize;
        let theta = crate::dsp::angle(corr[mid]) / CFO_LAG as f64;
        if let Some(start) = refine(stream, template, coarse, theta, cfg.refine_radius) {
            candidates.push(start);
        }
    }

    let powers: Vec<f64> = candidates
        .iter()
        .map(|&s| stream[s..s + FRAME_LEN].iter().map(|v| v.norm_sqr()).sum::<f64>() / FRAME_LEN as f64)
        .collect();
    let Some(median) = median(&powers) else {
        return Vec::new();
    };
    candidates
        .into_iter()
        .zip(powers)
        .filter(|&(_, p)| p >= power_threshold * median)
        .map(|(s, _)| s)
        .collect()
}

/// Offset within `radius` of `coarse` maximising the template correlation
/// after removing a rotation of `theta` rad/sample.
fn refine(stream: &[Complex64], template: &[Complex64], coarse: isize, theta: f64, radius: usize) -> Option<usize> {
    let lo = (coarse - radius as isize).max(0);
    let hi = (coarse + radius as isize).min(stream.len() as isize - FRAME_LEN as isize);
    (lo..=hi)
        .map(|s| {
            let s = s as usize;
            let c: Complex64 = template
                .iter()
                .zip(&stream[s..s + FRAME_LEN])
                .enumerate()
                .map(|(k, (t, y))| t.conj() * y * Complex64::from_polar(1.0, -theta * k as f64))
                .sum();
            (s, c.norm())
        })
        .fold(None, |best: Option<(usize, f64)>, (s, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((s, v)),
        })
        .map(|(s, _)| s)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}
