//! Synthetic hardware-impaired L-STF captures.

pub mod dataset;
pub mod detect;
pub mod impair;
pub mod lstf;
pub mod profile;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{ComplexFrame, SAMPLE_RATE_HZ};
use crate::error::Result;
use dataset::{DatasetManifest, Extents, FrameArray};
use impair::{apply_awgn, apply_cfo, apply_iq_imbalance, apply_pa};
use profile::{sample_device_profile, Impairments, ProfileRanges};

/// Independent RNG stream families derived from one seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Profile = 1,
    Day = 2,
    Frame = 3,
    Noise = 4,
    Split = 5,
    Init = 6,
    Shuffle = 7,
}

/// Counter-based RNG for `(seed, family, index)`; streams never overlap.
pub fn stream_rng(seed: u64, family: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((family as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// L-STF through IQ imbalance, PA, CFO and (when `snr_db` is finite) AWGN, in that order.
pub fn synthesize_frame(
    imp: &Impairments,
    snr_db: Option<f64>,
    sample_rate: f64,
    rng: &mut impl rand::Rng,
) -> Result<ComplexFrame> {
    imp.validate()?;
    let x = lstf::generate_lstf();
    let x = apply_iq_imbalance(&x, imp.g_i, imp.g_q, imp.eps_p);
    let x = apply_pa(&x, imp.alpha_a, imp.beta_a, imp.alpha_phi, imp.beta_phi);
    let x = apply_cfo(&x, imp.eps_f, sample_rate);
    Ok(match snr_db {
        Some(snr) => apply_awgn(&x, snr, rng),
        None => x,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub devices: usize,
    pub days: usize,
    pub frames: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub ranges: ProfileRanges,
}

impl GenConfig {
    pub fn new(devices: usize, days: usize, frames: usize, seed: u64) -> Self {
        Self {
            devices,
            days,
            frames,
            seed,
            snr_db: None,
            ranges: ProfileRanges::default(),
        }
    }
}

/// Synthesises a full dataset. Every (device, day, frame) draws from its own
/// stream, so the result depends only on the configuration.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(DatasetManifest, FrameArray)> {
    let extents = Extents::wfdi(cfg.devices, cfg.days, cfg.frames);
    let profiles: Vec<_> = (0..cfg.devices)
        .map(|n| sample_device_profile(&mut stream_rng(cfg.seed, Stream::Profile, n as u64), &cfg.ranges))
        .collect();
    let realized: Vec<Vec<Impairments>> = profiles
        .iter()
        .enumerate()
        .map(|(n, p)| {
            (0..cfg.days)
                .map(|d| p.realize_day(&mut stream_rng(cfg.seed, Stream::Day, (n * cfg.days + d) as u64)))
                .collect()
        })
        .collect();
    let mut frames = FrameArray::zeros(extents);
    for (n, days) in realized.iter().enumerate() {
        for (d, imp) in days.iter().enumerate() {
            for f in 0..cfg.frames {
                let idx = ((n * cfg.days + d) * cfg.frames + f) as u64;
                let mut rng = stream_rng(cfg.seed, Stream::Frame, idx);
                let x = synthesize_frame(imp, cfg.snr_db, SAMPLE_RATE_HZ, &mut rng)?;
                frames.set_frame(n, d, f, &x);
            }
        }
    }
    let manifest = DatasetManifest {
        extents,
        seed: cfg.seed,
        sample_rate: SAMPLE_RATE_HZ,
        ranges: cfg.ranges,
        profiles,
        realized,
        snr_db: cfg.snr_db,
        data_file: String::new(),
    };
    Ok((manifest, frames))
}
