//! WFDI-layout dataset files.
//!
//! Binary layout, little-endian:
//! `"WFDI" | u32 version=1 | u32 n_n | u32 n_d | u32 n_f | u32 n_s | u32 n_c | f32 samples`
//! with samples in row-major `(device, day, frame, sample, channel)` order,
//! channel 0 = I and 1 = Q. A JSON manifest sits next to the array file,
//! sharing its basename with the extension `.manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexFrame, FRAME_LEN};
use crate::error::{Result, RfpError};
use crate::radio::profile::{DeviceProfile, Impairments, ProfileRanges};

pub const MAGIC: &[u8; 4] = b"WFDI";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 4;

/// Array extents `(n_n, n_d, n_f, n_s, n_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    pub n_n: usize,
    pub n_d: usize,
    pub n_f: usize,
    pub n_s: usize,
    pub n_c: usize,
}

impl Extents {
    pub fn wfdi(devices: usize, days: usize, frames: usize) -> Self {
        Self {
            n_n: devices,
            n_d: days,
            n_f: frames,
            n_s: FRAME_LEN,
            n_c: 2,
        }
    }

    pub fn total_values(&self) -> usize {
        self.n_n * self.n_d * self.n_f * self.n_s * self.n_c
    }

    pub fn frames_per_device(&self) -> usize {
        self.n_d * self.n_f
    }

    fn as_array(&self) -> [usize; 5] {
        [self.n_n, self.n_d, self.n_f, self.n_s, self.n_c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub extents: Extents,
    pub seed: u64,
    pub sample_rate: f64,
    pub ranges: ProfileRanges,
    pub profiles: Vec<DeviceProfile>,
    /// `realized[device][day]`.
    pub realized: Vec<Vec<Impairments>>,
    /// Noise level applied to every stored frame; `None` for noiseless frames.
    pub snr_db: Option<f64>,
    /// Array file name, relative to the manifest.
    pub data_file: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extents;
        if e.n_c != 2 {
            return Err(RfpError::Usage(format!("n_c must be 2, got {}", e.n_c)));
        }
        if e.as_array().contains(&0) {
            return Err(RfpError::Usage(format!("empty extent in {e:?}")));
        }
        if self.profiles.len() != e.n_n || self.realized.len() != e.n_n {
            return Err(RfpError::Usage("profile count does not match n_n".into()));
        }
        if self.realized.iter().any(|d| d.len() != e.n_d) {
            return Err(RfpError::Usage("realized days do not match n_d".into()));
        }
        Ok(())
    }
}

/// The stored sample array.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameArray {
    pub extents: Extents,
    pub data: Vec<f32>,
}

impl FrameArray {
    pub fn zeros(extents: Extents) -> Self {
        Self {
            extents,
            data: vec![0.0; extents.total_values()],
        }
    }

    fn frame_offset(&self, device: usize, day: usize, frame: usize) -> usize {
        let e = &self.extents;
        assert!(device < e.n_n && day < e.n_d && frame < e.n_f, "frame index out of range");
        ((device * e.n_d + day) * e.n_f + frame) * e.n_s * e.n_c
    }

    pub fn set_frame(&mut self, device: usize, day: usize, frame: usize, x: &ComplexFrame) {
        let o = self.frame_offset(device, day, frame);
        assert_eq!(x.len(), self.extents.n_s);
        for (k, s) in x.samples().iter().enumerate() {
            self.data[o + 2 * k] = s.re as f32;
            self.data[o + 2 * k + 1] = s.im as f32;
        }
    }

    pub fn frame(&self, device: usize, day: usize, frame: usize, sample_rate: f64) -> ComplexFrame {
        let o = self.frame_offset(device, day, frame);
        let samples = self.data[o..o + self.extents.n_s * 2]
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
            .collect();
        ComplexFrame::new(samples, sample_rate).expect("stored samples are finite")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.extents.as_array() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: String| RfpError::Format {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), format!("truncated header: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let d: Vec<usize> = (1..=5).map(|i| word(i) as usize).collect();
        let extents = Extents {
            n_n: d[0],
            n_d: d[1],
            n_f: d[2],
            n_s: d[3],
            n_c: d[4],
        };
        let expected = extents
            .as_array()
            .iter()
            .try_fold(4usize, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| fmt(8, "extents overflow".into()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            let offset = HEADER_LEN + body.len().min(expected);
            return Err(fmt(
                offset,
                format!("payload has {} bytes, extents need {expected}", body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { extents, data })
    }
}

/// Sidecar path: `foo.wfdi` -> `foo.manifest.json`.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("manifest.json")
}

/// Writes the array to `path` and the manifest next to it.
pub fn write_dataset(path: &Path, manifest: &DatasetManifest, frames: &FrameArray) -> Result<()> {
    manifest.validate()?;
    if manifest.extents != frames.extents {
        return Err(RfpError::Shape(format!(
            "manifest extents {:?} differ from array {:?}",
            manifest.extents, frames.extents
        )));
    }
    let mut m = manifest.clone();
    m.data_file = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    fs::write(path, frames.to_bytes())?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, FrameArray)> {
    let frames = FrameArray::from_bytes(&fs::read(path)?)?;
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    manifest.validate()?;
    if manifest.extents != frames.extents {
        return Err(RfpError::Format {
            offset: 8,
            reason: format!(
                "array extents {:?} disagree with manifest {:?}",
                frames.extents, manifest.extents
            ),
        });
    }
    Ok((manifest, frames))
}
