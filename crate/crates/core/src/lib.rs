//! WiFi RF fingerprinting with multi-channel attentive feature fusion.
//!
//! - [`radio`]: synthetic impaired L-STF captures, frame detection, dataset files
//! - [`dsp`]: energy normalisation and the IQ / CFO / FFT / STFT representations
//! - [`mcaff`]: the fused classifier and its single-representation baselines
//! - [`train`]: splits, the training loop and evaluation
//! - [`experiment`]: experiment suites and report output

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsp;
pub mod error;
pub mod experiment;
pub mod mcaff;
pub mod radio;
pub mod train;

pub use error::{Result, RfpError};
