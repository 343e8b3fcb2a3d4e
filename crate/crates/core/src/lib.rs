//! Context-aware two-stage training for masking-based speech separation.
//!
//! The crate is organised bottom-up:
//!
//! - [`signal`]: waveforms, WAV I/O, SNR-controlled mixing and a seeded toy corpus.
//! - [`features`]: STFT, log-Mel and frame-rate alignment.
//! - [`teacher`]: contextual target storage (CTXF files) and a mock teacher.
//! - [`diffcore`]: a small reverse-mode autodiff engine with gradient checking.
//! - [`model`]: the encoder / context extractor / shared segregator / decoder network.
//! - [`losses`]: SI-SDR, InfoNCE, hybrid combination and permutation search.
//! - [`metrics`]: SI-SDRi / SDRi evaluation.
//! - [`trainer`]: Adam, plateau decay, early stopping and the two training stages.
//! - [`selfcheck`]: gradient and oracle checks behind `ctxsep selfcheck`.
//! - [`cli`]: the `ctxsep` command line.
//!
//! Heavy inner loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Both paths
//! produce bit-identical results.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod selfcheck;
pub mod signal;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
