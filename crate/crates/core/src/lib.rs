//! Joint time-frequency training for mel-spectrogram predictors.
//!
//! The pipeline goes waveform → STFT → mel features, and back via a
//! pseudo-inverse amplitude estimate, Griffin-Lim and inverse STFT. A small
//! reverse-mode tape differentiates SI-SDR on the reconstructed waveform
//! with respect to predicted mel frames so a toy sequence model can be
//! trained on `loss_f + λ·loss_t`.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod mel;
pub mod model;
pub mod optim;
pub mod phase;
pub mod pipeline;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
