//! Desk-scale toolkit for real-time adversarial jamming of streaming speech
//! recognition.
//!
//! The crate bundles everything needed to study attacks on a streaming ASR
//! system under real-time constraints:
//!
//! * [`audio`] — waveforms, WAV I/O, mixing, and perturbation-budget arithmetic
//! * [`stft`] — short-time Fourier analysis shared by every model
//! * [`tensor`] — a small reverse-mode autodiff engine the models run on
//! * [`asr`] — a trainable CTC speech recognizer with greedy and LM-assisted
//!   beam decoding, plus an adapter contract for external recognizers
//! * [`attack`] — uniform-noise and projected-gradient baselines
//! * [`predictor`] — the forecasting attack generator (context in, future
//!   perturbation out, hard amplitude bound by construction)
//! * [`schedule`] — the record/compute/play timing simulator
//! * [`denoise`] — a spectral-gating denoiser usable as a defense
//! * [`train`] — ASR training, predictor optimization, adversarial fine-tuning
//! * [`metrics`] / [`eval`] — WER/CER scoring and the experiment drivers
//! * [`cli`] — dataset ingestion, configuration, and the command surface

pub mod alphabet;
pub mod asr;
pub mod attack;
pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod predictor;
pub mod rng;
pub mod schedule;
pub mod stft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
