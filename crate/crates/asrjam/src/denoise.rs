//! Reference denoiser: spectral gating with a noise floor estimated from
//! the quietest frames, soft magnitude subtraction with phase preserved,
//! and weighted overlap-add resynthesis. Usable standalone as a defense or
//! composed in front of a recognizer, including inside attack training
//! (gradients pass through with the gate mask held fixed).

use crate::alphabet::Transcript;
use crate::asr::{AsrModel, AsrSystem};
use crate::audio::Waveform;
use crate::error::Result;
use crate::stft::{StftConfig, StftKernel};
use crate::tensor::{ops, Arr, Tape, Var};
use ndarray::{Array2, Array3, IxDyn};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralGateConfig {
    /// Fraction of lowest-energy frames used for the noise-floor estimate.
    pub quiet_fraction: f64,
    /// Over-subtraction factor applied to the floor before gating.
    pub oversubtract: f64,
}

impl Default for SpectralGateConfig {
    fn default() -> Self {
        SpectralGateConfig {
            quiet_fraction: 0.10,
            oversubtract: 1.8,
        }
    }
}

/// Which denoiser implementation sits behind the interface.
#[derive(Clone)]
pub enum DenoiserKind {
    ReferenceSpectralGate(SpectralGateConfig),
    /// An externally supplied waveform filter (no gradient model; backward
    /// treats it as the identity).
    ExternalAdapter {
        name: String,
        filter: Rc<dyn Fn(&Waveform) -> Waveform>,
    },
}

impl std::fmt::Debug for DenoiserKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenoiserKind::ReferenceSpectralGate(cfg) => {
                write!(f, "ReferenceSpectralGate({cfg:?})")
            }
            DenoiserKind::ExternalAdapter { name, .. } => write!(f, "ExternalAdapter({name})"),
        }
    }
}

#[derive(Clone)]
pub struct Denoiser {
    pub kind: DenoiserKind,
    kernel: Rc<StftKernel>,
}

impl Denoiser {
    pub fn reference(cfg: SpectralGateConfig) -> Self {
        Denoiser {
            kind: DenoiserKind::ReferenceSpectralGate(cfg),
            kernel: Rc::new(StftKernel::new(StftConfig::default()).expect("default stft")),
        }
    }

    pub fn external(name: impl Into<String>, filter: Rc<dyn Fn(&Waveform) -> Waveform>) -> Self {
        Denoiser {
            kind: DenoiserKind::ExternalAdapter {
                name: name.into(),
                filter,
            },
            kernel: Rc::new(StftKernel::new(StftConfig::default()).expect("default stft")),
        }
    }

    /// Digest of the denoiser parameters (for freeze checks).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        match &self.kind {
            DenoiserKind::ReferenceSpectralGate(cfg) => {
                hasher.update(b"reference_spectral_gate");
                hasher.update(cfg.quiet_fraction.to_le_bytes());
                hasher.update(cfg.oversubtract.to_le_bytes());
            }
            DenoiserKind::ExternalAdapter { name, .. } => {
                hasher.update(b"external_adapter");
                hasher.update(name.as_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Pad so analysis frames cover every sample.
    fn padded(&self, samples: &[f64]) -> Vec<f64> {
        let cfg = self.kernel.cfg;
        let frames = if samples.len() <= cfg.window_length {
            1
        } else {
            (samples.len() - cfg.window_length).div_ceil(cfg.hop_length) + 1
        };
        let padded_len = (frames - 1) * cfg.hop_length + cfg.window_length;
        let mut out = samples.to_vec();
        out.resize(padded_len.max(samples.len()), 0.0);
        out
    }

    /// Spectral gains for an analysis spectrogram: per-bin noise floor from
    /// the quietest frames, soft subtraction mask in [0, 1].
    fn gains(&self, spec: &Array3<f64>, cfg: &SpectralGateConfig) -> Array2<f64> {
        let (_, bins, frames) = spec.dim();
        let mut mag = Array2::<f64>::zeros((bins, frames));
        let mut frame_energy = vec![0.0f64; frames];
        for f in 0..frames {
            for k in 0..bins {
                let re = spec[[0, k, f]];
                let im = spec[[1, k, f]];
                let m = (re * re + im * im).sqrt();
                mag[[k, f]] = m;
                frame_energy[f] += m * m;
            }
        }
        let mut order: Vec<usize> = (0..frames).collect();
        order.sort_by(|&a, &b| frame_energy[a].partial_cmp(&frame_energy[b]).unwrap());
        let quiet = ((frames as f64 * cfg.quiet_fraction).ceil() as usize).clamp(1, frames);
        let mut floor = vec![0.0f64; bins];
        for &f in order.iter().take(quiet) {
            for k in 0..bins {
                floor[k] += mag[[k, f]];
            }
        }
        for v in floor.iter_mut() {
            *v /= quiet as f64;
        }
        let mut gain = Array2::<f64>::zeros((bins, frames));
        for f in 0..frames {
            for k in 0..bins {
                let m = mag[[k, f]];
                gain[[k, f]] = if m < 1e-12 {
                    0.0
                } else {
                    (1.0 - cfg.oversubtract * floor[k] / m).max(0.0)
                };
            }
        }
        gain
    }

    fn gate(&self, samples: &[f64], cfg: &SpectralGateConfig) -> (Vec<f64>, Array2<f64>) {
        let padded = self.padded(samples);
        let spec = self
            .kernel
            .forward_samples(&padded)
            .expect("finite samples");
        let gain = self.gains(&spec, cfg);
        let gated = apply_gain(&spec, &gain);
        (self.kernel.inverse(&gated, samples.len()), gain)
    }

    /// Apply the gate computed from `reference` to `input` (both the same
    /// length). This is the linear fixed-mask map the backward pass uses.
    pub fn denoise_frozen(&self, reference: &Waveform, input: &Waveform) -> Waveform {
        let cfg = match &self.kind {
            DenoiserKind::ReferenceSpectralGate(cfg) => *cfg,
            DenoiserKind::ExternalAdapter { .. } => return input.clone(),
        };
        let ref_spec = self
            .kernel
            .forward_samples(&self.padded(&reference.samples))
            .expect("finite samples");
        let gain = self.gains(&ref_spec, &cfg);
        let spec = self
            .kernel
            .forward_samples(&self.padded(&input.samples))
            .expect("finite samples");
        let gated = apply_gain(&spec, &gain);
        Waveform {
            samples: self.kernel.inverse(&gated, input.len()),
            sample_rate: input.sample_rate,
        }
    }

    /// Length-preserving denoising.
    pub fn denoise(&self, w: &Waveform) -> Waveform {
        if w.is_empty() {
            return w.clone();
        }
        match &self.kind {
            DenoiserKind::ReferenceSpectralGate(cfg) => {
                let (samples, _) = self.gate(&w.samples, cfg);
                Waveform {
                    samples,
                    sample_rate: w.sample_rate,
                }
            }
            DenoiserKind::ExternalAdapter { filter, .. } => {
                let out = filter(w);
                assert_eq!(out.len(), w.len(), "denoiser must preserve length");
                out
            }
        }
    }

    /// Tape op for (N,) sample vars. The forward map with the gate held
    /// fixed factors as D * B with B symmetric (analysis, diagonal gain,
    /// raw windowed synthesis) and D the diagonal overlap-add
    /// normalization; its exact adjoint is therefore B * D: normalize the
    /// upstream gradient first, then run it through analysis, gain, and raw
    /// synthesis.
    pub fn graph(&self, t: &Tape, x: Var) -> Var {
        let vx = t.value(x);
        let samples: Vec<f64> = vx.iter().cloned().collect();
        match &self.kind {
            DenoiserKind::ReferenceSpectralGate(cfg) => {
                let (out, gain) = self.gate(&samples, cfg);
                let out = Arr::from_shape_vec(IxDyn(&[samples.len()]), out).unwrap();
                if !t.requires(x) {
                    return t.constant(out);
                }
                let kernel = self.kernel.clone();
                let n = samples.len();
                let this = self.clone();
                t.push_node(
                    Rc::new(out),
                    true,
                    Some(Box::new(move |g, sink| {
                        let gv: Vec<f64> = g.iter().cloned().collect();
                        let padded = this.padded(&gv);
                        let frames = kernel.cfg.natural_frames(padded.len());
                        let norm = kernel.synthesis_norm(padded.len(), frames);
                        let scaled: Vec<f64> = padded
                            .iter()
                            .zip(&norm)
                            .map(|(&g, &d)| if d > 1e-12 { g / d } else { 0.0 })
                            .collect();
                        let spec = kernel.forward_samples(&scaled).expect("finite grad");
                        let gated = apply_gain(&spec, &gain);
                        let back = kernel.inverse_raw(&gated, n);
                        sink.accumulate(
                            x.0,
                            Arr::from_shape_vec(IxDyn(&[n]), back).unwrap(),
                        );
                    })),
                )
            }
            DenoiserKind::ExternalAdapter { filter, .. } => {
                let w = Waveform {
                    samples,
                    sample_rate: crate::audio::CANONICAL_SAMPLE_RATE,
                };
                let out = filter(&w);
                let arr = Arr::from_shape_vec(IxDyn(&[out.len()]), out.samples).unwrap();
                if !t.requires(x) {
                    return t.constant(arr);
                }
                // straight-through gradient for opaque filters
                t.push_node(
                    Rc::new(arr),
                    true,
                    Some(Box::new(move |g, sink| {
                        sink.accumulate(x.0, g.clone());
                    })),
                )
            }
        }
    }
}

fn apply_gain(spec: &Array3<f64>, gain: &Array2<f64>) -> Array3<f64> {
    let (_, bins, frames) = spec.dim();
    let mut out = spec.clone();
    for f in 0..frames.min(gain.ncols()) {
        for k in 0..bins {
            out[[0, k, f]] *= gain[[k, f]];
            out[[1, k, f]] *= gain[[k, f]];
        }
    }
    out
}

/// A recognizer guarded by a denoiser: transcription and losses see the
/// denoised signal, and white-box gradients flow through the gate.
pub struct DenoisedAsr {
    pub denoiser: Denoiser,
    pub model: AsrModel,
}

impl AsrSystem for DenoisedAsr {
    fn name(&self) -> String {
        "denoiser+reference-ctc".into()
    }

    fn transcribe(&self, w: &Waveform) -> Result<Transcript> {
        self.model.transcribe(&self.denoiser.denoise(w))
    }

    fn supports_input_gradients(&self) -> bool {
        true
    }

    fn loss(&self, w: &Waveform, y: &Transcript) -> Result<f64> {
        self.model.ctc_loss_value(&self.denoiser.denoise(w), y)
    }

    fn loss_and_input_grad(&self, w: &Waveform, y: &Transcript) -> Result<(f64, Vec<f64>)> {
        let t = Tape::new();
        let params = self.model.store.leaves(&t, true);
        let x = t.leaf(Arr::from_shape_vec(IxDyn(&[w.len()]), w.samples.clone()).unwrap());
        let d = self.denoiser.graph(&t, x);
        let loss = self.model.graph_ctc_loss(&t, &params, d, y)?;
        let value = t.scalar(loss);
        let grads = t.backward(loss);
        let gx = grads
            .get(x)
            .map(|g| g.iter().cloned().collect())
            .unwrap_or_else(|| vec![0.0; w.len()]);
        Ok((value, gx))
    }
}
