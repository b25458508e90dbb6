//! Short-time Fourier analysis: forward transform, its adjoint (the
//! backbone of every input-gradient computation), and weighted overlap-add
//! resynthesis.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use ndarray::Array3;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How to map a signal onto a fixed frame grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FramePadding {
    /// As many full frames as fit; no padding.
    Natural,
    /// Zero-pad trailing frames up to exactly `n` frames. Errors if the
    /// natural frame count exceeds `n`.
    PadToTarget(usize),
}

/// STFT analysis parameters. The canonical configuration uses a 320-sample
/// Hamming window, hop 160, FFT size 320 (161 one-sided bins).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub nfft: usize,
    pub padding: FramePadding,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_length: 320,
            hop_length: 160,
            nfft: 320,
            padding: FramePadding::Natural,
        }
    }
}

impl StftConfig {
    /// Canonical context configuration: pad to the fixed frame count the
    /// attack predictor expects for a 2 s window.
    pub fn context() -> Self {
        StftConfig {
            padding: FramePadding::PadToTarget(CONTEXT_FRAMES),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop_length == 0 || self.nfft == 0 {
            return Err(Error::domain("stft sizes must be positive"));
        }
        if self.window_length > self.nfft {
            return Err(Error::domain("window_length must be <= nfft"));
        }
        if self.hop_length > self.window_length {
            return Err(Error::domain("hop_length must be <= window_length"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Frames that fit without padding.
    pub fn natural_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window_length {
            0
        } else {
            1 + (num_samples - self.window_length) / self.hop_length
        }
    }

    /// Frame count after applying the padding policy.
    pub fn output_frames(&self, num_samples: usize) -> Result<usize> {
        let natural = self.natural_frames(num_samples);
        match self.padding {
            FramePadding::Natural => Ok(natural),
            FramePadding::PadToTarget(target) => {
                if natural > target {
                    Err(Error::domain(format!(
                        "natural frame count {natural} exceeds pad target {target}"
                    )))
                } else {
                    Ok(target)
                }
            }
        }
    }
}

/// Number of one-sided frequency bins in the canonical configuration.
pub const CONTEXT_BINS: usize = 161;
/// Fixed frame count of a predictor context window.
pub const CONTEXT_FRAMES: usize = 204;

/// Two-channel (real, imaginary) time-frequency representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramContext {
    /// Shape (2, bins, frames); channel 0 = real part, channel 1 = imaginary.
    pub values: Array3<f64>,
}

impl SpectrogramContext {
    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }

    /// Per-bin total energy across frames (|S|^2 summed over time).
    pub fn bin_energy(&self) -> Vec<f64> {
        let (_, bins, frames) = self.values.dim();
        let mut out = vec![0.0; bins];
        for b in 0..bins {
            for f in 0..frames {
                let re = self.values[[0, b, f]];
                let im = self.values[[1, b, f]];
                out[b] += re * re + im * im;
            }
        }
        out
    }
}

/// Cached FFT plans and window for one configuration.
pub struct StftKernel {
    pub cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftKernel {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(cfg.nfft);
        let inv = planner.plan_fft_inverse(cfg.nfft);
        Ok(StftKernel {
            cfg,
            window: hamming_periodic(cfg.window_length),
            fwd,
            inv,
        })
    }

    /// Forward STFT of a raw sample buffer. Output shape (2, bins, frames).
    pub fn forward_samples(&self, samples: &[f64]) -> Result<Array3<f64>> {
        if samples.is_empty() {
            return Err(Error::domain("cannot take the stft of an empty waveform"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::domain("waveform contains non-finite samples"));
        }
        let bins = self.cfg.bins();
        let natural = self.cfg.natural_frames(samples.len());
        let frames = self.cfg.output_frames(samples.len())?;
        let mut out = Array3::zeros((2, bins, frames));
        let mut buf = vec![Complex64::default(); self.cfg.nfft];
        for f in 0..natural {
            let start = f * self.cfg.hop_length;
            for (n, b) in buf.iter_mut().enumerate() {
                let x = if n < self.cfg.window_length {
                    samples[start + n] * self.window[n]
                } else {
                    0.0
                };
                *b = Complex64::new(x, 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..bins {
                out[[0, k, f]] = buf[k].re;
                out[[1, k, f]] = buf[k].im;
            }
        }
        Ok(out)
    }

    pub fn forward(&self, w: &Waveform) -> Result<SpectrogramContext> {
        Ok(SpectrogramContext {
            values: self.forward_samples(&w.samples)?,
        })
    }

    /// Adjoint of the forward map: scatter a spectrogram-shaped gradient
    /// back onto the sample axis. Padded frames carry no gradient.
    pub fn adjoint(&self, grad: &Array3<f64>, num_samples: usize) -> Vec<f64> {
        let bins = self.cfg.bins();
        let natural = self.cfg.natural_frames(num_samples);
        let mut dx = vec![0.0; num_samples];
        let mut buf = vec![Complex64::default(); self.cfg.nfft];
        for f in 0..natural.min(grad.shape()[2]) {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < bins {
                    Complex64::new(grad[[0, k, f]], grad[[1, k, f]])
                } else {
                    Complex64::default()
                };
            }
            // Unnormalized inverse FFT gives sum_k c_k e^{+2pi i k n / N};
            // its real part is exactly d(out)/d(sample) contracted with grad.
            self.inv.process(&mut buf);
            let start = f * self.cfg.hop_length;
            for n in 0..self.cfg.window_length {
                dx[start + n] += self.window[n] * buf[n].re;
            }
        }
        dx
    }

    /// Windowed overlap-add synthesis without normalization: the transpose
    /// (up to the Hermitian bin weights) of the analysis map.
    pub fn inverse_raw(&self, spec: &Array3<f64>, num_samples: usize) -> Vec<f64> {
        let bins = self.cfg.bins();
        let nfft = self.cfg.nfft;
        let frames = spec.shape()[2];
        let mut acc = vec![0.0; num_samples + nfft];
        let mut buf = vec![Complex64::default(); nfft];
        for f in 0..frames {
            for k in 0..bins {
                buf[k] = Complex64::new(spec[[0, k, f]], spec[[1, k, f]]);
            }
            // Hermitian completion of the one-sided spectrum.
            for k in bins..nfft {
                buf[k] = buf[nfft - k].conj();
            }
            self.inv.process(&mut buf);
            let start = f * self.cfg.hop_length;
            for n in 0..self.cfg.window_length {
                acc[start + n] += self.window[n] * buf[n].re / nfft as f64;
            }
        }
        acc.truncate(num_samples);
        acc
    }

    /// Per-sample overlap-add weight sum(w^2) for a given frame count.
    pub fn synthesis_norm(&self, num_samples: usize, frames: usize) -> Vec<f64> {
        let mut norm = vec![0.0; num_samples + self.cfg.nfft];
        for f in 0..frames {
            let start = f * self.cfg.hop_length;
            for n in 0..self.cfg.window_length {
                norm[start + n] += self.window[n] * self.window[n];
            }
        }
        norm.truncate(num_samples);
        norm
    }

    /// Weighted overlap-add resynthesis of a (possibly modified) spectrogram.
    /// `num_samples` selects the output length; the input is assumed to come
    /// from [`Self::forward_samples`] on a signal of that length (natural
    /// framing, zero-padded tail allowed).
    pub fn inverse(&self, spec: &Array3<f64>, num_samples: usize) -> Vec<f64> {
        let acc = self.inverse_raw(spec, num_samples);
        let norm = self.synthesis_norm(num_samples, spec.shape()[2]);
        acc.iter()
            .zip(&norm)
            .map(|(&a, &n)| if n > 1e-12 { a / n } else { 0.0 })
            .collect()
    }
}

/// Periodic Hamming window of length `n`.
pub fn hamming_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Forward STFT with the given configuration (convenience wrapper).
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<SpectrogramContext> {
    StftKernel::new(*cfg)?.forward(w)
}
