//! Waveforms, WAV I/O, additive mixing, and perturbation-budget arithmetic.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Canonical pipeline sample rate in Hz.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Mono audio as real samples, nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::domain("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::domain("waveform contains non-finite samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// All-zero waveform of the given duration.
    pub fn silence(num_samples: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; num_samples],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds (len / sample_rate).
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Peak absolute amplitude; 0 for an empty waveform.
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Convert a time in seconds to a sample index (round to nearest).
    pub fn sample_index(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64).round() as usize
    }

    /// Copy of samples[start, end), clamped to the waveform bounds.
    pub fn segment(&self, start: usize, end: usize) -> Vec<f64> {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        self.samples[start..end].to_vec()
    }

    /// Maximum absolute per-sample difference to another waveform of the
    /// same length.
    pub fn linf_distance(&self, other: &Waveform) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// ℓ∞ perturbation budget: relative multiplier `m` and the absolute bound
/// `epsilon` derived from a reference waveform's peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub multiplier: f64,
    pub epsilon: f64,
}

impl AttackBudget {
    /// A budget with an explicit absolute bound (multiplier recorded as-is).
    pub fn absolute(epsilon: f64) -> Self {
        AttackBudget {
            multiplier: f64::NAN,
            epsilon,
        }
    }
}

/// epsilon = m × max|w|. Errors on negative m.
pub fn compute_epsilon(w: &Waveform, multiplier: f64) -> Result<AttackBudget> {
    if multiplier < 0.0 {
        return Err(Error::domain("budget multiplier must be non-negative"));
    }
    Ok(AttackBudget {
        multiplier,
        epsilon: multiplier * w.peak(),
    })
}

/// Additively mix `attack` into `clean` starting at `start_offset` seconds.
/// Output has the clean signal's length; attack samples past the end are
/// discarded and samples outside the overlap are bit-identical to `clean`.
pub fn mix(clean: &Waveform, attack: &Waveform, start_offset: f64) -> Result<Waveform> {
    if clean.sample_rate != attack.sample_rate {
        return Err(Error::domain(format!(
            "sample-rate mismatch: {} vs {}",
            clean.sample_rate, attack.sample_rate
        )));
    }
    if start_offset < 0.0 {
        return Err(Error::domain("start_offset must be non-negative"));
    }
    let offset = clean.sample_index(start_offset);
    let mut out = clean.samples.clone();
    for (i, a) in attack.samples.iter().enumerate() {
        let j = offset + i;
        if j >= out.len() {
            break;
        }
        out[j] += a;
    }
    Ok(Waveform {
        samples: out,
        sample_rate: clean.sample_rate,
    })
}

/// Clip every sample into [-epsilon, epsilon]. Samples already in range are
/// returned unchanged; idempotent.
pub fn clip_to_budget(p: &Waveform, budget: &AttackBudget) -> Waveform {
    let eps = budget.epsilon;
    Waveform {
        samples: p.samples.iter().map(|&s| s.clamp(-eps, eps)).collect(),
        sample_rate: p.sample_rate,
    }
}

/// Clip a raw sample buffer in place into [-epsilon, epsilon].
pub fn clip_samples(samples: &mut [f64], epsilon: f64) {
    for s in samples.iter_mut() {
        *s = s.clamp(-epsilon, epsilon);
    }
}

/// Read a mono 16-bit PCM (or float) WAV file. Multi-channel input is
/// rejected; integer PCM is scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::domain(format!(
            "{}: expected mono audio, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            if spec.bits_per_sample != 16 {
                return Err(Error::domain(format!(
                    "{}: only 16-bit PCM supported, got {} bits",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write a mono 16-bit PCM little-endian WAV file. Samples are clamped to
/// [-1, 1] before quantization.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Resample to a new rate with a windowed-sinc polyphase kernel. Returns the
/// input unchanged when the rates already match.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::domain("target sample rate must be positive"));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    // Low-pass at 45% of the lower Nyquist rate, 17-tap-per-side Hann sinc.
    let cutoff = 0.45 * ratio.min(1.0);
    let half_taps = 17usize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t_in = n as f64 / ratio;
        let center = t_in.floor() as isize;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in -(half_taps as isize)..=(half_taps as isize) {
            let idx = center + k;
            if idx < 0 || idx as usize >= w.samples.len() {
                continue;
            }
            let x = t_in - idx as f64;
            let sinc = if x.abs() < 1e-12 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            let window = 0.5
                + 0.5
                    * (std::f64::consts::PI * x / (half_taps as f64 + 1.0))
                        .cos();
            let tap = sinc * window.max(0.0);
            acc += w.samples[idx as usize] * tap;
            norm += tap;
        }
        // Normalizing by the kernel sum keeps DC gain at 1, also at the edges.
        out.push(if norm.abs() > 1e-9 { acc / norm } else { 0.0 });
    }
    Waveform::new(out, target_rate)
}
