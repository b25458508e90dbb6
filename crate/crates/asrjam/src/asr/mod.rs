//! The reference speech recognizer: a small convolutional front-end over
//! spectrograms, two GRU layers, and a per-frame character distribution
//! trained with CTC. Also defines the adapter contract under which external
//! recognizers (white- or black-box) can be plugged into the attack and
//! evaluation pipelines.

pub mod decode;
pub mod lm;

use crate::alphabet::{Alphabet, Transcript};
use crate::audio::{Waveform, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Gru, Linear, Pad};
use crate::rng::component_rng;
use crate::stft::{StftConfig, StftKernel};
use crate::tensor::{ops, Arr, ParamStore, Tape, Var};
use lm::LmScorer;
use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Architecture hyperparameters of the reference recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrArch {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
}

impl Default for AsrArch {
    fn default() -> Self {
        AsrArch {
            conv1_channels: 16,
            conv2_channels: 32,
            hidden: 256,
        }
    }
}

impl AsrArch {
    /// A deliberately tiny configuration for gradient checks.
    pub fn tiny() -> Self {
        AsrArch {
            conv1_channels: 2,
            conv2_channels: 3,
            hidden: 6,
        }
    }
}

/// Training provenance carried inside checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub corpus_id: String,
}

/// Reference CTC recognizer (the attack target).
#[derive(Clone)]
pub struct AsrModel {
    pub arch: AsrArch,
    pub store: ParamStore,
    pub alphabet: Alphabet,
    pub meta: TrainMeta,
    conv1: Conv2d,
    conv2: Conv2d,
    gru1: Gru,
    gru2: Gru,
    out: Linear,
    kernel: Rc<StftKernel>,
}

/// Frequency bins after the two conv layers (161 -> 81 -> 21).
const FREQ_BINS_OUT: usize = 21;

impl AsrModel {
    pub fn new(arch: AsrArch, seed: u64) -> Self {
        let mut rng = component_rng(seed, "asr-init");
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(
            &mut store,
            &mut rng,
            "conv1",
            1,
            arch.conv1_channels,
            (3, 3),
            (2, 2),
            Pad::Zero(1),
        );
        let conv2 = Conv2d::new(
            &mut store,
            &mut rng,
            "conv2",
            arch.conv1_channels,
            arch.conv2_channels,
            (3, 3),
            (4, 2),
            Pad::Zero(1),
        );
        let features = arch.conv2_channels * FREQ_BINS_OUT;
        let gru1 = Gru::new(&mut store, &mut rng, "gru1", features, arch.hidden);
        let gru2 = Gru::new(&mut store, &mut rng, "gru2", arch.hidden, arch.hidden);
        let out = Linear::new(&mut store, &mut rng, "out", arch.hidden, Alphabet.classes());
        AsrModel {
            arch,
            store,
            alphabet: Alphabet,
            meta: TrainMeta::default(),
            conv1,
            conv2,
            gru1,
            gru2,
            out,
            kernel: Rc::new(StftKernel::new(StftConfig::default()).expect("default stft")),
        }
    }

    /// Rebuild the layer wiring for a store loaded from a checkpoint.
    pub fn from_parts(arch: AsrArch, store: ParamStore, meta: TrainMeta) -> Self {
        let mut fresh = AsrModel::new(arch, 0);
        assert_eq!(fresh.store.names, store.names, "checkpoint layout mismatch");
        fresh.store = store;
        fresh.meta = meta;
        fresh
    }

    pub fn stft_config(&self) -> StftConfig {
        self.kernel.cfg
    }

    /// STFT frames for an utterance of `num_samples`.
    pub fn stft_frames(&self, num_samples: usize) -> usize {
        self.kernel.cfg.natural_frames(num_samples)
    }

    /// Output frames after the conv front-end for an utterance length.
    pub fn time_frames(&self, num_samples: usize) -> usize {
        let f = self.stft_frames(num_samples);
        let t1 = conv_out(f, 3, 2, 1);
        conv_out(t1, 3, 2, 1)
    }

    /// Per-frame log-probabilities for a batch of spectrogram vars, each of
    /// shape (2, 161, F) with a shared F. Returns the t-major packed
    /// (T'*B, classes) log-probs.
    fn log_probs_from_specs(&self, t: &Tape, params: &[Var], specs: &[Var]) -> Var {
        let batch = specs.len();
        let frames = t.value(specs[0]).shape()[2];
        let bins = t.value(specs[0]).shape()[1];
        let mut rows = Vec::with_capacity(batch);
        for &s in specs {
            let p = ops::power_spectrum(t, s); // (161, F)
            let z = ops::ln1p(t, p);
            let n = ops::affine(t, z, 0.25, -0.5);
            rows.push(ops::reshape(t, n, &[1, bins * frames]));
        }
        let stacked = ops::stack_rows(t, &rows); // (B, 161*F)
        let x = ops::reshape(t, stacked, &[batch, 1, bins, frames]);
        let c1 = ops::relu(t, self.conv1.forward(t, params, x));
        let c2 = ops::relu(t, self.conv2.forward(t, params, c1)); // (B, C, 21, T')
        let shape = t.value(c2).shape().to_vec();
        let t_out = shape[3];
        // (B, C, H, T') -> (T', B, C*H), t-major packing for the GRU.
        let perm = ops::permute(t, c2, &[3, 0, 1, 2]);
        let feats = ops::reshape(t, perm, &[t_out * batch, shape[1] * shape[2]]);
        let h1 = self.gru1.forward(t, params, feats, t_out, batch);
        let h2 = self.gru2.forward(t, params, h1, t_out, batch);
        let logits = self.out.forward(t, params, h2);
        ops::log_softmax_rows(t, logits)
    }

    /// Graph: single utterance (as a tape var) to (T', classes) log-probs.
    pub fn graph_log_probs(&self, t: &Tape, params: &[Var], x: Var) -> Result<Var> {
        let spec = ops::stft_op(t, &self.kernel, x)?;
        Ok(self.log_probs_from_specs(t, params, &[spec]))
    }

    /// Graph: CTC loss of a single utterance var against a transcript.
    pub fn graph_ctc_loss(&self, t: &Tape, params: &[Var], x: Var, y: &Transcript) -> Result<Var> {
        if y.is_empty() {
            return Err(Error::domain("transcript must be non-empty"));
        }
        let lp = self.graph_log_probs(t, params, x)?;
        ops::ctc_loss(t, lp, &y.labels(), self.alphabet.blank())
    }

    /// Batched log-probs from raw sample buffers (zero-padded to the batch
    /// max length). Returns (packed log-probs, per-sample frame counts).
    pub fn batch_log_probs(
        &self,
        t: &Tape,
        params: &[Var],
        waves: &[&[f64]],
    ) -> Result<(Var, Vec<usize>)> {
        let max_len = waves.iter().map(|w| w.len()).max().unwrap_or(0);
        let mut specs = Vec::with_capacity(waves.len());
        let mut frame_counts = Vec::with_capacity(waves.len());
        for w in waves {
            let mut padded = w.to_vec();
            padded.resize(max_len, 0.0);
            let spec = self.kernel.forward_samples(&padded)?;
            specs.push(t.constant(spec.into_dyn()));
            frame_counts.push(self.time_frames(w.len()));
        }
        let lp = self.log_probs_from_specs(t, params, &specs);
        Ok((lp, frame_counts))
    }

    /// Mean CTC loss over a batch (packed log-probs layout). Returns the
    /// scalar mean and per-sample losses; samples whose transcript cannot be
    /// aligned produce an error.
    pub fn ctc_loss_packed(
        &self,
        t: &Tape,
        lp: Var,
        frame_counts: &[usize],
        transcripts: &[&Transcript],
    ) -> Result<(Var, Vec<f64>)> {
        let batch = frame_counts.len();
        let mut losses = Vec::with_capacity(batch);
        for (b, (&frames, y)) in frame_counts.iter().zip(transcripts).enumerate() {
            let rows = ops::gather_rows_strided(t, lp, b, batch, frames);
            let loss = ops::ctc_loss(t, rows, &y.labels(), self.alphabet.blank())?;
            losses.push(loss);
        }
        let values: Vec<f64> = losses.iter().map(|&l| t.scalar(l)).collect();
        Ok((ops::mean_of(t, &losses), values))
    }

    /// Inference-mode log-probabilities (T', classes) for one waveform.
    pub fn log_probs(&self, w: &Waveform) -> Result<Array2<f64>> {
        self.check_rate(w)?;
        let t = Tape::inference();
        let params = self.store.leaves(&t, true);
        let x = t.constant(Arr::from_shape_vec(IxDyn(&[w.len()]), w.samples.clone()).unwrap());
        let lp = self.graph_log_probs(&t, &params, x)?;
        let v = t.value(lp);
        Ok(v.view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    /// CTC loss of one utterance (no gradients).
    pub fn ctc_loss_value(&self, w: &Waveform, y: &Transcript) -> Result<f64> {
        self.check_rate(w)?;
        let t = Tape::inference();
        let params = self.store.leaves(&t, true);
        let x = t.constant(Arr::from_shape_vec(IxDyn(&[w.len()]), w.samples.clone()).unwrap());
        let loss = self.graph_ctc_loss(&t, &params, x, y)?;
        Ok(t.scalar(loss))
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != CANONICAL_SAMPLE_RATE {
            return Err(Error::domain(format!(
                "expected {CANONICAL_SAMPLE_RATE} Hz input, got {}",
                w.sample_rate
            )));
        }
        if w.is_empty() {
            return Err(Error::domain("empty waveform"));
        }
        Ok(())
    }

    /// Beam decode with a language model (shallow fusion).
    pub fn transcribe_beam(
        &self,
        w: &Waveform,
        lm: &LmScorer,
        beam_width: usize,
    ) -> Result<Transcript> {
        let lp = self.log_probs(w)?;
        Ok(decode::beam_from_log_probs(lp.view(), lm, beam_width))
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if size + 2 * pad < kernel {
        0
    } else {
        (size + 2 * pad - kernel) / stride + 1
    }
}

/// Contract for any recognizer the attacks and evaluations can target.
/// White-box systems expose CTC loss and input gradients; black-box systems
/// only transcribe.
pub trait AsrSystem {
    fn name(&self) -> String;

    fn transcribe(&self, w: &Waveform) -> Result<Transcript>;

    fn supports_input_gradients(&self) -> bool {
        false
    }

    /// CTC loss of `y` given `w`.
    fn loss(&self, _w: &Waveform, _y: &Transcript) -> Result<f64> {
        Err(Error::capability(format!(
            "{} does not expose a loss",
            self.name()
        )))
    }

    /// CTC loss and its gradient with respect to the input samples.
    fn loss_and_input_grad(&self, _w: &Waveform, _y: &Transcript) -> Result<(f64, Vec<f64>)> {
        Err(Error::capability(format!(
            "{} does not expose input gradients",
            self.name()
        )))
    }
}

impl AsrSystem for AsrModel {
    fn name(&self) -> String {
        "reference-ctc".into()
    }

    fn transcribe(&self, w: &Waveform) -> Result<Transcript> {
        let lp = self.log_probs(w)?;
        Ok(decode::greedy_from_log_probs(lp.view()))
    }

    fn supports_input_gradients(&self) -> bool {
        true
    }

    fn loss(&self, w: &Waveform, y: &Transcript) -> Result<f64> {
        self.ctc_loss_value(w, y)
    }

    fn loss_and_input_grad(&self, w: &Waveform, y: &Transcript) -> Result<(f64, Vec<f64>)> {
        self.check_rate(w)?;
        let t = Tape::new();
        let params = self.store.leaves(&t, true);
        let x = t.leaf(Arr::from_shape_vec(IxDyn(&[w.len()]), w.samples.clone()).unwrap());
        let loss = self.graph_ctc_loss(&t, &params, x, y)?;
        let value = t.scalar(loss);
        let grads = t.backward(loss);
        let gx = grads
            .get(x)
            .map(|g| g.iter().cloned().collect())
            .unwrap_or_else(|| vec![0.0; w.len()]);
        Ok((value, gx))
    }
}

/// Wrap any recognizer as black-box: transcription passes through, every
/// gradient or loss request is refused.
pub struct BlackBox<S: AsrSystem>(pub S);

impl<S: AsrSystem> AsrSystem for BlackBox<S> {
    fn name(&self) -> String {
        format!("blackbox({})", self.0.name())
    }

    fn transcribe(&self, w: &Waveform) -> Result<Transcript> {
        self.0.transcribe(w)
    }
}

/// Recognizer with LM-assisted beam decoding substituted for greedy.
pub struct LmDecoded {
    pub model: AsrModel,
    pub lm: LmScorer,
    pub beam_width: usize,
}

impl AsrSystem for LmDecoded {
    fn name(&self) -> String {
        "reference-ctc+lm".into()
    }

    fn transcribe(&self, w: &Waveform) -> Result<Transcript> {
        self.model.transcribe_beam(w, &self.lm, self.beam_width)
    }

    fn supports_input_gradients(&self) -> bool {
        true
    }

    fn loss(&self, w: &Waveform, y: &Transcript) -> Result<f64> {
        self.model.loss(w, y)
    }

    fn loss_and_input_grad(&self, w: &Waveform, y: &Transcript) -> Result<(f64, Vec<f64>)> {
        self.model.loss_and_input_grad(w, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_wave(rng: &mut ChaCha12Rng, n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            CANONICAL_SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn log_probs_shape_and_normalization() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let model = AsrModel::new(AsrArch::tiny(), 7);
        let w = random_wave(&mut rng, 3200);
        let lp = model.log_probs(&w).unwrap();
        assert_eq!(lp.ncols(), 29);
        assert_eq!(lp.nrows(), model.time_frames(3200));
        for row in lp.outer_iter() {
            let s: f64 = row.iter().map(|&v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_wrong_sample_rate_and_empty_input() {
        let model = AsrModel::new(AsrArch::tiny(), 7);
        let w = Waveform::new(vec![0.1; 3200], 8_000).unwrap();
        assert!(model.log_probs(&w).is_err());
        let e = Waveform::silence(0, CANONICAL_SAMPLE_RATE);
        assert!(model.log_probs(&e).is_err());
    }

    #[test]
    fn alignment_infeasible_transcript_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let model = AsrModel::new(AsrArch::tiny(), 7);
        let w = random_wave(&mut rng, 1600); // very few frames
        let frames = model.time_frames(1600);
        let long: String = std::iter::repeat('a').take(frames + 1).collect();
        let y = Transcript::new(long).unwrap();
        match model.ctc_loss_value(&w, &y) {
            Err(Error::AlignmentInfeasible { .. }) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // Tiny configuration; finite differences probed at 100 sample
        // positions spread across the utterance.
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let model = AsrModel::new(AsrArch::tiny(), 9);
        let w = random_wave(&mut rng, 1600);
        let y = Transcript::new("ab").unwrap();
        let (_, grad) = model.loss_and_input_grad(&w, &y).unwrap();

        let mut samples = w.samples.clone();
        let mut worst: f64 = 0.0;
        for probe in 0..100 {
            let i = probe * 16 + 3; // spread over [0, 1600)
            let step = 1e-4;
            let orig = samples[i];
            samples[i] = orig + step;
            let up = model
                .ctc_loss_value(&Waveform::new(samples.clone(), 16_000).unwrap(), &y)
                .unwrap();
            samples[i] = orig - step;
            let down = model
                .ctc_loss_value(&Waveform::new(samples.clone(), 16_000).unwrap(), &y)
                .unwrap();
            samples[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = grad[i].abs().max(numeric.abs());
            if denom > 1e-6 {
                worst = worst.max((grad[i] - numeric).abs() / denom);
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn batch_and_single_paths_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let model = AsrModel::new(AsrArch::tiny(), 11);
        let w1 = random_wave(&mut rng, 3200);
        let w2 = random_wave(&mut rng, 2400);
        let y1 = Transcript::new("ab").unwrap();
        let y2 = Transcript::new("ba").unwrap();

        let single1 = model.ctc_loss_value(&w1, &y1).unwrap();
        let single2 = model.ctc_loss_value(&w2, &y2).unwrap();

        let t = Tape::inference();
        let params = model.store.leaves(&t, true);
        let (lp, frames) = model
            .batch_log_probs(&t, &params, &[&w1.samples, &w2.samples])
            .unwrap();
        let (_, losses) = model
            .ctc_loss_packed(&t, lp, &frames, &[&y1, &y2])
            .unwrap();
        // The longest sample is unpadded: bit-identical path. The shorter
        // sample's final conv frame sees stft frames from the zero-padded
        // tail instead of a zero pad column, so it only agrees approximately.
        assert!((losses[0] - single1).abs() < 1e-9, "{} vs {single1}", losses[0]);
        assert!(
            (losses[1] - single2).abs() / single2 < 0.01,
            "{} vs {single2}",
            losses[1]
        );
    }

    #[test]
    fn blackbox_denies_gradients_but_transcribes() {
        let mut rng = ChaCha12Rng::seed_from_u64(45);
        let model = AsrModel::new(AsrArch::tiny(), 13);
        let w = random_wave(&mut rng, 3200);
        let bb = BlackBox(model.clone());
        assert!(!bb.supports_input_gradients());
        assert!(bb.transcribe(&w).is_ok());
        let y = Transcript::new("a").unwrap();
        match bb.loss_and_input_grad(&w, &y) {
            Err(Error::Capability(_)) => {}
            other => panic!("expected capability error, got {other:?}"),
        }
    }

    #[test]
    fn greedy_equals_width_one_beam_on_model_outputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(46);
        let model = AsrModel::new(AsrArch::tiny(), 17);
        let lm = LmScorer::train(
            &[Transcript::new("abc").unwrap()],
            2,
            0.0,
            0.0,
        );
        for _ in 0..5 {
            let w = random_wave(&mut rng, 2400);
            let g = model.transcribe(&w).unwrap();
            let b = model.transcribe_beam(&w, &lm, 1).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn oracle_checks_feasibility_arithmetic() {
        // time_frames through the conv stack follows the closed-form count.
        let model = AsrModel::new(AsrArch::tiny(), 1);
        for n in [320usize, 1600, 3200, 32_000, 72_000] {
            let f = model.stft_frames(n);
            let expect = {
                let t1 = if f + 2 < 3 { 0 } else { (f + 2 - 3) / 2 + 1 };
                if t1 + 2 < 3 {
                    0
                } else {
                    (t1 + 2 - 3) / 2 + 1
                }
            };
            assert_eq!(model.time_frames(n), expect);
        }
        let _ = oracle::ctc_collapse(&[0], 1); // keep linkage honest
    }
}
