//! Training loops: the reference recognizer, the attack predictor
//! (maximizing the recognizer's CTC loss through the streaming schedule,
//! optionally through a frozen denoiser), and adversarial fine-tuning of
//! the recognizer.

use crate::alphabet::Transcript;
use crate::asr::{AsrArch, AsrModel, AsrSystem};
use crate::attack::{pgd_offline, PgdConfig};
use crate::audio::{compute_epsilon, mix, AttackBudget, Waveform};
use crate::denoise::Denoiser;
use crate::error::{Error, Result};
use crate::metrics::{cer, Pooled};
use crate::predictor::{PredictorArch, PredictorModel};
use crate::rng::component_rng;
use crate::schedule::StreamClock;
use crate::tensor::{ops, Arr, SgdMomentum, Tape, Var};
use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Shared training schedule parameters (canonical values of the attack
/// training run: 4 epochs, batch 32, lr 1.5e-4 with gamma 0.99 annealing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_anneal_gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    pub multiplier: f64,
    pub clock: StreamClock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 32,
            lr: 1.5e-4,
            lr_anneal_gamma: 0.99,
            momentum: 0.9,
            seed: 7,
            multiplier: 0.008,
            clock: StreamClock::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.lr_anneal_gamma <= 0.0 || self.lr_anneal_gamma > 1.0 {
            return Err(Error::config("anneal gamma must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.clock.validate()
    }

    /// Exponentially annealed learning rate at a given epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_anneal_gamma.powi(epoch as i32)
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_cer: Option<f64>,
    pub skipped_utterances: usize,
}

/// Write per-epoch logs as JSON lines.
pub fn write_metrics_log(path: &std::path::Path, logs: &[EpochLog]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for log in logs {
        serde_json::to_writer(&mut f, log)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Recognizer training hyperparameters (desk-scale; not pinned by the
/// attack-training schedule).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrTrainConfig {
    pub arch: AsrArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_anneal_gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Amplitude of uniform noise augmentation relative to each
    /// utterance's peak (keeps the model robust to random noise while
    /// leaving adversarial directions intact).
    pub noise_augment: f64,
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        AsrTrainConfig {
            arch: AsrArch::default(),
            epochs: 10,
            batch_size: 32,
            lr: 3e-4,
            lr_anneal_gamma: 0.95,
            momentum: 0.9,
            seed: 11,
            noise_augment: 0.01,
        }
    }
}

fn greedy_cer(model: &AsrModel, set: &[(Waveform, Transcript)]) -> f64 {
    let mut pooled = Pooled::default();
    for (w, y) in set {
        if let Ok(hyp) = model.transcribe(w) {
            if let Ok((_, counts)) = cer(y, &hyp) {
                pooled.add(&counts);
            }
        }
    }
    pooled.rate()
}

/// Train the reference recognizer with CTC over mini-batches. Utterances
/// whose transcript cannot be aligned to the frame budget are skipped and
/// counted. Returns the model and per-epoch logs.
pub fn train_asr(
    corpus: &[(Waveform, Transcript)],
    dev: &[(Waveform, Transcript)],
    cfg: &AsrTrainConfig,
) -> Result<(AsrModel, Vec<EpochLog>)> {
    if corpus.is_empty() {
        return Err(Error::domain("training corpus is empty"));
    }
    let mut model = AsrModel::new(cfg.arch.clone(), cfg.seed);
    let mut optimizer = SgdMomentum::new(&model.store, cfg.momentum, false);
    let mut shuffle_rng = component_rng(cfg.seed, "asr-shuffle");
    let mut noise_rng = component_rng(cfg.seed, "asr-noise");

    // Pre-filter infeasible utterances once.
    let mut usable: Vec<usize> = Vec::new();
    let mut skipped = 0usize;
    for (i, (w, y)) in corpus.iter().enumerate() {
        let frames = model.time_frames(w.len());
        if frames >= ops::ctc_min_frames(&y.labels()) && !y.is_empty() {
            usable.push(i);
        } else {
            skipped += 1;
        }
    }
    if usable.is_empty() {
        return Err(Error::domain("no alignable utterances in the corpus"));
    }

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_anneal_gamma.powi(epoch as i32);
        let mut order = usable.clone();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut waves: Vec<Vec<f64>> = Vec::with_capacity(batch_idx.len());
            let mut transcripts: Vec<&Transcript> = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                let (w, y) = &corpus[i];
                let mut samples = w.samples.clone();
                if cfg.noise_augment > 0.0 {
                    let amp = cfg.noise_augment * w.peak();
                    for s in samples.iter_mut() {
                        *s += noise_rng.gen_range(-amp..=amp);
                    }
                }
                waves.push(samples);
                transcripts.push(y);
            }
            let t = Tape::new();
            let params = model.store.leaves(&t, false);
            let wave_refs: Vec<&[f64]> = waves.iter().map(|w| w.as_slice()).collect();
            let (lp, frames) = model.batch_log_probs(&t, &params, &wave_refs)?;
            let (loss, _per_sample) = model.ctc_loss_packed(&t, lp, &frames, &transcripts)?;
            epoch_loss += t.scalar(loss);
            batches += 1;
            let grads = t.backward(loss);
            let grad_vec: Vec<Option<Arr>> = params.iter().map(|&p| grads.get(p).cloned()).collect();
            optimizer.step(&mut model.store, &grad_vec, lr);
        }
        let heldout_cer = if dev.is_empty() {
            None
        } else {
            Some(greedy_cer(&model, dev))
        };
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            heldout_loss: None,
            heldout_cer,
            skipped_utterances: skipped,
        });
    }
    model.meta.epochs = cfg.epochs;
    model.meta.corpus_id = format!("{} utterances", corpus.len());
    Ok((model, logs))
}

/// The frozen system a predictor is trained against: a recognizer, with an
/// optional frozen denoiser composed in front of it.
#[derive(Clone, Copy)]
pub struct AttackTarget<'a> {
    pub asr: &'a AsrModel,
    pub denoiser: Option<&'a Denoiser>,
}

/// Per-utterance training artifacts that do not depend on theta: chunk
/// contexts (clean-stream spectrograms), chunk play offsets, and epsilon.
struct PreparedUtterance {
    wave: Rc<Arr>,
    contexts: Rc<Arr>,
    offsets: Vec<usize>,
    epsilon: f64,
    labels: Transcript,
}

fn prepare_utterance(
    predictor: &PredictorModel,
    clock: &StreamClock,
    multiplier: f64,
    w: &Waveform,
    y: &Transcript,
) -> Result<Option<PreparedUtterance>> {
    let kernel = predictor.context_kernel();
    let duration = w.duration();
    let eps = compute_epsilon(w, multiplier)?.epsilon;
    let mut contexts = Vec::new();
    let mut offsets = Vec::new();
    let mut k = 0usize;
    loop {
        let t_k = clock.context_duration + k as f64 * clock.chunk_duration;
        if t_k + clock.delay >= duration {
            break;
        }
        let ctx_end = w.sample_index(t_k);
        let ctx_start = ctx_end.saturating_sub(2 * crate::audio::CANONICAL_SAMPLE_RATE as usize);
        let spec = kernel.forward_samples(&w.samples[ctx_start..ctx_end])?;
        contexts.push(spec);
        offsets.push(w.sample_index(t_k + clock.delay));
        k += 1;
    }
    if contexts.is_empty() || eps == 0.0 {
        return Ok(None);
    }
    let k = contexts.len();
    let (bins, frames) = (contexts[0].shape()[1], contexts[0].shape()[2]);
    let mut stacked = Arr::zeros(IxDyn(&[k, 2, bins, frames]));
    for (i, c) in contexts.iter().enumerate() {
        stacked
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(c);
    }
    Ok(Some(PreparedUtterance {
        wave: Rc::new(Arr::from_shape_vec(IxDyn(&[w.len()]), w.samples.clone()).unwrap()),
        contexts: Rc::new(stacked),
        offsets,
        epsilon: eps,
        labels: y.clone(),
    }))
}

/// Build the attacked-loss graph for one utterance and return the loss var.
/// `bn_store` carries the batch-norm state: pass the live store in training
/// mode (running statistics are updated) or any snapshot in eval mode.
fn utterance_attack_loss(
    t: &Tape,
    predictor: &PredictorModel,
    bn_store: &mut crate::tensor::ParamStore,
    theta: &[Var],
    psi: &[Var],
    target: &AttackTarget<'_>,
    prep: &PreparedUtterance,
    train_mode: bool,
) -> Result<Var> {
    let ctx = t.constant_rc(prep.contexts.clone());
    let raw = if train_mode {
        predictor.forward_train_graph(t, theta, bn_store, ctx)
    } else {
        predictor.forward_eval_graph(t, theta, bn_store, ctx)
    };
    let scaled = ops::scale(t, raw, prep.epsilon);
    let mut mixed = t.constant_rc(prep.wave.clone());
    for (k, &offset) in prep.offsets.iter().enumerate() {
        let row = ops::slice_rows(t, scaled, k, k + 1);
        let chunk = ops::reshape(t, row, &[predictor.arch.output_samples]);
        mixed = ops::add_at(t, mixed, chunk, offset);
    }
    let fed = match target.denoiser {
        Some(d) => d.graph(t, mixed),
        None => mixed,
    };
    target.asr.graph_ctc_loss(t, psi, fed, &prep.labels)
}

/// Mean attacked CTC loss of a predictor over a set (inference mode).
pub fn attacked_loss(
    predictor: &PredictorModel,
    target: &AttackTarget<'_>,
    set: &[(Waveform, Transcript)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let psi_shared: Vec<Rc<Arr>> = target.asr.store.tensors.iter().cloned().map(Rc::new).collect();
    let mut scratch = predictor.store.clone();
    for (w, y) in set {
        let Some(prep) = prepare_utterance(predictor, &cfg.clock, cfg.multiplier, w, y)? else {
            continue;
        };
        let t = Tape::inference();
        let theta = predictor.store.leaves(&t, true);
        let psi: Vec<Var> = psi_shared.iter().map(|p| t.constant_rc(p.clone())).collect();
        match utterance_attack_loss(&t, predictor, &mut scratch, &theta, &psi, target, &prep, false)
        {
            Ok(loss) => {
                total += t.scalar(loss);
                count += 1;
            }
            Err(Error::AlignmentInfeasible { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::domain("no usable utterances for attacked loss"));
    }
    Ok(total / count as f64)
}

/// Train the attack predictor by gradient ascent on the target's CTC loss.
/// All chunk attacks for an utterance are generated (streaming-schedule
/// semantics), mixed into the clean signal, optionally passed through the
/// frozen denoiser, and scored against the ground-truth transcript. The
/// recognizer (and denoiser) parameters are never touched.
pub fn train_predictor(
    target: AttackTarget<'_>,
    corpus: &[(Waveform, Transcript)],
    dev: &[(Waveform, Transcript)],
    arch: PredictorArch,
    cfg: &TrainConfig,
) -> Result<(PredictorModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::domain("training corpus is empty"));
    }
    let mut predictor = PredictorModel::new(
        PredictorArch {
            multiplier: cfg.multiplier,
            ..arch
        },
        cfg.seed,
    );
    let mut optimizer = SgdMomentum::new(&predictor.store, cfg.momentum, true);
    let mut shuffle_rng = component_rng(cfg.seed, "predictor-shuffle");

    // Contexts and offsets depend only on the clean streams: compute once.
    let mut prepared = Vec::new();
    let mut skipped = 0usize;
    for (w, y) in corpus {
        match prepare_utterance(&predictor, &cfg.clock, cfg.multiplier, w, y)? {
            Some(p) => prepared.push(p),
            None => skipped += 1,
        }
    }
    if prepared.is_empty() {
        return Err(Error::domain(
            "no utterance is long enough for the streaming schedule",
        ));
    }
    let psi_shared: Vec<Rc<Arr>> = target.asr.store.tensors.iter().cloned().map(Rc::new).collect();

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Option<Arr>> = vec![None; predictor.store.len()];
            let mut used = 0usize;
            for &i in batch {
                let prep = &prepared[i];
                let t = Tape::new();
                let theta = predictor.store.leaves(&t, false);
                let psi: Vec<Var> =
                    psi_shared.iter().map(|p| t.constant_rc(p.clone())).collect();
                let mut store_scratch = std::mem::take(&mut predictor.store);
                let loss = utterance_attack_loss(
                    &t,
                    &predictor,
                    &mut store_scratch,
                    &theta,
                    &psi,
                    &target,
                    prep,
                    true,
                );
                predictor.store = store_scratch;
                let loss = match loss {
                    Ok(l) => l,
                    Err(Error::AlignmentInfeasible { .. }) => continue,
                    Err(e) => return Err(e),
                };
                epoch_loss += t.scalar(loss);
                seen += 1;
                used += 1;
                let grads = t.backward(loss);
                for (slot, &p) in grad_acc.iter_mut().zip(&theta) {
                    if let Some(g) = grads.get(p) {
                        match slot {
                            Some(acc) => *acc += g,
                            None => *slot = Some(g.clone()),
                        }
                    }
                }
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for slot in grad_acc.iter_mut().flatten() {
                slot.mapv_inplace(|v| v * scale);
            }
            optimizer.step(&mut predictor.store, &grad_acc, lr);
        }
        let heldout = if dev.is_empty() {
            None
        } else {
            Some(attacked_loss(&predictor, &target, dev, cfg)?)
        };
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / seen.max(1) as f64,
            heldout_loss: heldout,
            heldout_cer: None,
            skipped_utterances: skipped,
        });
    }
    predictor.meta.epochs = cfg.epochs;
    predictor.meta.corpus_id = format!("{} utterances", corpus.len());
    Ok((predictor, logs))
}

/// Retrain a predictor against a defended pipeline (robust recognizer
/// and/or denoiser in the loop). Identical contract to [`train_predictor`];
/// the defended system stays frozen.
pub fn retrain_predictor_for(
    defended: AttackTarget<'_>,
    corpus: &[(Waveform, Transcript)],
    dev: &[(Waveform, Transcript)],
    arch: PredictorArch,
    cfg: &TrainConfig,
) -> Result<(PredictorModel, Vec<EpochLog>)> {
    train_predictor(defended, corpus, dev, arch, cfg)
}

/// Adversarial fine-tuning configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_anneal_gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    pub multiplier: f64,
    /// Inner-attack steps (3 in the standard recipe).
    pub pgd_steps: usize,
    pub pgd_step_fraction: f64,
    /// Optional early stop: attacked dev CER at or below this value.
    pub stop_attacked_cer: Option<f64>,
    /// Optional guard: do not stop while clean dev CER exceeds this value.
    pub clean_cer_ceiling: Option<f64>,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            epochs: 4,
            batch_size: 32,
            lr: 1e-4,
            lr_anneal_gamma: 0.95,
            momentum: 0.9,
            seed: 13,
            multiplier: 0.008,
            pgd_steps: 3,
            pgd_step_fraction: 0.5,
            stop_attacked_cer: None,
            clean_cer_ceiling: None,
        }
    }
}

/// Fine-tune a recognizer on 50/50 clean and PGD-attacked batches,
/// returning the robust model. Every batch contains `batch_size / 2`
/// attacked inputs built with the inner PGD against the current parameters.
pub fn adversarial_train_asr(
    asr: &AsrModel,
    corpus: &[(Waveform, Transcript)],
    dev: &[(Waveform, Transcript)],
    cfg: &AdvTrainConfig,
) -> Result<(AsrModel, Vec<EpochLog>)> {
    if corpus.is_empty() {
        return Err(Error::domain("training corpus is empty"));
    }
    let mut model = asr.clone();
    let mut optimizer = SgdMomentum::new(&model.store, cfg.momentum, false);
    let mut shuffle_rng = component_rng(cfg.seed, "advtrain-shuffle");

    let mut usable: Vec<usize> = Vec::new();
    let mut skipped = 0usize;
    for (i, (w, y)) in corpus.iter().enumerate() {
        if model.time_frames(w.len()) >= ops::ctc_min_frames(&y.labels()) && !y.is_empty() {
            usable.push(i);
        } else {
            skipped += 1;
        }
    }

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_anneal_gamma.powi(epoch as i32);
        let mut order = usable.clone();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let attacked_count = batch_idx.len() / 2;
            let mut waves: Vec<Vec<f64>> = Vec::with_capacity(batch_idx.len());
            let mut transcripts: Vec<&Transcript> = Vec::with_capacity(batch_idx.len());
            for (j, &i) in batch_idx.iter().enumerate() {
                let (w, y) = &corpus[i];
                if j < batch_idx.len() - attacked_count {
                    waves.push(w.samples.clone());
                } else {
                    let budget = compute_epsilon(w, cfg.multiplier)?;
                    let pgd = PgdConfig {
                        steps: cfg.pgd_steps,
                        step_size_fraction: cfg.pgd_step_fraction,
                        budget,
                    };
                    let pert = pgd_offline(&model, w, y, &pgd)?;
                    let attacked = mix(w, &pert.samples, 0.0)?;
                    waves.push(attacked.samples);
                }
                transcripts.push(y);
            }
            let t = Tape::new();
            let params = model.store.leaves(&t, false);
            let wave_refs: Vec<&[f64]> = waves.iter().map(|w| w.as_slice()).collect();
            let (lp, frames) = model.batch_log_probs(&t, &params, &wave_refs)?;
            let (loss, _) = model.ctc_loss_packed(&t, lp, &frames, &transcripts)?;
            epoch_loss += t.scalar(loss);
            batches += 1;
            let grads = t.backward(loss);
            let grad_vec: Vec<Option<Arr>> = params.iter().map(|&p| grads.get(p).cloned()).collect();
            optimizer.step(&mut model.store, &grad_vec, lr);
        }
        let heldout_cer = if dev.is_empty() {
            None
        } else {
            Some(greedy_cer(&model, dev))
        };
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            heldout_loss: None,
            heldout_cer,
            skipped_utterances: skipped,
        });
        // Configurable stop: attacked CER low enough while clean CER stays
        // under its ceiling.
        if let Some(target_cer) = cfg.stop_attacked_cer {
            if !dev.is_empty() {
                let attacked_cer = {
                    let mut pooled = Pooled::default();
                    for (w, y) in dev {
                        let budget = compute_epsilon(w, cfg.multiplier)?;
                        let pgd = PgdConfig {
                            steps: cfg.pgd_steps,
                            step_size_fraction: cfg.pgd_step_fraction,
                            budget,
                        };
                        if let Ok(pert) = pgd_offline(&model, w, y, &pgd) {
                            let attacked = mix(w, &pert.samples, 0.0)?;
                            if let Ok(hyp) = model.transcribe(&attacked) {
                                if let Ok((_, counts)) = cer(y, &hyp) {
                                    pooled.add(&counts);
                                }
                            }
                        }
                    }
                    pooled.rate()
                };
                let clean_ok = cfg
                    .clean_cer_ceiling
                    .map(|ceil| heldout_cer.unwrap_or(f64::INFINITY) <= ceil)
                    .unwrap_or(true);
                if attacked_cer <= target_cer && clean_ok {
                    break;
                }
            }
        }
    }
    model.meta.epochs += cfg.epochs;
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, SynthConfig};

    fn tiny_corpus(n: usize) -> Vec<(Waveform, Transcript)> {
        let cfg = SynthConfig {
            train_utterances: n,
            words_per_utterance: (6, 7),
            ..Default::default()
        };
        generate_split(&cfg, "train", n)
    }

    fn tiny_asr_cfg(epochs: usize) -> AsrTrainConfig {
        AsrTrainConfig {
            arch: AsrArch {
                conv1_channels: 4,
                conv2_channels: 6,
                hidden: 24,
            },
            epochs,
            batch_size: 4,
            lr: 3e-4,
            ..Default::default()
        }
    }

    fn tiny_predictor_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 3e-4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = tiny_corpus(4);
        let (model, logs) = train_asr(&corpus, &[], &tiny_asr_cfg(0)).unwrap();
        let fresh = AsrModel::new(
            AsrArch {
                conv1_channels: 4,
                conv2_channels: 6,
                hidden: 24,
            },
            tiny_asr_cfg(0).seed,
        );
        assert_eq!(model.store.digest(), fresh.store.digest());
        assert!(logs.is_empty());

        let target = AttackTarget {
            asr: &model,
            denoiser: None,
        };
        let (pred, _) = train_predictor(
            target,
            &corpus,
            &[],
            PredictorArch::tiny(),
            &tiny_predictor_cfg(0),
        )
        .unwrap();
        let fresh = crate::predictor::PredictorModel::new(
            PredictorArch {
                multiplier: tiny_predictor_cfg(0).multiplier,
                ..PredictorArch::tiny()
            },
            tiny_predictor_cfg(0).seed,
        );
        assert_eq!(pred.store.digest(), fresh.store.digest());
    }

    #[test]
    fn lr_schedule_is_exponential() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at_epoch(0) - 1.5e-4).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(3) - 1.5e-4 * 0.99f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn asr_loss_decreases_over_first_steps() {
        let corpus = tiny_corpus(8);
        let (_, logs) = train_asr(&corpus, &[], &tiny_asr_cfg(3)).unwrap();
        assert!(logs.len() == 3);
        assert!(
            logs[2].train_loss < logs[0].train_loss,
            "loss went {} -> {}",
            logs[0].train_loss,
            logs[2].train_loss
        );
    }

    #[test]
    fn predictor_training_freezes_recognizer_and_denoiser() {
        let corpus = tiny_corpus(4);
        let (asr, _) = train_asr(&corpus, &[], &tiny_asr_cfg(1)).unwrap();
        let denoiser = Denoiser::reference(crate::denoise::SpectralGateConfig::default());
        let asr_digest = asr.store.digest();
        let den_digest = denoiser.digest();
        let target = AttackTarget {
            asr: &asr,
            denoiser: Some(&denoiser),
        };
        let (pred, logs) = train_predictor(
            target,
            &corpus,
            &corpus[..2],
            PredictorArch::tiny(),
            &tiny_predictor_cfg(1),
        )
        .unwrap();
        assert_eq!(asr.store.digest(), asr_digest);
        assert_eq!(denoiser.digest(), den_digest);
        assert_eq!(pred.trainable_layer_count(), 13);
        assert!(logs[0].heldout_loss.is_some());
    }

    #[test]
    fn predictor_training_is_reproducible() {
        let corpus = tiny_corpus(3);
        let (asr, _) = train_asr(&corpus, &[], &tiny_asr_cfg(1)).unwrap();
        let target = AttackTarget {
            asr: &asr,
            denoiser: None,
        };
        let run = || {
            train_predictor(
                target,
                &corpus,
                &[],
                PredictorArch::tiny(),
                &tiny_predictor_cfg(1),
            )
            .unwrap()
            .0
        };
        assert_eq!(run().store.digest(), run().store.digest());
    }

    #[test]
    fn adversarial_batches_are_half_attacked() {
        // covered structurally: batch of 2n puts n through the inner PGD;
        // here we just verify the loop runs and returns a changed model.
        let corpus = tiny_corpus(4);
        let (asr, _) = train_asr(&corpus, &[], &tiny_asr_cfg(1)).unwrap();
        let before = asr.store.digest();
        let cfg = AdvTrainConfig {
            epochs: 1,
            batch_size: 4,
            pgd_steps: 3,
            ..Default::default()
        };
        let (robust, logs) = adversarial_train_asr(&asr, &corpus, &[], &cfg).unwrap();
        assert_ne!(robust.store.digest(), before);
        assert_eq!(logs.len(), 1);
    }
}
