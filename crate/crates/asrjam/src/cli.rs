//! Command implementations behind the binary: dataset ingestion and
//! synthesis, training, evaluation, single-file attacks, sweeps, and the
//! attack-characterization report. Each command writes its artifacts under
//! the run's output directory and returns the primary artifact path.

use crate::alphabet::Transcript;
use crate::asr::lm::LmScorer;
use crate::asr::{AsrModel, AsrSystem};
use crate::audio::{read_wav, resample, write_wav, Waveform, CANONICAL_SAMPLE_RATE};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{ingest, write_corpus, DatasetManifest, IngestLayout, SynthConfig};
use crate::denoise::{Denoiser, SpectralGateConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_grid, swap_experiment, write_delay_curve, write_word_stats, AttackKind, DefenseKind,
    GridConfig, GridModels,
};
use crate::metrics::per_word_analysis;
use crate::predictor::{PredictiveGenerator, PredictorArch, PredictorModel};
use crate::schedule::{schedule_stream, EpsilonBinding};
use crate::train::{
    adversarial_train_asr, train_asr, train_predictor, write_metrics_log, AdvTrainConfig,
    AsrTrainConfig, AttackTarget, TrainConfig,
};
use std::path::{Path, PathBuf};

fn load_set(path: &Path) -> Result<Vec<(Waveform, Transcript)>> {
    DatasetManifest::load(path)?.load_audio()
}

fn require_manifest(cfg: &RunConfig) -> Result<&Path> {
    cfg.manifest
        .as_deref()
        .ok_or_else(|| Error::config("no dataset manifest given (set `manifest` or --manifest)"))
}

fn load_asr(path: &Path) -> Result<AsrModel> {
    checkpoint::load(path)?.into_asr()
}

fn load_predictor(path: &Path) -> Result<PredictorModel> {
    checkpoint::load(path)?.into_predictor()
}

fn out_subdir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Walk a source directory into a JSON-lines manifest.
pub fn cmd_ingest(
    source: &Path,
    layout: IngestLayout,
    split: Option<&str>,
    out_manifest: &Path,
) -> Result<String> {
    let report = ingest(source, layout, split)?;
    if let Some(parent) = out_manifest.parent() {
        std::fs::create_dir_all(parent)?;
    }
    report.manifest.save(out_manifest)?;
    let mut summary = format!(
        "ingested {} records ({} skipped) -> {}",
        report.manifest.len(),
        report.skipped,
        out_manifest.display()
    );
    for w in report.warnings.iter().take(10) {
        summary.push_str(&format!("\nwarning: {w}"));
    }
    Ok(summary)
}

/// Generate the synthetic spoken-token corpus.
pub fn cmd_synth(out_dir: &Path, synth: &SynthConfig) -> Result<String> {
    let [train, dev, test] = write_corpus(out_dir, synth)?;
    Ok(format!(
        "wrote corpus manifests:\n  {}\n  {}\n  {}",
        train.display(),
        dev.display(),
        test.display()
    ))
}

/// Train the reference recognizer; writes checkpoint and metrics log.
pub fn cmd_train_asr(cfg: &RunConfig, asr_cfg: &AsrTrainConfig) -> Result<PathBuf> {
    cfg.validate()?;
    crate::config::check_device_env()?;
    cfg.freeze(&cfg.out_dir)?;
    let corpus = load_set(require_manifest(cfg)?)?;
    let dev = match &cfg.dev_manifest {
        Some(p) => load_set(p)?,
        None => Vec::new(),
    };
    let (model, logs) = train_asr(&corpus, &dev, asr_cfg)?;
    let ckpt_dir = out_subdir(cfg, "checkpoints")?;
    let path = ckpt_dir.join("asr.ajck");
    checkpoint::save_asr(&path, &model)?;
    let log_dir = out_subdir(cfg, "logs")?;
    write_metrics_log(&log_dir.join("train_asr.jsonl"), &logs)?;
    Ok(path)
}

/// Train the attack predictor against a frozen recognizer (optionally
/// through a frozen denoiser).
pub fn cmd_train_predictor(cfg: &RunConfig, through_denoiser: bool) -> Result<PathBuf> {
    cfg.validate()?;
    crate::config::check_device_env()?;
    cfg.freeze(&cfg.out_dir)?;
    let corpus = load_set(require_manifest(cfg)?)?;
    let dev = match &cfg.dev_manifest {
        Some(p) => load_set(p)?,
        None => Vec::new(),
    };
    let asr_path = cfg
        .asr_checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("train-predictor needs --asr-checkpoint"))?;
    let asr = load_asr(asr_path)?;
    let denoiser = through_denoiser.then(|| Denoiser::reference(SpectralGateConfig::default()));
    let target = AttackTarget {
        asr: &asr,
        denoiser: denoiser.as_ref(),
    };
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        lr_anneal_gamma: cfg.lr_anneal_gamma,
        momentum: 0.9,
        seed: cfg.seed,
        multiplier: cfg.multiplier,
        clock: cfg.clock(),
    };
    let arch = PredictorArch {
        channel_scale: cfg.predictor_scale.unwrap_or(4),
        ..PredictorArch::full()
    };
    let (model, logs) = train_predictor(target, &corpus, &dev, arch, &train_cfg)?;
    let ckpt_dir = out_subdir(cfg, "checkpoints")?;
    let name = if through_denoiser {
        "predictor_denoised.ajck"
    } else {
        "predictor.ajck"
    };
    let path = ckpt_dir.join(name);
    checkpoint::save_predictor(&path, &model)?;
    let log_dir = out_subdir(cfg, "logs")?;
    write_metrics_log(&log_dir.join("train_predictor.jsonl"), &logs)?;
    Ok(path)
}

/// Adversarially fine-tune a recognizer (50/50 clean and attacked batches).
pub fn cmd_advtrain(cfg: &RunConfig, adv: &AdvTrainConfig) -> Result<PathBuf> {
    cfg.validate()?;
    crate::config::check_device_env()?;
    cfg.freeze(&cfg.out_dir)?;
    let corpus = load_set(require_manifest(cfg)?)?;
    let dev = match &cfg.dev_manifest {
        Some(p) => load_set(p)?,
        None => Vec::new(),
    };
    let asr_path = cfg
        .asr_checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("advtrain needs --asr-checkpoint"))?;
    let asr = load_asr(asr_path)?;
    let (robust, logs) = adversarial_train_asr(&asr, &corpus, &dev, adv)?;
    let ckpt_dir = out_subdir(cfg, "checkpoints")?;
    let path = ckpt_dir.join("asr_robust.ajck");
    checkpoint::save_asr(&path, &robust)?;
    let log_dir = out_subdir(cfg, "logs")?;
    write_metrics_log(&log_dir.join("advtrain.jsonl"), &logs)?;
    Ok(path)
}

fn parse_attacks(s: &str) -> Result<Vec<AttackKind>> {
    s.split(',')
        .map(|a| match a.trim() {
            "none" => Ok(AttackKind::None),
            "uniform" => Ok(AttackKind::Uniform),
            "pgd-offline" => Ok(AttackKind::PgdOffline),
            "pgd-online" => Ok(AttackKind::PgdOnline),
            "predictive" => Ok(AttackKind::Predictive),
            other => Err(Error::config(format!("unknown attack {other:?}"))),
        })
        .collect()
}

fn parse_defenses(s: &str) -> Result<Vec<DefenseKind>> {
    s.split(',')
        .map(|d| match d.trim() {
            "none" => Ok(DefenseKind::None),
            "denoiser" => Ok(DefenseKind::Denoiser),
            "advtrain" => Ok(DefenseKind::AdvTrain),
            "lm" => Ok(DefenseKind::Lm),
            other => Err(Error::config(format!("unknown defense {other:?}"))),
        })
        .collect()
}

/// Run the quantitative grid for the configured attack/defense cells.
pub fn cmd_evaluate(cfg: &RunConfig, timing_runs: usize) -> Result<PathBuf> {
    cfg.validate()?;
    crate::config::check_device_env()?;
    cfg.freeze(&cfg.out_dir)?;
    let corpus = load_set(require_manifest(cfg)?)?;
    let asr_path = cfg
        .asr_checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("evaluate needs --asr-checkpoint"))?;
    let asr = load_asr(asr_path)?;
    let attacks = parse_attacks(&cfg.attack)?;
    let defenses = parse_defenses(&cfg.defense)?;

    let robust = match &cfg.robust_checkpoint {
        Some(p) => Some(load_asr(p)?),
        None => None,
    };
    let predictor = match &cfg.predictor_checkpoint {
        Some(p) => Some(load_predictor(p)?),
        None => None,
    };
    let needs_denoiser = defenses.contains(&DefenseKind::Denoiser);
    let denoiser = needs_denoiser.then(|| Denoiser::reference(SpectralGateConfig::default()));
    let needs_lm = defenses.contains(&DefenseKind::Lm);
    let lm = if needs_lm {
        let transcripts: Vec<Transcript> = corpus.iter().map(|(_, t)| t.clone()).collect();
        Some(LmScorer::train(&transcripts, 4, 0.8, -0.4))
    } else {
        None
    };

    let models = GridModels {
        asr: &asr,
        robust: robust.as_ref(),
        denoiser: denoiser.as_ref(),
        lm: lm.as_ref(),
        predictor: predictor.as_ref(),
    };
    let grid_cfg = GridConfig {
        multiplier: cfg.multiplier,
        clock: cfg.clock(),
        seed: cfg.seed,
        beam_width: cfg.beam_width,
        binding: EpsilonBinding::Causal,
        timing_runs,
    };
    let report = evaluate_grid(&models, &attacks, &defenses, &corpus, &grid_cfg)?;
    let report_dir = out_subdir(cfg, "reports")?;
    report.write(&report_dir)?;
    Ok(report_dir.join("report.json"))
}

/// Attack a single WAV file under streaming semantics: writes the attacked
/// waveform, the serialized plan with per-chunk WAVs, and prints the
/// real-time verdict.
pub fn cmd_attack_file(cfg: &RunConfig, input: &Path) -> Result<String> {
    cfg.validate()?;
    crate::config::check_device_env()?;
    cfg.freeze(&cfg.out_dir)?;
    let predictor_path = cfg
        .predictor_checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("attack-file needs --predictor-checkpoint"))?;
    let predictor = load_predictor(predictor_path)?;
    let wave = resample(&read_wav(input)?, CANONICAL_SAMPLE_RATE)?;
    let mut generator = PredictiveGenerator::new(&predictor);
    let (attacked, plan) = schedule_stream(
        &wave,
        &mut generator,
        &cfg.clock(),
        cfg.multiplier,
        EpsilonBinding::Causal,
    )?;
    let out_dir = out_subdir(cfg, "attack")?;
    write_wav(&out_dir.join("attacked.wav"), &attacked)?;

    // plan.json references one WAV per chunk
    let chunks_dir = out_dir.join("chunks");
    std::fs::create_dir_all(&chunks_dir)?;
    #[derive(serde::Serialize)]
    struct PlanChunkOut {
        start_s: f64,
        epsilon: f64,
        wav_path: PathBuf,
    }
    #[derive(serde::Serialize)]
    struct PlanOut {
        clock: crate::schedule::StreamClock,
        source: crate::schedule::Provenance,
        stream_duration_s: f64,
        mean_generation_s: f64,
        real_time_feasible: bool,
        chunks: Vec<PlanChunkOut>,
    }
    let mut chunks = Vec::new();
    for (i, chunk) in plan.chunks.iter().enumerate() {
        let wav_path = chunks_dir.join(format!("chunk{i:03}.wav"));
        write_wav(
            &wav_path,
            &Waveform {
                samples: chunk.samples.clone(),
                sample_rate: plan.sample_rate,
            },
        )?;
        chunks.push(PlanChunkOut {
            start_s: chunk.start_s,
            epsilon: chunk.epsilon,
            wav_path,
        });
    }
    let plan_out = PlanOut {
        clock: plan.clock,
        source: plan.source,
        stream_duration_s: plan.stream_duration_s,
        mean_generation_s: plan.mean_generation_s,
        real_time_feasible: plan.real_time_feasible,
        chunks,
    };
    std::fs::write(
        out_dir.join("plan.json"),
        serde_json::to_vec_pretty(&plan_out)?,
    )?;

    let diff = attacked.linf_distance(&wave);
    let mut msg = format!(
        "attacked {} -> {} ({} chunks, max |delta| = {:.6})\nper-chunk generation: {:.4} s; real-time (latency < {} s): {}",
        input.display(),
        out_dir.join("attacked.wav").display(),
        plan_out.chunks.len(),
        diff,
        plan.mean_generation_s,
        cfg.delay,
        if plan.real_time_feasible { "yes" } else { "NO" },
    );
    if plan_out.chunks.is_empty() {
        msg.push_str("\nwarning: input shorter than context + delay; no attack was scheduled");
    }
    Ok(msg)
}

/// Delay sweep over a trained predictor (shift protocol).
pub fn cmd_sweep_delay(cfg: &RunConfig, deltas: &[f64]) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.freeze(&cfg.out_dir)?;
    let corpus = load_set(require_manifest(cfg)?)?;
    let asr = load_asr(
        cfg.asr_checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("sweep needs --asr-checkpoint"))?,
    )?;
    let predictor = load_predictor(
        cfg.predictor_checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("sweep needs --predictor-checkpoint"))?,
    )?;
    let grid_cfg = GridConfig {
        multiplier: cfg.multiplier,
        clock: cfg.clock(),
        seed: cfg.seed,
        beam_width: cfg.beam_width,
        binding: EpsilonBinding::Causal,
        timing_runs: 0,
    };
    let points = crate::eval::delay_sweep_shift(&predictor, &asr, &corpus, deltas, &grid_cfg)?;
    let report_dir = out_subdir(cfg, "reports")?;
    let path = report_dir.join("delay_sweep.csv");
    write_delay_curve(&path, &points)?;
    Ok(path)
}

/// Attack-characterization report: the swap experiment and the per-word
/// accuracy table for the configured predictor.
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.freeze(&cfg.out_dir)?;
    let corpus = load_set(require_manifest(cfg)?)?;
    let asr = load_asr(
        cfg.asr_checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("report needs --asr-checkpoint"))?,
    )?;
    let predictor = load_predictor(
        cfg.predictor_checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("report needs --predictor-checkpoint"))?,
    )?;
    let grid_cfg = GridConfig {
        multiplier: cfg.multiplier,
        clock: cfg.clock(),
        seed: cfg.seed,
        beam_width: cfg.beam_width,
        binding: EpsilonBinding::Causal,
        timing_runs: 0,
    };
    let report_dir = out_subdir(cfg, "reports")?;

    let swap = swap_experiment(&predictor, &asr, &corpus, cfg.seed, &grid_cfg)?;
    std::fs::write(
        report_dir.join("swap.json"),
        serde_json::to_vec_pretty(&swap)?,
    )?;

    // per-word analysis over clean vs predictive-attacked transcriptions
    let mut triples = Vec::new();
    for (w, y) in &corpus {
        let mut generator = PredictiveGenerator::new(&predictor);
        let (attacked, _) = schedule_stream(
            w,
            &mut generator,
            &grid_cfg.clock,
            grid_cfg.multiplier,
            grid_cfg.binding,
        )?;
        let clean_hyp = asr.transcribe(w)?;
        let attacked_hyp = asr.transcribe(&attacked)?;
        triples.push((y.clone(), clean_hyp, attacked_hyp));
    }
    let stats = per_word_analysis(&triples);
    write_word_stats(&report_dir.join("word_stats.csv"), &stats)?;
    Ok(report_dir.join("swap.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::AsrArch;

    fn mini_run_dir() -> (tempfile::TempDir, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            train_utterances: 3,
            dev_utterances: 1,
            test_utterances: 2,
            words_per_utterance: (6, 7),
            ..Default::default()
        };
        let corpus_dir = dir.path().join("corpus");
        let [train, _dev, _test] = write_corpus(&corpus_dir, &synth).unwrap();
        let cfg = RunConfig {
            manifest: Some(train),
            out_dir: dir.path().join("run"),
            epochs: 0,
            ..Default::default()
        };
        (dir, cfg)
    }

    #[test]
    fn missing_manifest_is_a_config_error_naming_nothing_found() {
        let cfg = RunConfig::default();
        match cmd_train_asr(&cfg, &AsrTrainConfig::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("manifest")),
            other => panic!("expected config error, got {:?}", other.is_ok()),
        }
        let cfg = RunConfig {
            manifest: Some(PathBuf::from("/definitely/not/here.jsonl")),
            ..Default::default()
        };
        match cmd_train_asr(&cfg, &AsrTrainConfig::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("/definitely/not/here.jsonl")),
            other => panic!("expected config error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn zero_epoch_training_pipeline_produces_checkpoints() {
        let (_guard, cfg) = mini_run_dir();
        let asr_cfg = AsrTrainConfig {
            arch: AsrArch {
                conv1_channels: 2,
                conv2_channels: 3,
                hidden: 8,
            },
            epochs: 0,
            ..Default::default()
        };
        let asr_path = cmd_train_asr(&cfg, &asr_cfg).unwrap();
        assert!(asr_path.exists());
        assert!(cfg.out_dir.join("config.frozen.toml").exists());

        let cfg2 = RunConfig {
            asr_checkpoint: Some(asr_path),
            predictor_scale: Some(16),
            ..cfg
        };
        let pred_path = cmd_train_predictor(&cfg2, false).unwrap();
        assert!(pred_path.exists());
    }

    #[test]
    fn attack_file_short_input_warns_with_empty_plan() {
        let (_guard, cfg) = mini_run_dir();
        let short = Waveform::new(vec![0.2; 16_000], 16_000).unwrap(); // 1 s
        let wav = cfg.out_dir.parent().unwrap().join("short.wav");
        std::fs::create_dir_all(wav.parent().unwrap()).unwrap();
        write_wav(&wav, &short).unwrap();

        let predictor = PredictorModel::new(PredictorArch::tiny(), 3);
        let ckpt = cfg.out_dir.parent().unwrap().join("pred.ajck");
        checkpoint::save_predictor(&ckpt, &predictor).unwrap();

        let cfg = RunConfig {
            predictor_checkpoint: Some(ckpt),
            ..cfg
        };
        let msg = cmd_attack_file(&cfg, &wav).unwrap();
        assert!(msg.contains("warning"), "message was: {msg}");
        assert!(msg.contains("0 chunks"));
        // attacked output identical to input
        let attacked = read_wav(&cfg.out_dir.join("attack/attacked.wav")).unwrap();
        assert_eq!(attacked.len(), short.len());
        assert!(attacked.linf_distance(&short) <= 1.0 / 32767.0 + 1e-9);
    }

    #[test]
    fn attack_file_writes_plan_and_respects_budget() {
        let (_guard, cfg) = mini_run_dir();
        // 4 s tone
        let samples: Vec<f64> = (0..64_000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 350.0 * i as f64 / 16_000.0).sin())
            .collect();
        let wave = Waveform::new(samples, 16_000).unwrap();
        let wav = cfg.out_dir.parent().unwrap().join("four.wav");
        std::fs::create_dir_all(wav.parent().unwrap()).unwrap();
        write_wav(&wav, &wave).unwrap();

        let predictor = PredictorModel::new(PredictorArch::tiny(), 3);
        let ckpt = cfg.out_dir.parent().unwrap().join("pred.ajck");
        checkpoint::save_predictor(&ckpt, &predictor).unwrap();

        let cfg = RunConfig {
            predictor_checkpoint: Some(ckpt),
            ..cfg
        };
        let msg = cmd_attack_file(&cfg, &wav).unwrap();
        assert!(msg.contains("3 chunks"), "message was: {msg}");
        let plan: serde_json::Value =
            serde_json::from_slice(&std::fs::read(cfg.out_dir.join("attack/plan.json")).unwrap())
                .unwrap();
        let chunks = plan["chunks"].as_array().unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0]["start_s"].as_f64().unwrap(), 2.5);
        // max |attacked - clean| <= epsilon (within wav quantization)
        let attacked = read_wav(&cfg.out_dir.join("attack/attacked.wav")).unwrap();
        let clean = read_wav(&wav).unwrap();
        let eps = 0.008 * 0.5;
        assert!(attacked.linf_distance(&clean) <= eps + 2.0 / 32767.0);
    }

    #[test]
    fn parse_cell_selectors() {
        assert_eq!(
            parse_attacks("none,uniform, predictive").unwrap(),
            vec![AttackKind::None, AttackKind::Uniform, AttackKind::Predictive]
        );
        assert!(parse_attacks("sonic").is_err());
        assert_eq!(
            parse_defenses("none,lm").unwrap(),
            vec![DefenseKind::None, DefenseKind::Lm]
        );
        assert!(parse_defenses("armor").is_err());
    }
}
