//! Experiment drivers: the attack-by-defense grid, timing measurement,
//! delay and amplitude sweeps, the attack-swap experiment, and report
//! emission (JSON plus CSV, plot-data only).

use crate::alphabet::Transcript;
use crate::asr::lm::LmScorer;
use crate::asr::{AsrModel, AsrSystem, LmDecoded};
use crate::attack::{pgd_offline, pgd_online, uniform_noise, PgdConfig};
use crate::audio::{compute_epsilon, mix, Waveform};
use crate::denoise::{DenoisedAsr, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::{cer, wer, Pooled};
use crate::predictor::{PredictiveGenerator, PredictorModel};
use crate::rng::component_seed;
use crate::schedule::{
    apply_plan, schedule_stream, shift_plan, swap_attacks, AttackPlan, EpsilonBinding, StreamClock,
};
use crate::train::{train_predictor, AttackTarget, TrainConfig};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// Attack selector for grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    Uniform,
    PgdOffline,
    PgdOnline,
    Predictive,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Uniform => "uniform",
            AttackKind::PgdOffline => "pgd-offline",
            AttackKind::PgdOnline => "pgd-online",
            AttackKind::Predictive => "predictive",
        }
    }

    /// Offline PGD needs the whole future signal: it can never run live.
    pub fn real_time(&self) -> bool {
        !matches!(self, AttackKind::PgdOffline)
    }
}

/// Defense selector for grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Denoiser,
    AdvTrain,
    Lm,
}

impl DefenseKind {
    pub fn label(&self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Denoiser => "denoiser",
            DefenseKind::AdvTrain => "advtrain",
            DefenseKind::Lm => "lm",
        }
    }
}

/// Everything a grid evaluation can reference.
pub struct GridModels<'a> {
    pub asr: &'a AsrModel,
    pub robust: Option<&'a AsrModel>,
    pub denoiser: Option<&'a Denoiser>,
    pub lm: Option<&'a LmScorer>,
    pub predictor: Option<&'a PredictorModel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub multiplier: f64,
    pub clock: StreamClock,
    pub seed: u64,
    pub beam_width: usize,
    pub binding: EpsilonBinding,
    /// Runs for the attack-generation timing measurement (0 disables it).
    pub timing_runs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            multiplier: 0.008,
            clock: StreamClock::default(),
            seed: 17,
            beam_width: 8,
            binding: EpsilonBinding::Causal,
            timing_runs: 0,
        }
    }
}

/// One grid cell of the quantitative table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: String,
    pub defense: String,
    pub multiplier: f64,
    pub delay_s: f64,
    pub wer: f64,
    pub cer: f64,
    /// Mean attack-generation seconds for a 2 s input (when measured).
    pub runtime_s: Option<f64>,
    pub real_time: bool,
    pub real_time_feasible: bool,
    pub utterances: usize,
    pub attacked_coverage_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub seed: u64,
    pub multiplier: f64,
    pub delay_s: f64,
    pub chunk_s: f64,
    pub corpus_size: usize,
    pub asr_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictor_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoiser_digest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub provenance: ReportProvenance,
}

impl EvalReport {
    pub fn row(&self, attack: &str, defense: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.defense == defense)
    }

    /// JSON report plus a CSV table next to it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_vec_pretty(self)?,
        )?;
        let mut csv = String::from(
            "attack,defense,multiplier,delay_s,wer,cer,runtime_s,real_time,feasible,utterances,coverage_s\n",
        );
        for r in &self.rows {
            csv.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{},{},{},{},{:.3}\n",
                r.attack,
                r.defense,
                r.multiplier,
                r.delay_s,
                r.wer,
                r.cer,
                r.runtime_s.map(|t| format!("{t:.6}")).unwrap_or_default(),
                r.real_time,
                r.real_time_feasible,
                r.utterances,
                r.attacked_coverage_s,
            ));
        }
        std::fs::write(dir.join("report.csv"), csv)?;
        Ok(())
    }
}

/// Resolve the recognizer a defense presents to the attacker/scorer.
fn defended_system<'a>(
    models: &'a GridModels<'a>,
    defense: DefenseKind,
    beam_width: usize,
) -> Result<Box<dyn AsrSystem + 'a>> {
    match defense {
        DefenseKind::None => Ok(Box::new(models.asr.clone())),
        DefenseKind::AdvTrain => {
            let robust = models
                .robust
                .ok_or_else(|| Error::config("advtrain defense requested without a robust model"))?;
            Ok(Box::new(robust.clone()))
        }
        DefenseKind::Denoiser => {
            let denoiser = models
                .denoiser
                .ok_or_else(|| Error::config("denoiser defense requested without a denoiser"))?;
            Ok(Box::new(DenoisedAsr {
                denoiser: denoiser.clone(),
                model: models.asr.clone(),
            }))
        }
        DefenseKind::Lm => {
            let lm = models
                .lm
                .ok_or_else(|| Error::config("lm defense requested without a language model"))?;
            Ok(Box::new(LmDecoded {
                model: models.asr.clone(),
                lm: lm.clone(),
                beam_width,
            }))
        }
    }
}

/// Build the attacked waveform for one utterance under one attack kind,
/// returning the plan when the attack is scheduled.
#[allow(clippy::too_many_arguments)]
fn attacked_waveform(
    attack: AttackKind,
    system: &dyn AsrSystem,
    predictor: Option<&PredictorModel>,
    w: &Waveform,
    y: &Transcript,
    cfg: &GridConfig,
    use_denoiser_steps: bool,
    utterance_seed: u64,
) -> Result<(Waveform, Option<AttackPlan>)> {
    match attack {
        AttackKind::None => Ok((w.clone(), None)),
        AttackKind::Uniform => {
            let budget = compute_epsilon(w, cfg.multiplier)?;
            let noise = uniform_noise(w.len(), &budget, utterance_seed)?;
            Ok((mix(w, &noise.samples, 0.0)?, None))
        }
        AttackKind::PgdOffline => {
            let budget = compute_epsilon(w, cfg.multiplier)?;
            let pgd = if use_denoiser_steps {
                PgdConfig::through_denoiser(budget)
            } else {
                PgdConfig::standard(budget)
            };
            let pert = pgd_offline(system, w, y, &pgd)?;
            Ok((mix(w, &pert.samples, 0.0)?, None))
        }
        AttackKind::PgdOnline => {
            let budget = compute_epsilon(w, cfg.multiplier)?;
            let pgd = if use_denoiser_steps {
                PgdConfig::through_denoiser(budget)
            } else {
                PgdConfig::standard(budget)
            };
            let (attacked, plan) = pgd_online(system, w, &cfg.clock, &pgd, cfg.binding)?;
            Ok((attacked, Some(plan)))
        }
        AttackKind::Predictive => {
            let predictor = predictor
                .ok_or_else(|| Error::config("predictive attack requested without a predictor"))?;
            let mut generator = PredictiveGenerator::new(predictor);
            let (attacked, plan) =
                schedule_stream(w, &mut generator, &cfg.clock, cfg.multiplier, cfg.binding)?;
            Ok((attacked, Some(plan)))
        }
    }
}

/// Score one attack x defense cell over a corpus.
pub fn evaluate_cell(
    models: &GridModels<'_>,
    attack: AttackKind,
    defense: DefenseKind,
    corpus: &[(Waveform, Transcript)],
    cfg: &GridConfig,
) -> Result<EvalRow> {
    let system = defended_system(models, defense, cfg.beam_width)?;
    let mut wer_pool = Pooled::default();
    let mut cer_pool = Pooled::default();
    let mut coverage = 0.0;
    let mut feasible = true;
    for (i, (w, y)) in corpus.iter().enumerate() {
        let utt_seed = component_seed(cfg.seed, &format!("cell-{}-{}-{i}", attack.label(), defense.label()));
        let (attacked, plan) = attacked_waveform(
            attack,
            system.as_ref(),
            models.predictor,
            w,
            y,
            cfg,
            defense == DefenseKind::Denoiser,
            utt_seed,
        )?;
        if let Some(plan) = plan {
            coverage += plan.coverage_s();
            feasible &= plan.real_time_feasible;
        }
        let hyp = system.transcribe(&attacked)?;
        let (_, wc) = wer(y, &hyp)?;
        let (_, cc) = cer(y, &hyp)?;
        wer_pool.add(&wc);
        cer_pool.add(&cc);
    }
    let runtime_s = if cfg.timing_runs > 0 {
        Some(measure_attack_generation(
            models, attack, defense, corpus, cfg,
        )?)
    } else {
        None
    };
    Ok(EvalRow {
        attack: attack.label().into(),
        defense: defense.label().into(),
        multiplier: cfg.multiplier,
        delay_s: cfg.clock.delay,
        wer: wer_pool.rate(),
        cer: cer_pool.rate(),
        runtime_s,
        real_time: attack.real_time(),
        real_time_feasible: feasible,
        utterances: corpus.len(),
        attacked_coverage_s: coverage,
    })
}

/// Run every (attack x defense) combination and assemble the report.
pub fn evaluate_grid(
    models: &GridModels<'_>,
    attacks: &[AttackKind],
    defenses: &[DefenseKind],
    corpus: &[(Waveform, Transcript)],
    cfg: &GridConfig,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for &defense in defenses {
        for &attack in attacks {
            rows.push(evaluate_cell(models, attack, defense, corpus, cfg)?);
        }
    }
    Ok(EvalReport {
        rows,
        provenance: ReportProvenance {
            seed: cfg.seed,
            multiplier: cfg.multiplier,
            delay_s: cfg.clock.delay,
            chunk_s: cfg.clock.chunk_duration,
            corpus_size: corpus.len(),
            asr_digest: models.asr.store.digest(),
            robust_digest: models.robust.map(|m| m.store.digest()),
            predictor_digest: models.predictor.map(|m| m.store.digest()),
            denoiser_digest: models.denoiser.map(|d| d.digest()),
        },
    })
}

/// Mean wall-clock seconds of `generate` over `runs` invocations, after
/// `warmup` discarded calls.
pub fn measure_time<F: FnMut()>(mut generate: F, runs: usize, warmup: usize) -> f64 {
    assert!(runs >= 1);
    for _ in 0..warmup {
        generate();
    }
    let start = Instant::now();
    for _ in 0..runs {
        generate();
    }
    start.elapsed().as_secs_f64() / runs as f64
}

/// Attack-vector generation time for a 2 s input, averaged over the
/// configured runs (with one warmup call).
fn measure_attack_generation(
    models: &GridModels<'_>,
    attack: AttackKind,
    defense: DefenseKind,
    corpus: &[(Waveform, Transcript)],
    cfg: &GridConfig,
) -> Result<f64> {
    let (w, y) = corpus
        .first()
        .ok_or_else(|| Error::domain("timing needs at least one utterance"))?;
    let two_s = 2 * crate::audio::CANONICAL_SAMPLE_RATE as usize;
    let input = Waveform {
        samples: w.samples.iter().cloned().cycle().take(two_s).collect(),
        sample_rate: w.sample_rate,
    };
    let budget = compute_epsilon(&input, cfg.multiplier)?;
    let system = defended_system(models, defense, cfg.beam_width)?;
    let mut counter = 0u64;
    let seconds = match attack {
        AttackKind::None => 0.0,
        AttackKind::Uniform => measure_time(
            || {
                counter += 1;
                let _ = uniform_noise(two_s, &budget, cfg.seed + counter).unwrap();
            },
            cfg.timing_runs,
            1,
        ),
        AttackKind::PgdOffline | AttackKind::PgdOnline => {
            let pgd = if defense == DefenseKind::Denoiser {
                PgdConfig::through_denoiser(budget)
            } else {
                PgdConfig::standard(budget)
            };
            measure_time(
                || {
                    let _ = pgd_offline(system.as_ref(), &input, y, &pgd).unwrap();
                },
                cfg.timing_runs,
                1,
            )
        }
        AttackKind::Predictive => {
            let predictor = models
                .predictor
                .ok_or_else(|| Error::config("predictive timing without a predictor"))?;
            let kernel = predictor.context_kernel();
            let ctx = crate::predictor::context_window_with(&kernel, &input, 2.0)?;
            measure_time(
                || {
                    let _ = predictor.predict_attack(&ctx, &budget).unwrap();
                },
                cfg.timing_runs,
                1,
            )
        }
    };
    Ok(seconds)
}

/// One point of the delay-sensitivity curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelayPoint {
    pub delay_s: f64,
    pub wer_raw: f64,
    pub wer_coverage_scaled: f64,
    pub cer_raw: f64,
    pub coverage_s: f64,
}

/// Timing-sensitivity protocol: plans are computed once at the training
/// delay, then shifted to each test delay with contents fixed; raw and
/// coverage-scaled error rates are reported.
pub fn delay_sweep_shift(
    predictor: &PredictorModel,
    asr: &AsrModel,
    corpus: &[(Waveform, Transcript)],
    deltas: &[f64],
    cfg: &GridConfig,
) -> Result<Vec<DelayPoint>> {
    // Reference plans at the trained delay.
    let mut plans = Vec::with_capacity(corpus.len());
    for (w, _) in corpus {
        let mut generator = PredictiveGenerator::new(predictor);
        let (_, plan) = schedule_stream(w, &mut generator, &cfg.clock, cfg.multiplier, cfg.binding)?;
        plans.push(plan);
    }
    let clean_wer = {
        let mut pool = Pooled::default();
        for (w, y) in corpus {
            let hyp = asr.transcribe(w)?;
            let (_, counts) = wer(y, &hyp)?;
            pool.add(&counts);
        }
        pool.rate()
    };
    let ref_coverage: f64 = plans.iter().map(|p| p.coverage_s()).sum();

    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut wer_pool = Pooled::default();
        let mut cer_pool = Pooled::default();
        let mut coverage = 0.0;
        for ((w, y), plan) in corpus.iter().zip(&plans) {
            let shifted = shift_plan(plan, delta)?;
            coverage += shifted.coverage_s();
            let attacked = apply_plan(w, &shifted);
            let hyp = asr.transcribe(&attacked)?;
            let (_, wc) = wer(y, &hyp)?;
            let (_, cc) = cer(y, &hyp)?;
            wer_pool.add(&wc);
            cer_pool.add(&cc);
        }
        let raw = wer_pool.rate();
        let scaled = if coverage > 0.0 {
            crate::schedule::coverage_scaled_error(raw, clean_wer, ref_coverage, coverage)?
        } else {
            clean_wer
        };
        points.push(DelayPoint {
            delay_s: delta,
            wer_raw: raw,
            wer_coverage_scaled: scaled,
            cer_raw: cer_pool.rate(),
            coverage_s: coverage,
        });
    }
    Ok(points)
}

/// Retrained-delay protocol: train one predictor per delay and evaluate
/// each at its own delay.
pub fn delay_sweep_retrain(
    asr: &AsrModel,
    train_set: &[(Waveform, Transcript)],
    eval_set: &[(Waveform, Transcript)],
    arch: crate::predictor::PredictorArch,
    base: &TrainConfig,
    deltas: &[f64],
    cfg: &GridConfig,
) -> Result<Vec<DelayPoint>> {
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut train_cfg = base.clone();
        train_cfg.clock.delay = delta;
        let target = AttackTarget {
            asr,
            denoiser: None,
        };
        let (predictor, _) = train_predictor(target, train_set, &[], arch.clone(), &train_cfg)?;
        let mut eval_cfg = cfg.clone();
        eval_cfg.clock.delay = delta;
        let models = GridModels {
            asr,
            robust: None,
            denoiser: None,
            lm: None,
            predictor: Some(&predictor),
        };
        let row = evaluate_cell(&models, AttackKind::Predictive, DefenseKind::None, eval_set, &eval_cfg)?;
        points.push(DelayPoint {
            delay_s: delta,
            wer_raw: row.wer,
            wer_coverage_scaled: row.wer,
            cer_raw: row.cer,
            coverage_s: row.attacked_coverage_s,
        });
    }
    Ok(points)
}

/// One point of the amplitude sweep: per-seed WERs at one multiplier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmplitudePoint {
    pub multiplier: f64,
    pub wer_per_seed: Vec<f64>,
    pub wer_mean: f64,
    pub wer_std: f64,
}

/// Train one predictor per (multiplier, seed) and evaluate attacked WER.
/// The multiplier enters the output scaling, so each point gets its own
/// training run.
#[allow(clippy::too_many_arguments)]
pub fn amplitude_sweep(
    asr: &AsrModel,
    train_set: &[(Waveform, Transcript)],
    eval_set: &[(Waveform, Transcript)],
    arch: crate::predictor::PredictorArch,
    base: &TrainConfig,
    multipliers: &[f64],
    seeds: &[u64],
    cfg: &GridConfig,
) -> Result<Vec<AmplitudePoint>> {
    let mut points = Vec::with_capacity(multipliers.len());
    for &m in multipliers {
        let mut wers = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let row = if m == 0.0 {
                // zero budget: the attack is silent; score the clean rows
                let models = GridModels {
                    asr,
                    robust: None,
                    denoiser: None,
                    lm: None,
                    predictor: None,
                };
                evaluate_cell(&models, AttackKind::None, DefenseKind::None, eval_set, cfg)?
            } else {
                let mut train_cfg = base.clone();
                train_cfg.multiplier = m;
                train_cfg.seed = seed;
                let target = AttackTarget {
                    asr,
                    denoiser: None,
                };
                let (predictor, _) =
                    train_predictor(target, train_set, &[], arch.clone(), &train_cfg)?;
                let mut eval_cfg = cfg.clone();
                eval_cfg.multiplier = m;
                let models = GridModels {
                    asr,
                    robust: None,
                    denoiser: None,
                    lm: None,
                    predictor: Some(&predictor),
                };
                evaluate_cell(&models, AttackKind::Predictive, DefenseKind::None, eval_set, &eval_cfg)?
            };
            wers.push(row.wer);
        }
        let mean = wers.iter().sum::<f64>() / wers.len() as f64;
        let var = wers.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
            / wers.len().max(1) as f64;
        points.push(AmplitudePoint {
            multiplier: m,
            wer_per_seed: wers,
            wer_mean: mean,
            wer_std: var.sqrt(),
        });
    }
    Ok(points)
}

/// Outcome of the attack-swap experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub clean_wer: f64,
    pub clean_cer: f64,
    pub matched_wer: f64,
    pub matched_cer: f64,
    pub swapped_wer: f64,
    pub swapped_cer: f64,
}

/// Evaluate matched plans against derangement-swapped plans: each utterance
/// receives the attack chunks generated for a different utterance, tiled
/// over its own timing grid.
pub fn swap_experiment(
    predictor: &PredictorModel,
    asr: &AsrModel,
    corpus: &[(Waveform, Transcript)],
    seed: u64,
    cfg: &GridConfig,
) -> Result<SwapOutcome> {
    if corpus.len() < 2 {
        return Err(Error::domain("swap experiment needs at least 2 utterances"));
    }
    let mut plans = Vec::with_capacity(corpus.len());
    for (w, _) in corpus {
        let mut generator = PredictiveGenerator::new(predictor);
        let (_, plan) = schedule_stream(w, &mut generator, &cfg.clock, cfg.multiplier, cfg.binding)?;
        plans.push(plan);
    }
    let perm = derangement(corpus.len(), seed);
    let swapped_plans = swap_attacks(&plans, &perm)?;

    let score = |make: &dyn Fn(usize) -> Waveform| -> Result<(f64, f64)> {
        let mut wp = Pooled::default();
        let mut cp = Pooled::default();
        for (i, (_, y)) in corpus.iter().enumerate() {
            let hyp = asr.transcribe(&make(i))?;
            let (_, wc) = wer(y, &hyp)?;
            let (_, cc) = cer(y, &hyp)?;
            wp.add(&wc);
            cp.add(&cc);
        }
        Ok((wp.rate(), cp.rate()))
    };
    let (clean_wer, clean_cer) = score(&|i| corpus[i].0.clone())?;
    let (matched_wer, matched_cer) = score(&|i| apply_plan(&corpus[i].0, &plans[i]))?;
    let (swapped_wer, swapped_cer) = score(&|i| apply_plan(&corpus[i].0, &swapped_plans[i]))?;
    Ok(SwapOutcome {
        clean_wer,
        clean_cer,
        matched_wer,
        matched_cer,
        swapped_wer,
        swapped_cer,
    })
}

/// Seeded random derangement (no fixed points) by rejection sampling.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    assert!(n >= 2);
    let mut rng = crate::rng::component_rng(seed, "derangement");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Write sweep curves as CSV plot data {x, y, y_scaled}.
pub fn write_delay_curve(path: &Path, points: &[DelayPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "delay_s,wer_raw,wer_coverage_scaled,cer_raw,coverage_s")?;
    for p in points {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.3}",
            p.delay_s, p.wer_raw, p.wer_coverage_scaled, p.cer_raw, p.coverage_s
        )?;
    }
    Ok(())
}

pub fn write_amplitude_curve(path: &Path, points: &[AmplitudePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "multiplier,wer_mean,wer_std,seeds")?;
    for p in points {
        writeln!(
            f,
            "{},{:.6},{:.6},{}",
            p.multiplier,
            p.wer_mean,
            p.wer_std,
            p.wer_per_seed.len()
        )?;
    }
    Ok(())
}

/// Write per-word statistics as CSV.
pub fn write_word_stats(path: &Path, stats: &[crate::metrics::WordStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "word,count,length,clean_accuracy,attacked_accuracy,accuracy_drop")?;
    for s in stats {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6}",
            s.word, s.count, s.length, s.clean_accuracy, s.attacked_accuracy, s.accuracy_drop
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::AsrArch;
    use crate::dataset::{generate_split, SynthConfig};

    fn mini_setup() -> (AsrModel, Vec<(Waveform, Transcript)>) {
        let corpus = generate_split(
            &SynthConfig {
                words_per_utterance: (6, 7),
                ..Default::default()
            },
            "eval-test",
            3,
        );
        let asr = AsrModel::new(
            AsrArch {
                conv1_channels: 4,
                conv2_channels: 6,
                hidden: 24,
            },
            23,
        );
        (asr, corpus)
    }

    #[test]
    fn no_attack_row_equals_clean_baseline() {
        let (asr, corpus) = mini_setup();
        let models = GridModels {
            asr: &asr,
            robust: None,
            denoiser: None,
            lm: None,
            predictor: None,
        };
        let cfg = GridConfig::default();
        let row = evaluate_cell(&models, AttackKind::None, DefenseKind::None, &corpus, &cfg).unwrap();
        // clean baseline computed directly
        let mut pool = Pooled::default();
        for (w, y) in &corpus {
            let hyp = asr.transcribe(w).unwrap();
            let (_, counts) = wer(y, &hyp).unwrap();
            pool.add(&counts);
        }
        assert_eq!(row.wer, pool.rate());
        assert_eq!(row.attack, "none");
        assert!(row.real_time);
    }

    #[test]
    fn grid_layout_covers_requested_cells() {
        let (asr, corpus) = mini_setup();
        let models = GridModels {
            asr: &asr,
            robust: None,
            denoiser: None,
            lm: None,
            predictor: None,
        };
        let cfg = GridConfig::default();
        let report = evaluate_grid(
            &models,
            &[AttackKind::None, AttackKind::Uniform],
            &[DefenseKind::None],
            &corpus,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.row("uniform", "none").is_some());
        assert_eq!(report.provenance.corpus_size, 3);
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("report.csv").exists());
    }

    #[test]
    fn offline_pgd_is_flagged_non_real_time() {
        assert!(!AttackKind::PgdOffline.real_time());
        assert!(AttackKind::PgdOnline.real_time());
        assert!(AttackKind::Predictive.real_time());
    }

    #[test]
    fn timing_calibration_with_dummy_sleeper() {
        // a deterministic 5 ms generator must measure within [5, 7] ms
        let mean = measure_time(
            || std::thread::sleep(std::time::Duration::from_millis(5)),
            20,
            2,
        );
        assert!(
            (0.005..0.007).contains(&mean),
            "measured {mean:.4} s for a 5 ms sleeper"
        );
    }

    #[test]
    fn derangement_has_no_fixed_points_and_is_seeded() {
        for n in [2usize, 3, 5, 20] {
            let d = derangement(n, 99);
            assert!(d.iter().enumerate().all(|(i, &p)| i != p));
            let mut sorted = d.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(derangement(10, 5), derangement(10, 5));
    }

    #[test]
    fn coverage_scaling_in_delay_sweep_identity_point() {
        let (asr, corpus) = mini_setup();
        let predictor = PredictorModel::new(crate::predictor::PredictorArch::tiny(), 31);
        let cfg = GridConfig::default();
        let points =
            delay_sweep_shift(&predictor, &asr, &corpus, &[cfg.clock.delay], &cfg).unwrap();
        assert_eq!(points.len(), 1);
        // at the trained delay the scaled curve equals the raw curve
        assert!((points[0].wer_raw - points[0].wer_coverage_scaled).abs() < 1e-12);
    }
}
