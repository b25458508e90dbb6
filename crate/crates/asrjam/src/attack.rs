//! Attack baselines: uniform noise and projected gradient descent, in
//! offline (whole-utterance, non-causal) and online (stale-window) variants.

use crate::alphabet::Transcript;
use crate::asr::AsrSystem;
use crate::audio::{clip_samples, AttackBudget, Waveform};
use crate::error::{Error, Result};
use crate::rng::component_rng;
use crate::schedule::{
    schedule_stream, AttackPlan, ChunkGenerator, EpsilonBinding, Provenance, StreamClock,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Projected-gradient-descent parameters. The step size is a fraction of
/// the budget's epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size_fraction: f64,
    pub budget: AttackBudget,
}

impl PgdConfig {
    pub fn new(steps: usize, step_size_fraction: f64, budget: AttackBudget) -> Result<Self> {
        if step_size_fraction <= 0.0 || step_size_fraction > 1.0 {
            return Err(Error::domain("step_size_fraction must be in (0, 1]"));
        }
        Ok(PgdConfig {
            steps,
            step_size_fraction,
            budget,
        })
    }

    /// The canonical setting: 10 steps at 20% of the bound.
    pub fn standard(budget: AttackBudget) -> Self {
        PgdConfig {
            steps: 10,
            step_size_fraction: 0.2,
            budget,
        }
    }

    /// The setting used when a denoiser sits in the loop: 30 iterations.
    pub fn through_denoiser(budget: AttackBudget) -> Self {
        PgdConfig {
            steps: 30,
            step_size_fraction: 0.2,
            budget,
        }
    }
}

/// A bounded perturbation aligned to a target interval.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub samples: Waveform,
    pub budget: AttackBudget,
    pub provenance: Provenance,
}

impl Perturbation {
    pub fn peak(&self) -> f64 {
        self.samples.peak()
    }

    /// The exact ℓ∞ contract every attack must satisfy.
    pub fn within_budget(&self) -> bool {
        self.peak() <= self.budget.epsilon
    }
}

/// I.i.d. uniform samples on [-epsilon, epsilon]; deterministic per seed.
pub fn uniform_noise(length: usize, budget: &AttackBudget, seed: u64) -> Result<Perturbation> {
    if length == 0 {
        return Err(Error::domain("noise length must be positive"));
    }
    let mut rng = component_rng(seed, "uniform-noise");
    let eps = budget.epsilon;
    let samples: Vec<f64> = if eps == 0.0 {
        vec![0.0; length]
    } else {
        (0..length).map(|_| rng.gen_range(-eps..=eps)).collect()
    };
    Ok(Perturbation {
        samples: Waveform {
            samples,
            sample_rate: crate::audio::CANONICAL_SAMPLE_RATE,
        },
        budget: *budget,
        provenance: Provenance::Uniform,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Offline PGD over the whole utterance: iterate
/// alpha <- clip(alpha + step * sign(grad L(x + alpha, y))). Explicitly
/// non-causal; requires white-box gradients.
pub fn pgd_offline(
    system: &dyn AsrSystem,
    w: &Waveform,
    y: &Transcript,
    cfg: &PgdConfig,
) -> Result<Perturbation> {
    let (pert, _) = pgd_offline_traced(system, w, y, cfg)?;
    Ok(pert)
}

/// Like [`pgd_offline`] but also returns every iterate (for bound checks).
pub fn pgd_offline_traced(
    system: &dyn AsrSystem,
    w: &Waveform,
    y: &Transcript,
    cfg: &PgdConfig,
) -> Result<(Perturbation, Vec<Vec<f64>>)> {
    if !system.supports_input_gradients() {
        return Err(Error::capability(format!(
            "pgd requires input gradients; {} is black-box",
            system.name()
        )));
    }
    if y.is_empty() {
        return Err(Error::domain("pgd target transcript must be non-empty"));
    }
    let eps = cfg.budget.epsilon;
    let step = cfg.step_size_fraction * eps;
    let mut alpha = vec![0.0f64; w.len()];
    let mut iterates = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let attacked = Waveform {
            samples: w.samples.iter().zip(&alpha).map(|(x, a)| x + a).collect(),
            sample_rate: w.sample_rate,
        };
        let (_, grad) = system.loss_and_input_grad(&attacked, y)?;
        for (a, g) in alpha.iter_mut().zip(&grad) {
            *a += step * sign(*g);
        }
        clip_samples(&mut alpha, eps);
        iterates.push(alpha.clone());
    }
    Ok((
        Perturbation {
            samples: Waveform {
                samples: alpha,
                sample_rate: w.sample_rate,
            },
            budget: cfg.budget,
            provenance: Provenance::PgdOffline,
        },
        iterates,
    ))
}

/// Streaming PGD chunk source: attacks the trailing context window against
/// the model's own transcription of that window (no ground truth is
/// available online), then plays the tail of the window perturbation in the
/// future chunk slot.
pub struct OnlinePgdGenerator<'a> {
    pub system: &'a dyn AsrSystem,
    pub steps: usize,
    pub step_size_fraction: f64,
    pub context_samples: usize,
    pub sample_rate: u32,
}

impl<'a> OnlinePgdGenerator<'a> {
    pub fn new(system: &'a dyn AsrSystem, cfg: &PgdConfig, clock: &StreamClock) -> Self {
        OnlinePgdGenerator {
            system,
            steps: cfg.steps,
            step_size_fraction: cfg.step_size_fraction,
            context_samples: (clock.context_duration * crate::audio::CANONICAL_SAMPLE_RATE as f64)
                .round() as usize,
            sample_rate: crate::audio::CANONICAL_SAMPLE_RATE,
        }
    }
}

impl ChunkGenerator for OnlinePgdGenerator<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::PgdOnline
    }

    fn generate(&mut self, prefix: &[f64], chunk_len: usize, epsilon: f64) -> Result<Vec<f64>> {
        let start = prefix.len().saturating_sub(self.context_samples);
        let window = Waveform {
            samples: prefix[start..].to_vec(),
            sample_rate: self.sample_rate,
        };
        let pseudo_label = self.system.transcribe(&window)?;
        if pseudo_label.is_empty() || epsilon == 0.0 {
            return Ok(vec![0.0; chunk_len]);
        }
        let cfg = PgdConfig {
            steps: self.steps,
            step_size_fraction: self.step_size_fraction,
            budget: AttackBudget::absolute(epsilon),
        };
        let pert = pgd_offline(self.system, &window, &pseudo_label, &cfg)?;
        // The window's trailing samples are the most recent; they stand in
        // for the unobserved future the chunk will cover.
        let tail = pert
            .samples
            .samples
            .iter()
            .rev()
            .take(chunk_len)
            .rev()
            .cloned()
            .collect::<Vec<f64>>();
        let mut out = vec![0.0; chunk_len.saturating_sub(tail.len())];
        out.extend(tail);
        Ok(out)
    }
}

/// Online PGD over a whole stream: per chunk boundary, attack the trailing
/// window against a pseudo-label and schedule the result delay seconds out.
pub fn pgd_online(
    system: &dyn AsrSystem,
    stream: &Waveform,
    clock: &StreamClock,
    cfg: &PgdConfig,
    binding: EpsilonBinding,
) -> Result<(Waveform, AttackPlan)> {
    if !system.supports_input_gradients() {
        return Err(Error::capability(format!(
            "pgd requires input gradients; {} is black-box",
            system.name()
        )));
    }
    let mut generator = OnlinePgdGenerator::new(system, cfg, clock);
    schedule_stream(stream, &mut generator, clock, cfg.budget.multiplier, binding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::{AsrArch, AsrModel, BlackBox};
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Waveform::new(
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn uniform_noise_respects_bound_and_statistics() {
        let budget = AttackBudget {
            multiplier: 0.008,
            epsilon: 0.01,
        };
        let n = 1_000_000;
        let pert = uniform_noise(n, &budget, 7).unwrap();
        assert!(pert.within_budget());
        let mean: f64 = pert.samples.samples.iter().sum::<f64>() / n as f64;
        // mean of U(-eps, eps): sigma = eps/sqrt(3); |mean| < 3 sigma/sqrt(n)
        let sigma = budget.epsilon / 3.0f64.sqrt();
        assert!(
            mean.abs() < 3.0 * sigma / (n as f64).sqrt(),
            "mean {mean} too far from zero"
        );
    }

    #[test]
    fn uniform_noise_zero_budget_is_silent() {
        let budget = AttackBudget {
            multiplier: 0.0,
            epsilon: 0.0,
        };
        let pert = uniform_noise(100, &budget, 7).unwrap();
        assert!(pert.samples.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn uniform_noise_is_deterministic_per_seed() {
        let budget = AttackBudget {
            multiplier: 0.008,
            epsilon: 0.01,
        };
        let a = uniform_noise(1000, &budget, 42).unwrap();
        let b = uniform_noise(1000, &budget, 42).unwrap();
        assert_eq!(a.samples.samples, b.samples.samples);
        let c = uniform_noise(1000, &budget, 43).unwrap();
        assert_ne!(a.samples.samples, c.samples.samples);
    }

    #[test]
    fn pgd_zero_steps_returns_zero_perturbation() {
        let model = AsrModel::new(AsrArch::tiny(), 3);
        let w = random_wave(1, 3200);
        let y = Transcript::new("ab").unwrap();
        let cfg = PgdConfig::new(0, 0.2, AttackBudget::absolute(0.01)).unwrap();
        let pert = pgd_offline(&model, &w, &y, &cfg).unwrap();
        assert!(pert.samples.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pgd_every_iterate_is_within_budget() {
        let model = AsrModel::new(AsrArch::tiny(), 3);
        let w = random_wave(2, 3200);
        let y = Transcript::new("ab").unwrap();
        let cfg = PgdConfig::standard(AttackBudget::absolute(0.005));
        let (_, iterates) = pgd_offline_traced(&model, &w, &y, &cfg).unwrap();
        assert_eq!(iterates.len(), 10);
        for it in &iterates {
            let peak = it.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            assert!(peak <= 0.005);
        }
    }

    #[test]
    fn single_full_step_matches_independent_fgsm() {
        let model = AsrModel::new(AsrArch::tiny(), 3);
        let w = random_wave(3, 3200);
        let y = Transcript::new("ab").unwrap();
        let eps = 0.01;
        let cfg = PgdConfig::new(1, 1.0, AttackBudget::absolute(eps)).unwrap();
        let pert = pgd_offline(&model, &w, &y, &cfg).unwrap();
        let (_, grad) = model.loss_and_input_grad(&w, &y).unwrap();
        let reference = oracle::fgsm_step(&grad, eps, eps);
        assert_eq!(pert.samples.samples, reference);
    }

    #[test]
    fn pgd_is_deterministic() {
        let model = AsrModel::new(AsrArch::tiny(), 3);
        let w = random_wave(4, 3200);
        let y = Transcript::new("ba").unwrap();
        let cfg = PgdConfig::standard(AttackBudget::absolute(0.01));
        let a = pgd_offline(&model, &w, &y, &cfg).unwrap();
        let b = pgd_offline(&model, &w, &y, &cfg).unwrap();
        assert_eq!(a.samples.samples, b.samples.samples);
    }

    #[test]
    fn pgd_increases_loss_on_most_inputs() {
        let model = AsrModel::new(AsrArch::tiny(), 5);
        let y = Transcript::new("ab").unwrap();
        let mut wins = 0;
        for seed in 0..8 {
            let w = random_wave(100 + seed, 3200);
            let clean = model.ctc_loss_value(&w, &y).unwrap();
            let cfg = PgdConfig::standard(AttackBudget::absolute(0.01));
            let pert = pgd_offline(&model, &w, &y, &cfg).unwrap();
            let attacked = crate::audio::mix(&w, &pert.samples, 0.0).unwrap();
            let after = model.ctc_loss_value(&attacked, &y).unwrap();
            if after > clean {
                wins += 1;
            }
        }
        assert!(wins >= 6, "pgd raised loss on only {wins}/8 inputs");
    }

    #[test]
    fn black_box_refuses_pgd() {
        let model = BlackBox(AsrModel::new(AsrArch::tiny(), 3));
        let w = random_wave(5, 3200);
        let y = Transcript::new("ab").unwrap();
        let cfg = PgdConfig::standard(AttackBudget::absolute(0.01));
        match pgd_offline(&model, &w, &y, &cfg) {
            Err(Error::Capability(_)) => {}
            other => panic!("expected capability error, got {other:?}"),
        }
        let clock = StreamClock::default();
        match pgd_online(&model, &w, &clock, &cfg, EpsilonBinding::Causal) {
            Err(Error::Capability(_)) => {}
            other => panic!("expected capability error, got {other:?}"),
        }
    }

    #[test]
    fn online_pgd_short_stream_is_empty_and_bounded_otherwise() {
        let model = AsrModel::new(AsrArch::tiny(), 3);
        let clock = StreamClock::default();
        let budget = AttackBudget {
            multiplier: 0.05,
            epsilon: f64::NAN, // online binding derives epsilon per chunk
        };
        let cfg = PgdConfig {
            steps: 2,
            step_size_fraction: 0.5,
            budget,
        };
        let short = random_wave(6, 24_000); // 1.5 s
        let (attacked, plan) =
            pgd_online(&model, &short, &clock, &cfg, EpsilonBinding::Causal).unwrap();
        assert!(plan.chunks.is_empty());
        assert_eq!(attacked.samples, short.samples);

        let long = random_wave(7, 56_000); // 3.5 s
        let (_, plan) = pgd_online(&model, &long, &clock, &cfg, EpsilonBinding::Causal).unwrap();
        assert!(!plan.chunks.is_empty());
        for chunk in &plan.chunks {
            let peak = chunk.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            assert!(peak <= chunk.epsilon);
        }
    }
}
