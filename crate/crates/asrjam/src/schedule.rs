//! The record/compute/play timing simulator: chunked attack planning with a
//! delay budget, plan shifting, attack swapping, and coverage-scaled error
//! correction.
//!
//! The timeline works on a fixed grid. A context window of `context_duration`
//! seconds ending at t_k = context + k*r yields a chunk that plays at
//! [t_k + delay, t_k + delay + r), truncated at the stream end. Everything
//! before context + delay is untouched by construction.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Timing parameters of the streaming loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamClock {
    /// Compute+play budget in seconds: a chunk computed from context ending
    /// at t starts playing at t + delay.
    pub delay: f64,
    /// Duration of each generated chunk in seconds.
    pub chunk_duration: f64,
    /// Context window length in seconds.
    pub context_duration: f64,
}

impl Default for StreamClock {
    fn default() -> Self {
        StreamClock {
            delay: 0.5,
            chunk_duration: 0.5,
            context_duration: 2.0,
        }
    }
}

impl StreamClock {
    pub fn with_delay(delay: f64) -> Self {
        StreamClock {
            delay,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay < 0.0 || self.chunk_duration <= 0.0 || self.context_duration <= 0.0 {
            return Err(Error::domain("invalid stream clock"));
        }
        Ok(())
    }
}

/// Who produced an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Uniform,
    PgdOffline,
    PgdOnline,
    Predictive,
}

/// One scheduled perturbation chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanChunk {
    pub start_s: f64,
    pub epsilon: f64,
    pub samples: Vec<f64>,
}

impl PlanChunk {
    pub fn end_s(&self, sample_rate: u32) -> f64 {
        self.start_s + self.samples.len() as f64 / sample_rate as f64
    }
}

/// A timed sequence of attack chunks for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub clock: StreamClock,
    pub source: Provenance,
    pub sample_rate: u32,
    pub stream_duration_s: f64,
    pub chunks: Vec<PlanChunk>,
    /// Mean wall-clock seconds the generator took per chunk.
    pub mean_generation_s: f64,
    /// Whether the measured generation latency fits inside the delay budget.
    pub real_time_feasible: bool,
}

impl AttackPlan {
    pub fn empty(clock: StreamClock, source: Provenance, sample_rate: u32, duration: f64) -> Self {
        AttackPlan {
            clock,
            source,
            sample_rate,
            stream_duration_s: duration,
            chunks: Vec::new(),
            mean_generation_s: 0.0,
            real_time_feasible: true,
        }
    }

    /// Total attacked time in seconds.
    pub fn coverage_s(&self) -> f64 {
        self.chunks
            .iter()
            .map(|c| c.samples.len() as f64 / self.sample_rate as f64)
            .sum()
    }

    /// Largest |sample| across all chunks.
    pub fn peak(&self) -> f64 {
        self.chunks
            .iter()
            .flat_map(|c| c.samples.iter())
            .fold(0.0, |m: f64, s| m.max(s.abs()))
    }
}

/// How the per-chunk epsilon is bound to the stream amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonBinding {
    /// Causal: epsilon = m * max|x[0, t_k)| (running max of the observed
    /// prefix). This is what a live deployment can actually compute.
    Causal,
    /// Non-causal: epsilon = m * max|x| over the whole utterance, the
    /// definition used during training.
    FullUtterance,
}

/// A source of attack chunks: given the clean prefix observed so far,
/// produce the samples to play `delay` seconds later.
pub trait ChunkGenerator {
    fn provenance(&self) -> Provenance;

    /// `prefix` is the clean stream up to the context end t_k (at least
    /// `context_duration` seconds long); the result must contain exactly
    /// `chunk_len` samples bounded by `epsilon`.
    fn generate(&mut self, prefix: &[f64], chunk_len: usize, epsilon: f64) -> Result<Vec<f64>>;
}

/// Run the streaming loop over a whole utterance: for each grid point with
/// room before the stream end, generate a chunk from the trailing context and
/// mix it at its play time. Returns the attacked waveform and the plan.
pub fn schedule_stream(
    stream: &Waveform,
    generator: &mut dyn ChunkGenerator,
    clock: &StreamClock,
    multiplier: f64,
    binding: EpsilonBinding,
) -> Result<(Waveform, AttackPlan)> {
    clock.validate()?;
    if multiplier < 0.0 {
        return Err(Error::domain("budget multiplier must be non-negative"));
    }
    let rate = stream.sample_rate;
    let duration = stream.duration();
    let mut plan = AttackPlan::empty(*clock, generator.provenance(), rate, duration);
    let full_eps = multiplier * stream.peak();
    let mut attacked = stream.samples.clone();
    let mut total_gen = 0.0;
    let mut k = 0usize;
    loop {
        let t_k = clock.context_duration + k as f64 * clock.chunk_duration;
        if t_k + clock.delay >= duration {
            break;
        }
        let ctx_end = stream.sample_index(t_k);
        let play_start = stream.sample_index(t_k + clock.delay);
        let play_end = stream
            .sample_index(t_k + clock.delay + clock.chunk_duration)
            .min(stream.len());
        let chunk_len = play_end.saturating_sub(play_start);
        if chunk_len == 0 {
            break;
        }
        let prefix = &stream.samples[..ctx_end];
        let epsilon = match binding {
            EpsilonBinding::Causal => {
                multiplier * prefix.iter().fold(0.0f64, |m, s| m.max(s.abs()))
            }
            EpsilonBinding::FullUtterance => full_eps,
        };
        let t0 = Instant::now();
        let samples = generator.generate(prefix, chunk_len, epsilon)?;
        total_gen += t0.elapsed().as_secs_f64();
        debug_assert_eq!(samples.len(), chunk_len);
        for (i, &s) in samples.iter().enumerate() {
            attacked[play_start + i] += s;
        }
        plan.chunks.push(PlanChunk {
            start_s: t_k + clock.delay,
            epsilon,
            samples,
        });
        k += 1;
    }
    if !plan.chunks.is_empty() {
        plan.mean_generation_s = total_gen / plan.chunks.len() as f64;
    }
    plan.real_time_feasible = plan.mean_generation_s < clock.delay;
    Ok((
        Waveform {
            samples: attacked,
            sample_rate: rate,
        },
        plan,
    ))
}

/// Mix a plan's chunks into a clean stream (used after shifting/swapping).
pub fn apply_plan(stream: &Waveform, plan: &AttackPlan) -> Waveform {
    let mut out = stream.samples.clone();
    for chunk in &plan.chunks {
        let start = stream.sample_index(chunk.start_s);
        for (i, &s) in chunk.samples.iter().enumerate() {
            if start + i >= out.len() {
                break;
            }
            out[start + i] += s;
        }
    }
    Waveform {
        samples: out,
        sample_rate: stream.sample_rate,
    }
}

/// Move every chunk by (new_delay - old_delay), keeping perturbation
/// contents fixed. Chunks sliding past the stream end are truncated or
/// dropped — exactly the protocol for testing timing sensitivity of attacks
/// trained at one delay and applied at another.
pub fn shift_plan(plan: &AttackPlan, new_delay: f64) -> Result<AttackPlan> {
    if new_delay < 0.0 {
        return Err(Error::domain("delay must be non-negative"));
    }
    let offset = new_delay - plan.clock.delay;
    let rate = plan.sample_rate;
    let end_limit = plan.stream_duration_s;
    let mut out = plan.clone();
    out.clock.delay = new_delay;
    out.chunks.clear();
    for chunk in &plan.chunks {
        let start = chunk.start_s + offset;
        if start >= end_limit {
            continue;
        }
        let max_len = ((end_limit - start) * rate as f64).round() as usize;
        let mut samples = chunk.samples.clone();
        samples.truncate(max_len);
        if samples.is_empty() {
            continue;
        }
        out.chunks.push(PlanChunk {
            start_s: start,
            epsilon: chunk.epsilon,
            samples,
        });
    }
    Ok(out)
}

/// Give plan i the chunk waveforms of plan perm[i], tiling shorter donors
/// over the recipient's chunk slots and truncating longer ones. The
/// recipient's timing grid (starts and slot lengths) is preserved.
pub fn swap_attacks(plans: &[AttackPlan], perm: &[usize]) -> Result<Vec<AttackPlan>> {
    if perm.len() != plans.len() {
        return Err(Error::domain("permutation length mismatch"));
    }
    let mut seen = vec![false; plans.len()];
    for &p in perm {
        if p >= plans.len() || seen[p] {
            return Err(Error::domain("not a permutation"));
        }
        seen[p] = true;
    }
    let mut out = Vec::with_capacity(plans.len());
    for (i, recipient) in plans.iter().enumerate() {
        let donor = &plans[perm[i]];
        let mut swapped = recipient.clone();
        if donor.chunks.is_empty() {
            for c in &mut swapped.chunks {
                c.samples.iter_mut().for_each(|s| *s = 0.0);
            }
        } else {
            for (slot, chunk) in swapped.chunks.iter_mut().enumerate() {
                let d = &donor.chunks[slot % donor.chunks.len()];
                let mut samples = d.samples.clone();
                samples.resize(chunk.samples.len(), 0.0);
                chunk.samples = samples;
                chunk.epsilon = d.epsilon;
            }
        }
        out.push(swapped);
    }
    Ok(out)
}

/// The linear coverage correction: rescale the attack-induced error excess
/// by the ratio of attack-active time, pivoting at the clean error.
pub fn coverage_scaled_error(
    raw_error: f64,
    clean_error: f64,
    active_ref: f64,
    active_test: f64,
) -> Result<f64> {
    if active_test <= 0.0 {
        return Err(Error::domain("active_test must be positive"));
    }
    Ok(clean_error + (raw_error - clean_error) * active_ref / active_test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Plays back a constant value; counts calls.
    struct ConstGen {
        value: f64,
        calls: usize,
    }

    impl ChunkGenerator for ConstGen {
        fn provenance(&self) -> Provenance {
            Provenance::Uniform
        }
        fn generate(&mut self, _prefix: &[f64], chunk_len: usize, epsilon: f64) -> Result<Vec<f64>> {
            self.calls += 1;
            Ok(vec![self.value.clamp(-epsilon, epsilon); chunk_len])
        }
    }

    fn tone(duration: f64) -> Waveform {
        let n = (duration * 16_000.0).round() as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
                .collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn four_second_stream_gets_three_chunks() {
        let stream = tone(4.0);
        let clock = StreamClock::default();
        let mut gen = ConstGen { value: 0.001, calls: 0 };
        let (_, plan) =
            schedule_stream(&stream, &mut gen, &clock, 0.008, EpsilonBinding::FullUtterance)
                .unwrap();
        let starts: Vec<f64> = plan.chunks.iter().map(|c| c.start_s).collect();
        assert_eq!(starts, vec![2.5, 3.0, 3.5]);
        let ends: Vec<f64> = plan.chunks.iter().map(|c| c.end_s(16_000)).collect();
        assert_eq!(ends, vec![3.0, 3.5, 4.0]);
    }

    #[test]
    fn short_stream_yields_empty_plan() {
        let stream = tone(1.5);
        let clock = StreamClock::default();
        let mut gen = ConstGen { value: 0.001, calls: 0 };
        let (attacked, plan) =
            schedule_stream(&stream, &mut gen, &clock, 0.008, EpsilonBinding::FullUtterance)
                .unwrap();
        assert!(plan.chunks.is_empty());
        assert_eq!(attacked.samples, stream.samples);
        assert_eq!(gen.calls, 0);
    }

    #[test]
    fn attacked_equals_clean_before_context_plus_delay() {
        let stream = tone(4.0);
        let clock = StreamClock::default();
        let mut gen = ConstGen { value: 0.002, calls: 0 };
        let (attacked, _) =
            schedule_stream(&stream, &mut gen, &clock, 0.008, EpsilonBinding::FullUtterance)
                .unwrap();
        let cut = stream.sample_index(2.5);
        assert_eq!(&attacked.samples[..cut], &stream.samples[..cut]);
        // and it differs after (the attack is non-zero)
        assert!(attacked.samples[cut..] != stream.samples[cut..]);
    }

    #[test]
    fn timeline_matches_closed_form_for_random_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        for _ in 0..50 {
            let duration = rng.gen_range(0.5..9.0);
            let delay = rng.gen_range(0.0..1.2);
            let r = rng.gen_range(0.2..0.8);
            let clock = StreamClock {
                delay,
                chunk_duration: r,
                context_duration: 2.0,
            };
            let stream = tone(duration);
            let mut gen = ConstGen { value: 0.001, calls: 0 };
            let (attacked, plan) =
                schedule_stream(&stream, &mut gen, &clock, 0.01, EpsilonBinding::FullUtterance)
                    .unwrap();
            let expect = oracle::timeline_chunks(stream.duration(), 2.0, delay, r);
            assert_eq!(plan.chunks.len(), expect.len(), "d={duration} δ={delay} r={r}");
            for (chunk, (s, e)) in plan.chunks.iter().zip(&expect) {
                assert!((chunk.start_s - s).abs() < 1e-9);
                assert!((chunk.end_s(16_000) - e).abs() < 1.0 / 16_000.0 + 1e-9);
            }
            // attacked - clean is exactly the scheduled chunks
            let diff: Vec<f64> = attacked
                .samples
                .iter()
                .zip(&stream.samples)
                .map(|(a, c)| a - c)
                .collect();
            let replayed = apply_plan(&Waveform::silence(stream.len(), 16_000), &plan);
            for (d, r) in diff.iter().zip(&replayed.samples) {
                assert!((d - r).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn causal_epsilon_uses_prefix_peak() {
        // Quiet start, loud burst at 2.5 s: the first chunk (context ends at
        // 2.0 s) sees only the quiet prefix, later chunks see the burst.
        let mut samples = vec![0.1; 64_000];
        for s in samples.iter_mut().take(44_000).skip(40_000) {
            *s = 0.9;
        }
        let stream = Waveform::new(samples, 16_000).unwrap();
        let clock = StreamClock::default();
        let mut gen = ConstGen { value: 1.0, calls: 0 };
        let (_, plan) =
            schedule_stream(&stream, &mut gen, &clock, 0.01, EpsilonBinding::Causal).unwrap();
        assert!((plan.chunks[0].epsilon - 0.001).abs() < 1e-12);
        let last = plan.chunks.last().unwrap();
        assert!(last.epsilon > plan.chunks[0].epsilon);
    }

    #[test]
    fn shift_identity_and_truncation() {
        let stream = tone(4.0);
        let clock = StreamClock::default();
        let mut gen = ConstGen { value: 0.001, calls: 0 };
        let (_, plan) =
            schedule_stream(&stream, &mut gen, &clock, 0.008, EpsilonBinding::FullUtterance)
                .unwrap();

        let same = shift_plan(&plan, 0.5).unwrap();
        assert_eq!(same, plan);

        // Shift 0.5 -> 1.0: starts move to 3.0, 3.5, 4.0; the last chunk
        // starts exactly at the stream end and is dropped.
        let shifted = shift_plan(&plan, 1.0).unwrap();
        let starts: Vec<f64> = shifted.chunks.iter().map(|c| c.start_s).collect();
        assert_eq!(starts, vec![3.0, 3.5]);
        assert!((plan.coverage_s() - 1.5).abs() < 1e-9);
        assert!((shifted.coverage_s() - 1.0).abs() < 1e-9);

        // Far beyond the stream: empty.
        let gone = shift_plan(&plan, 5.0).unwrap();
        assert!(gone.chunks.is_empty());
    }

    #[test]
    fn swap_tiles_and_truncates_donors() {
        let mk = |n_chunks: usize, tag: f64| {
            let mut plan = AttackPlan::empty(StreamClock::default(), Provenance::Predictive, 16_000, 10.0);
            for k in 0..n_chunks {
                plan.chunks.push(PlanChunk {
                    start_s: 2.5 + 0.5 * k as f64,
                    epsilon: 0.01,
                    samples: vec![tag + k as f64; 8_000],
                });
            }
            plan
        };
        let plans = vec![mk(5, 10.0), mk(2, 20.0)];
        // identity leaves plans unchanged
        let id = swap_attacks(&plans, &[0, 1]).unwrap();
        assert_eq!(id, plans);
        // swap: recipient 0 (5 slots) gets donor 1 (2 chunks) tiled
        let swapped = swap_attacks(&plans, &[1, 0]).unwrap();
        let tags: Vec<f64> = swapped[0].chunks.iter().map(|c| c.samples[0]).collect();
        assert_eq!(tags, vec![20.0, 21.0, 20.0, 21.0, 20.0]);
        // recipient 1 (2 slots) gets donor 0 truncated
        let tags: Vec<f64> = swapped[1].chunks.iter().map(|c| c.samples[0]).collect();
        assert_eq!(tags, vec![10.0, 11.0]);
        // timing grid preserved
        for (a, b) in swapped[0].chunks.iter().zip(&plans[0].chunks) {
            assert_eq!(a.start_s, b.start_s);
            assert_eq!(a.samples.len(), b.samples.len());
        }
    }

    #[test]
    fn swap_rejects_non_permutations() {
        let plan = AttackPlan::empty(StreamClock::default(), Provenance::Uniform, 16_000, 4.0);
        let plans = vec![plan.clone(), plan];
        assert!(swap_attacks(&plans, &[0, 0]).is_err());
        assert!(swap_attacks(&plans, &[0]).is_err());
    }

    #[test]
    fn coverage_scaling_arithmetic() {
        assert_eq!(coverage_scaled_error(40.0, 10.0, 1.5, 1.5).unwrap(), 40.0);
        assert_eq!(coverage_scaled_error(10.0, 10.0, 1.5, 1.0).unwrap(), 10.0);
        assert_eq!(coverage_scaled_error(40.0, 10.0, 1.5, 1.0).unwrap(), 55.0);
        assert!(coverage_scaled_error(40.0, 10.0, 1.5, 0.0).is_err());
    }

    #[test]
    fn total_coverage_matches_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(72);
        for _ in 0..20 {
            let duration = rng.gen_range(1.0..8.0);
            let delay = rng.gen_range(0.0..1.0);
            let clock = StreamClock {
                delay,
                chunk_duration: 0.5,
                context_duration: 2.0,
            };
            let stream = tone(duration);
            let mut gen = ConstGen { value: 0.001, calls: 0 };
            let (_, plan) =
                schedule_stream(&stream, &mut gen, &clock, 0.01, EpsilonBinding::FullUtterance)
                    .unwrap();
            let expect = (stream.duration() - (2.0 + delay)).max(0.0);
            assert!(
                (plan.coverage_s() - expect).abs() < 2.0 / 16_000.0 + 1e-9,
                "coverage {} vs {expect}",
                plan.coverage_s()
            );
        }
    }
}
