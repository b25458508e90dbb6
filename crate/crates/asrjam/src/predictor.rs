//! The forecasting attack generator: a 2 s spectrogram context in, a 0.5 s
//! attack waveform out, hard-bounded by the budget through a tanh output
//! scaled by epsilon (no projection step is ever needed).
//!
//! Architecture: 8 down-sampling blocks (reflection pad, strided 2-d conv,
//! batch norm, PReLU; the last block uses a leaky ReLU), the final feature
//! map flattened into a one-channel sequence, 4 up-sampling 1-d transposed
//! convolutions with leaky ReLU, and a linear head onto the output samples —
//! 13 trainable layers in total.

use crate::audio::{AttackBudget, Waveform, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose1d, Linear, PRelu, Pad};
use crate::rng::component_rng;
use crate::schedule::{ChunkGenerator, Provenance};
use crate::stft::{SpectrogramContext, StftConfig, StftKernel, CONTEXT_BINS, CONTEXT_FRAMES};
use crate::tensor::{ops, Arr, ParamStore, Tape, Var};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

const LEAKY_SLOPE: f64 = 0.01;
const DOWN_BLOCKS: usize = 8;
const UP_BLOCKS: usize = 4;

enum StoreRef<'a> {
    Train(&'a mut ParamStore),
    Eval(&'a ParamStore),
}

/// Architecture hyperparameters. `channel_scale` divides every channel
/// count of the full-size network (scale 1): down channels 64, 128 x 6, 256
/// and up channels 64, 32, 16, 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub channel_scale: usize,
    pub output_samples: usize,
    /// Budget multiplier the predictor was trained for.
    pub multiplier: f64,
}

impl PredictorArch {
    /// The full-size architecture (used for latency measurements and
    /// full-fidelity runs).
    pub fn full() -> Self {
        PredictorArch {
            channel_scale: 1,
            output_samples: 8_000,
            multiplier: 0.008,
        }
    }

    /// Desk-scale configuration: same topology, channels divided by 4.
    pub fn desk() -> Self {
        PredictorArch {
            channel_scale: 4,
            ..Self::full()
        }
    }

    /// Tiny configuration for gradient checks (channels divided by 8 and a
    /// short output head).
    pub fn tiny() -> Self {
        PredictorArch {
            channel_scale: 8,
            output_samples: 64,
            multiplier: 0.008,
        }
    }

    pub fn down_channels(&self) -> Vec<usize> {
        let s = self.channel_scale;
        let mut c = vec![(64 / s).max(1)];
        c.extend(std::iter::repeat((128 / s).max(1)).take(6));
        c.push((256 / s).max(1));
        c
    }

    pub fn up_channels(&self) -> [usize; 4] {
        let s = self.channel_scale;
        [(64 / s).max(1), (32 / s).max(1), (16 / s).max(1), 1]
    }

    /// Sequence length entering the transposed-convolution stack: the last
    /// feature map is (C, 1, 1) and its channel axis becomes the sequence.
    pub fn flatten_len(&self) -> usize {
        *self.down_channels().last().unwrap()
    }

    /// Length produced by the up stack (before the linear head).
    pub fn pre_linear_len(&self) -> usize {
        let mut l = self.flatten_len();
        for _ in 0..UP_BLOCKS {
            l = (l - 1) * 2 + 8;
        }
        l
    }
}

/// The predictive attack network g with parameters theta.
#[derive(Clone)]
pub struct PredictorModel {
    pub arch: PredictorArch,
    pub store: ParamStore,
    pub meta: crate::asr::TrainMeta,
    down_convs: Vec<Conv2d>,
    down_bns: Vec<BatchNorm2d>,
    down_prelus: Vec<PRelu>,
    up_convs: Vec<ConvTranspose1d>,
    head: Linear,
    kernel: Rc<StftKernel>,
}

impl PredictorModel {
    pub fn new(arch: PredictorArch, seed: u64) -> Self {
        let mut rng = component_rng(seed, "predictor-init");
        let mut store = ParamStore::new();
        let down = arch.down_channels();
        let mut down_convs = Vec::with_capacity(DOWN_BLOCKS);
        let mut down_bns = Vec::with_capacity(DOWN_BLOCKS);
        let mut down_prelus = Vec::with_capacity(DOWN_BLOCKS - 1);
        let mut cin = 2usize;
        for (i, &cout) in down.iter().enumerate() {
            down_convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("down{i}.conv"),
                cin,
                cout,
                (3, 3),
                (2, 2),
                Pad::Reflect(1),
            ));
            down_bns.push(BatchNorm2d::new(&mut store, &format!("down{i}.bn"), cout));
            if i + 1 < DOWN_BLOCKS {
                down_prelus.push(PRelu::new(&mut store, &format!("down{i}.prelu"), cout));
            }
            cin = cout;
        }
        let up = arch.up_channels();
        let mut up_convs = Vec::with_capacity(UP_BLOCKS);
        let mut uin = 1usize;
        for (i, &uout) in up.iter().enumerate() {
            up_convs.push(ConvTranspose1d::new(
                &mut store,
                &mut rng,
                &format!("up{i}.convt"),
                uin,
                uout,
                8,
                2,
            ));
            uin = uout;
        }
        let head = Linear::new(
            &mut store,
            &mut rng,
            "head",
            arch.pre_linear_len(),
            arch.output_samples,
        );
        PredictorModel {
            arch,
            store,
            meta: crate::asr::TrainMeta::default(),
            down_convs,
            down_bns,
            down_prelus,
            up_convs,
            head,
            kernel: Rc::new(StftKernel::new(StftConfig::context()).expect("context stft")),
        }
    }

    pub fn from_parts(arch: PredictorArch, store: ParamStore, meta: crate::asr::TrainMeta) -> Self {
        let mut fresh = PredictorModel::new(arch, 0);
        assert_eq!(fresh.store.names, store.names, "checkpoint layout mismatch");
        fresh.store = store;
        fresh.meta = meta;
        fresh
    }

    /// 8 convolutions + 4 transposed convolutions + 1 linear head.
    pub fn trainable_layer_count(&self) -> usize {
        self.down_convs.len() + self.up_convs.len() + 1
    }

    pub fn context_kernel(&self) -> Rc<StftKernel> {
        self.kernel.clone()
    }

    /// Training-mode forward: batch-norm uses batch statistics and updates
    /// the running averages in `store`. (B, 2, 161, 204) -> (B, out).
    pub fn forward_train_graph(
        &self,
        t: &Tape,
        params: &[Var],
        store: &mut ParamStore,
        ctx: Var,
    ) -> Var {
        self.forward_impl(t, params, StoreRef::Train(store), ctx)
    }

    /// Inference-mode forward: batch-norm uses the stored running
    /// statistics; nothing is mutated.
    pub fn forward_eval_graph(&self, t: &Tape, params: &[Var], store: &ParamStore, ctx: Var) -> Var {
        self.forward_impl(t, params, StoreRef::Eval(store), ctx)
    }

    fn forward_impl(&self, t: &Tape, params: &[Var], mut store: StoreRef<'_>, ctx: Var) -> Var {
        let mut x = ctx;
        for i in 0..DOWN_BLOCKS {
            x = self.down_convs[i].forward(t, params, x);
            x = match &mut store {
                StoreRef::Train(s) => self.down_bns[i].forward_train(t, params, s, x),
                StoreRef::Eval(s) => self.down_bns[i].forward_eval(t, params, s, x),
            };
            x = if i + 1 < DOWN_BLOCKS {
                self.down_prelus[i].forward(t, params, x)
            } else {
                ops::leaky_relu(t, x, LEAKY_SLOPE)
            };
        }
        // (B, C, 1, 1): the channel axis becomes a one-channel sequence.
        let batch = t.value(x).shape()[0];
        let c_last = self.arch.flatten_len();
        let mut seq = ops::reshape(t, x, &[batch, 1, c_last]);
        for up in &self.up_convs {
            seq = up.forward(t, params, seq);
            seq = ops::leaky_relu(t, seq, LEAKY_SLOPE);
        }
        let flat = ops::reshape(t, seq, &[batch, self.arch.pre_linear_len()]);
        let out = self.head.forward(t, params, flat);
        ops::tanh_op(t, out)
    }

    /// Inference: one context to a budget-bounded perturbation. The output
    /// satisfies the bound by construction (tanh times epsilon).
    pub fn predict_attack(
        &self,
        ctx: &SpectrogramContext,
        budget: &AttackBudget,
    ) -> Result<Perturbation> {
        let dims = ctx.values.dim();
        if dims != (2, CONTEXT_BINS, CONTEXT_FRAMES) {
            return Err(Error::domain(format!(
                "context shape {:?} != (2, {CONTEXT_BINS}, {CONTEXT_FRAMES})",
                dims
            )));
        }
        let t = Tape::inference();
        let params = self.store.leaves(&t, true);
        let shaped = ctx
            .values
            .clone()
            .into_shape_with_order(IxDyn(&[1, 2, CONTEXT_BINS, CONTEXT_FRAMES]))
            .unwrap();
        let x = t.constant(shaped);
        let raw = self.forward_eval_graph(&t, &params, &self.store, x);
        let v = t.value(raw);
        let samples: Vec<f64> = v.iter().map(|&r| r * budget.epsilon).collect();
        Ok(Perturbation {
            samples: Waveform {
                samples,
                sample_rate: CANONICAL_SAMPLE_RATE,
            },
            budget: *budget,
            provenance: Provenance::Predictive,
        })
    }
}

use crate::attack::Perturbation;

/// The last `context_duration` seconds of a stream ending at `t`, as the
/// canonical fixed-shape spectrogram context.
pub fn context_window(
    stream: &Waveform,
    t_seconds: f64,
    cfg: &StftConfig,
) -> Result<SpectrogramContext> {
    let kernel = StftKernel::new(*cfg)?;
    context_window_with(&kernel, stream, t_seconds)
}

/// As [`context_window`] with a prebuilt kernel.
pub fn context_window_with(
    kernel: &StftKernel,
    stream: &Waveform,
    t_seconds: f64,
) -> Result<SpectrogramContext> {
    let context_s = 2.0;
    if t_seconds < context_s {
        return Err(Error::InsufficientContext {
            needed_s: context_s,
            have_s: t_seconds,
        });
    }
    let end = stream.sample_index(t_seconds).min(stream.len());
    let start = stream.sample_index(t_seconds - context_s).min(end);
    let segment = &stream.samples[start..end];
    Ok(SpectrogramContext {
        values: kernel.forward_samples(segment)?,
    })
}

/// Streaming chunk source backed by a trained predictor.
pub struct PredictiveGenerator<'a> {
    pub model: &'a PredictorModel,
    context_samples: usize,
}

impl<'a> PredictiveGenerator<'a> {
    pub fn new(model: &'a PredictorModel) -> Self {
        PredictiveGenerator {
            model,
            context_samples: 2 * CANONICAL_SAMPLE_RATE as usize,
        }
    }
}

impl ChunkGenerator for PredictiveGenerator<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::Predictive
    }

    fn generate(&mut self, prefix: &[f64], chunk_len: usize, epsilon: f64) -> Result<Vec<f64>> {
        let start = prefix.len().saturating_sub(self.context_samples);
        let ctx = SpectrogramContext {
            values: self.model.kernel.forward_samples(&prefix[start..])?,
        };
        let pert = self
            .model
            .predict_attack(&ctx, &AttackBudget::absolute(epsilon))?;
        let mut samples = pert.samples.samples;
        samples.truncate(chunk_len);
        samples.resize(chunk_len, 0.0);
        Ok(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::FramePadding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_context(seed: u64) -> SpectrogramContext {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        SpectrogramContext {
            values: ndarray::Array3::from_shape_fn((2, CONTEXT_BINS, CONTEXT_FRAMES), |_| {
                rng.gen_range(-1.0..1.0)
            }),
        }
    }

    #[test]
    fn thirteen_trainable_layers() {
        let model = PredictorModel::new(PredictorArch::tiny(), 1);
        assert_eq!(model.trainable_layer_count(), 13);
    }

    #[test]
    fn output_shape_and_strict_bound() {
        let model = PredictorModel::new(PredictorArch::desk(), 2);
        let ctx = random_context(3);
        let budget = AttackBudget {
            multiplier: 0.008,
            epsilon: 0.02,
        };
        let pert = model.predict_attack(&ctx, &budget).unwrap();
        assert_eq!(pert.samples.len(), 8_000);
        let peak = pert.peak();
        assert!(peak < budget.epsilon, "tanh output must stay strictly inside");
        assert!(peak > 0.0);
    }

    #[test]
    fn zero_epsilon_silences_any_theta() {
        let model = PredictorModel::new(PredictorArch::tiny(), 7);
        let ctx = random_context(4);
        let pert = model
            .predict_attack(
                &ctx,
                &AttackBudget {
                    multiplier: 0.0,
                    epsilon: 0.0,
                },
            )
            .unwrap();
        assert!(pert.samples.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let model = PredictorModel::new(PredictorArch::tiny(), 7);
        let bad = SpectrogramContext {
            values: ndarray::Array3::zeros((2, CONTEXT_BINS, 100)),
        };
        assert!(model
            .predict_attack(&bad, &AttackBudget::absolute(0.01))
            .is_err());
    }

    #[test]
    fn budget_holds_for_many_random_thetas() {
        let ctx = random_context(5);
        for seed in 0..5 {
            let model = PredictorModel::new(PredictorArch::tiny(), seed);
            let budget = AttackBudget::absolute(0.008);
            let pert = model.predict_attack(&ctx, &budget).unwrap();
            assert!(pert.within_budget());
        }
    }

    #[test]
    fn context_window_index_arithmetic() {
        let n = 64_000; // 4 s
        let samples: Vec<f64> = (0..n).map(|i| (i as f64 / 1_000.0).sin() * 0.4).collect();
        let stream = Waveform::new(samples, 16_000).unwrap();
        let cfg = StftConfig::context();

        let at2 = context_window(&stream, 2.0, &cfg).unwrap();
        let manual = StftKernel::new(cfg)
            .unwrap()
            .forward_samples(&stream.samples[0..32_000])
            .unwrap();
        assert_eq!(at2.values, manual);

        let at25 = context_window(&stream, 2.5, &cfg).unwrap();
        let manual = StftKernel::new(cfg)
            .unwrap()
            .forward_samples(&stream.samples[8_000..40_000])
            .unwrap();
        assert_eq!(at25.values, manual);

        match context_window(&stream, 1.5, &cfg) {
            Err(Error::InsufficientContext { .. }) => {}
            other => panic!("expected insufficient context, got {other:?}"),
        }
    }

    #[test]
    fn silence_stream_gives_zero_context() {
        let stream = Waveform::silence(40_000, 16_000);
        let ctx = context_window(&stream, 2.0, &StftConfig::context()).unwrap();
        assert!(ctx.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pre_linear_lengths_follow_transposed_conv_arithmetic() {
        let full = PredictorArch::full();
        assert_eq!(full.flatten_len(), 256);
        // 256 -> 518 -> 1042 -> 2090 -> 4186
        assert_eq!(full.pre_linear_len(), 4186);
        let desk = PredictorArch::desk();
        assert_eq!(desk.flatten_len(), 64);
        // 64 -> 134 -> 274 -> 554 -> 1114
        assert_eq!(desk.pre_linear_len(), 1114);
    }

    #[test]
    fn parameter_gradients_match_finite_differences_on_tiny_config() {
        let model = PredictorModel::new(PredictorArch::tiny(), 9);
        let ctx = random_context(6);
        let shaped = ctx
            .values
            .clone()
            .into_shape_with_order(IxDyn(&[1, 2, CONTEXT_BINS, CONTEXT_FRAMES]))
            .unwrap();

        let loss_with_store = |store: &ParamStore| -> f64 {
            let t = Tape::new();
            let params = store.leaves(&t, true);
            let x = t.constant(shaped.clone());
            let raw = model.forward_eval_graph(&t, &params, store, x);
            // weighted sum so every output contributes a distinct gradient
            let w = t.constant(Arr::from_shape_fn(
                IxDyn(&[1, model.arch.output_samples]),
                |ix| 0.01 * ix[1] as f64 - 0.3,
            ));
            t.scalar(ops::sum_all(&t, ops::mul(&t, raw, w)))
        };

        // analytic gradients (eval mode so batch-norm stats are constants;
        // a 1-sample batch has zero variance in train mode)
        let store_snapshot = model.store.clone();
        let t = Tape::new();
        let params = model.store.leaves(&t, false);
        let x = t.constant(shaped.clone());
        let raw = model.forward_eval_graph(&t, &params, &store_snapshot, x);
        let w = t.constant(Arr::from_shape_fn(
            IxDyn(&[1, model.arch.output_samples]),
            |ix| 0.01 * ix[1] as f64 - 0.3,
        ));
        let loss = ops::sum_all(&t, ops::mul(&t, raw, w));
        let grads = t.backward(loss);

        // Probe the largest-gradient coordinates of every tensor with
        // central differences: coordinates whose gradient is orders of
        // magnitude below the loss scale cannot be resolved numerically.
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for (pi, var) in params.iter().enumerate() {
            if !model.store.trainable[pi] {
                continue;
            }
            let Some(g) = grads.get(*var) else { continue };
            let gs = g.as_slice().unwrap();
            let mut order: Vec<usize> = (0..gs.len()).collect();
            order.sort_by(|&a, &b| gs[b].abs().partial_cmp(&gs[a].abs()).unwrap());
            for &flat_idx in order.iter().take(3) {
                let analytic = gs[flat_idx];
                if analytic.abs() < 1e-6 {
                    continue;
                }
                let orig = model.store.tensors[pi].as_slice().unwrap()[flat_idx];
                let step = 1e-4;
                let mut s = store_snapshot.clone();
                s.tensors[pi].as_slice_mut().unwrap()[flat_idx] = orig + step;
                let up = loss_with_store(&s);
                s.tensors[pi].as_slice_mut().unwrap()[flat_idx] = orig - step;
                let down = loss_with_store(&s);
                let numeric = (up - down) / (2.0 * step);
                let denom = analytic.abs().max(numeric.abs());
                worst = worst.max((analytic - numeric).abs() / denom);
                checked += 1;
            }
        }
        assert!(checked > 30, "checked too few coordinates: {checked}");
        assert!(worst < 1e-3, "worst parameter-grad relative error {worst}");
    }
}
