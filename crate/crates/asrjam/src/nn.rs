//! Neural-network layers built on the tape: each layer registers its
//! parameters in a [`ParamStore`] at construction and replays its forward
//! pass against a slice of tape vars (one per store entry, in order).
//!
//! Two parameter bindings are used throughout the crate:
//! * trainable — `store.leaves(tape, false)`, gradients accumulate;
//! * frozen — `store.leaves(tape, true)`, parameters enter as constants so
//!   backward skips their (expensive) weight gradients entirely.

use crate::tensor::ops;
use crate::tensor::{Arr, ParamStore, Tape, Var};
use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

fn uniform_init(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// 2-d convolution with stride and optional padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    None,
    Zero(usize),
    Reflect(usize),
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: (usize, usize),
    pub pad: Pad,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: Pad,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel.0 * kernel.1) as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[cout, cin, kernel.0, kernel.1], bound),
        );
        let b = store.add(format!("{name}.bias"), uniform_init(rng, &[cout], bound));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &Tape, params: &[Var], x: Var) -> Var {
        let x = match self.pad {
            Pad::None => x,
            Pad::Zero(p) => ops::zero_pad2d(t, x, p),
            Pad::Reflect(p) => ops::reflect_pad2d(t, x, p),
        };
        ops::conv2d(t, x, params[self.w], params[self.b], self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[cin, cout, kernel], bound),
        );
        let b = store.add(format!("{name}.bias"), uniform_init(rng, &[cout], bound));
        ConvTranspose1d { w, b, stride }
    }

    pub fn forward(&self, t: &Tape, params: &[Var], x: Var) -> Var {
        ops::conv_transpose1d(t, x, params[self.w], params[self.b], self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[fan_in, fan_out], bound),
        );
        let b = store.add(format!("{name}.bias"), uniform_init(rng, &[fan_out], bound));
        Linear { w, b }
    }

    pub fn forward(&self, t: &Tape, params: &[Var], x: Var) -> Var {
        ops::linear(t, x, params[self.w], params[self.b])
    }
}

/// Per-channel learned leaky slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub alpha: usize,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let alpha = store.add(
            format!("{name}.alpha"),
            Arr::from_elem(IxDyn(&[channels]), 0.25),
        );
        PRelu { alpha }
    }

    pub fn forward(&self, t: &Tape, params: &[Var], x: Var) -> Var {
        ops::prelu(t, x, params[self.alpha])
    }
}

/// Batch norm over (B, C, H, W). Running statistics live in the store as
/// non-trainable state; training mode updates them in place.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Arr::ones(IxDyn(&[channels])));
        let beta = store.add(format!("{name}.beta"), Arr::zeros(IxDyn(&[channels])));
        let running_mean =
            store.add_state(format!("{name}.running_mean"), Arr::zeros(IxDyn(&[channels])));
        let running_var =
            store.add_state(format!("{name}.running_var"), Arr::ones(IxDyn(&[channels])));
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training mode: normalize by batch statistics and fold them into the
    /// running averages stored in `store`.
    pub fn forward_train(&self, t: &Tape, params: &[Var], store: &mut ParamStore, x: Var) -> Var {
        let (mean, var) = ops::batch_stats2d(&t.value(x));
        let out = ops::batchnorm2d(
            t,
            x,
            params[self.gamma],
            params[self.beta],
            &mean,
            &var,
            self.eps,
            true,
        );
        let m = self.momentum;
        store.tensors[self.running_mean]
            .iter_mut()
            .zip(mean.iter())
            .for_each(|(r, &b)| *r = (1.0 - m) * *r + m * b);
        store.tensors[self.running_var]
            .iter_mut()
            .zip(var.iter())
            .for_each(|(r, &b)| *r = (1.0 - m) * *r + m * b);
        out
    }

    /// Inference mode: normalize by the stored running statistics.
    pub fn forward_eval(&self, t: &Tape, params: &[Var], store: &ParamStore, x: Var) -> Var {
        let mean = flat1(&store.tensors[self.running_mean]);
        let var = flat1(&store.tensors[self.running_var]);
        ops::batchnorm2d(
            t,
            x,
            params[self.gamma],
            params[self.beta],
            &mean,
            &var,
            self.eps,
            false,
        )
    }
}

fn flat1(a: &Arr) -> Array1<f64> {
    Array1::from_iter(a.iter().cloned())
}

/// Single-layer GRU over a t-major packed sequence.
///
/// Input is (T*B, I) with frame t occupying rows [t*B, (t+1)*B); output has
/// the same packing with width H. Gate math follows the usual convention:
/// r and z from sigmoid, candidate n = tanh(Wx + r*(Uh + bh)).
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(
            format!("{name}.w_ih"),
            uniform_init(rng, &[input, 3 * hidden], bound),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            uniform_init(rng, &[hidden, 3 * hidden], bound),
        );
        let b_ih = store.add(format!("{name}.b_ih"), uniform_init(rng, &[3 * hidden], bound));
        let b_hh = store.add(format!("{name}.b_hh"), uniform_init(rng, &[3 * hidden], bound));
        Gru {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            hidden,
        }
    }

    pub fn forward(&self, t: &Tape, params: &[Var], xs: Var, t_len: usize, batch: usize) -> Var {
        let h = self.hidden;
        // One big input projection for all frames at once.
        let xw = ops::linear(t, xs, params[self.w_ih], params[self.b_ih]); // (T*B, 3H)
        let mut hidden_state = t.constant(Arr::zeros(IxDyn(&[batch, h])));
        let mut outputs = Vec::with_capacity(t_len);
        for step in 0..t_len {
            let xt = ops::slice_rows(t, xw, step * batch, (step + 1) * batch); // (B, 3H)
            let hu = ops::linear(t, hidden_state, params[self.w_hh], params[self.b_hh]); // (B, 3H)
            let xr = ops::slice_cols(t, xt, 0, h);
            let xz = ops::slice_cols(t, xt, h, 2 * h);
            let xn = ops::slice_cols(t, xt, 2 * h, 3 * h);
            let hr = ops::slice_cols(t, hu, 0, h);
            let hz = ops::slice_cols(t, hu, h, 2 * h);
            let hn = ops::slice_cols(t, hu, 2 * h, 3 * h);
            let r = ops::sigmoid(t, ops::add(t, xr, hr));
            let z = ops::sigmoid(t, ops::add(t, xz, hz));
            let rh = ops::mul(t, r, hn);
            let n = ops::tanh_op(t, ops::add(t, xn, rh));
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = ops::sub(t, hidden_state, n);
            let zdiff = ops::mul(t, z, diff);
            hidden_state = ops::add(t, n, zdiff);
            outputs.push(hidden_state);
        }
        ops::stack_rows(t, &outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;

    #[test]
    fn gru_shapes_and_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, &mut rng, "gru", 3, 4);
        let t_len = 3;
        let batch = 2;
        let x0 = Arr::from_shape_fn(IxDyn(&[t_len * batch, 3]), |_| rng.gen_range(-1.0..1.0));

        // forward shape
        let t = Tape::inference();
        let params = store.leaves(&t, true);
        let xs = t.constant(x0.clone());
        let out = gru.forward(&t, &params, xs, t_len, batch);
        assert_eq!(t.value(out).shape(), &[t_len * batch, 4]);

        // input gradient against finite differences
        let store2 = store.clone();
        let gru2 = gru.clone();
        let analytic = {
            let t = Tape::new();
            let params = store2.leaves(&t, true);
            let xs = t.leaf(x0.clone());
            let out = gru2.forward(&t, &params, xs, t_len, batch);
            let loss = ops::sum_all(&t, ops::mul(&t, out, out));
            let grads = t.backward(loss);
            grads.get(xs).unwrap().iter().cloned().collect::<Vec<f64>>()
        };
        let flat: Vec<f64> = x0.iter().cloned().collect();
        let f = |v: &[f64]| {
            let arr = Arr::from_shape_vec(x0.raw_dim(), v.to_vec()).unwrap();
            let t = Tape::new();
            let params = store2.leaves(&t, true);
            let xs = t.leaf(arr);
            let out = gru2.forward(&t, &params, xs, t_len, batch);
            let loss = ops::sum_all(&t, ops::mul(&t, out, out));
            t.scalar(loss)
        };
        let numeric = oracle::finite_difference(f, &flat, 1e-5);
        let err = oracle::max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "gru input gradcheck: {err}");
    }

    #[test]
    fn gru_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, &mut rng, "gru", 2, 3);
        let t_len = 3;
        let batch = 1;
        let x0 = Arr::from_shape_fn(IxDyn(&[t_len * batch, 2]), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |store: &ParamStore| -> f64 {
            let t = Tape::new();
            let params = store.leaves(&t, true);
            let xs = t.constant(x0.clone());
            let out = gru.forward(&t, &params, xs, t_len, batch);
            let loss = ops::sum_all(&t, ops::mul(&t, out, out));
            t.scalar(loss)
        };

        // analytic
        let t = Tape::new();
        let params = store.leaves(&t, false);
        let xs = t.constant(x0.clone());
        let out = gru.forward(&t, &params, xs, t_len, batch);
        let loss = ops::sum_all(&t, ops::mul(&t, out, out));
        let grads = t.backward(loss);

        for (pi, var) in params.iter().enumerate() {
            let analytic: Vec<f64> = grads.get(*var).unwrap().iter().cloned().collect();
            let base = store.tensors[pi].clone();
            let flat: Vec<f64> = base.iter().cloned().collect();
            let f = |v: &[f64]| {
                let mut s = store.clone();
                s.tensors[pi] = Arr::from_shape_vec(base.raw_dim(), v.to_vec()).unwrap();
                loss_of(&s)
            };
            let numeric = oracle::finite_difference(f, &flat, 1e-5);
            let err = oracle::max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-5, "param {pi} gradcheck: {err}");
        }
    }
}
