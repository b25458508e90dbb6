//! Slow, independent reference implementations used only by the test
//! suites. Each function is written from the definition it checks, without
//! touching the production code path, so the two sides can disagree.

use ndarray::Array3;

/// Direct-DFT STFT: per frame, windowed sum over e^{-2pi i k n / nfft}.
/// Natural framing, one-sided bins, channels (re, im).
pub fn direct_stft(samples: &[f64], window_length: usize, hop: usize, nfft: usize) -> Array3<f64> {
    let bins = nfft / 2 + 1;
    let frames = if samples.len() < window_length {
        0
    } else {
        1 + (samples.len() - window_length) / hop
    };
    let window: Vec<f64> = (0..window_length)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / window_length as f64).cos())
        .collect();
    let mut out = Array3::zeros((2, bins, frames));
    for f in 0..frames {
        let start = f * hop;
        for k in 0..bins {
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..window_length {
                let x = samples[start + n] * window[n];
                let phase = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / nfft as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            out[[0, k, f]] = re;
            out[[1, k, f]] = im;
        }
    }
    out
}

/// Exhaustive minimum edit distance over token sequences: explores every
/// alignment recursively. Exponential; only for short sequences.
pub fn edit_distance_exhaustive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        match (a.is_empty(), b.is_empty()) {
            (true, _) => b.len(),
            (_, true) => a.len(),
            _ => {
                let sub_cost = usize::from(a[0] != b[0]);
                let sub = go(&a[1..], &b[1..]) + sub_cost;
                let del = go(&a[1..], b) + 1;
                let ins = go(a, &b[1..]) + 1;
                sub.min(del).min(ins)
            }
        }
    }
    go(a, b)
}

/// CTC collapse: remove consecutive duplicates, then remove blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = usize::MAX;
    for &p in path {
        if p != last && p != blank {
            out.push(p);
        }
        last = p;
    }
    out
}

/// Brute-force CTC probability: sum of prod_t y_t(pi_t) over every frame
/// labelling pi in {0..classes}^T whose collapse equals `target`.
/// `log_probs` has shape [T][classes]. Returns -ln(P).
pub fn ctc_loss_exhaustive(log_probs: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let t_len = log_probs.len();
    let classes = if t_len == 0 { 0 } else { log_probs[0].len() };
    let mut total = f64::NEG_INFINITY; // log-sum accumulator
    let mut path = vec![0usize; t_len];
    loop {
        if ctc_collapse(&path, blank) == target {
            let logp: f64 = path.iter().enumerate().map(|(t, &c)| log_probs[t][c]).sum();
            total = log_add(total, logp);
        }
        // increment the mixed-radix counter
        let mut i = 0;
        loop {
            if i == t_len {
                return -total;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// One sign-gradient ascent step clipped to the budget, written directly
/// from the update rule (independent of the iterative attack code).
pub fn fgsm_step(grad: &[f64], step: f64, epsilon: f64) -> Vec<f64> {
    grad.iter()
        .map(|&g| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (step * s).clamp(-epsilon, epsilon)
        })
        .collect()
}

/// Closed-form chunk timeline: chunk k starts at (context + delay + k*r) and
/// ends min(start + r, duration), for every k with context + k*r + delay <
/// duration. Returns (start, end) pairs in seconds.
pub fn timeline_chunks(duration: f64, context: f64, delay: f64, r: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t_k = context + k as f64 * r;
        if t_k + delay >= duration {
            break;
        }
        let start = t_k + delay;
        let end = (start + r).min(duration);
        if end > start {
            out.push((start, end));
        }
        k += 1;
    }
    out
}

/// Central finite differences of a scalar function at `x`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Max relative error between an analytic gradient and a reference,
/// normalized by the larger magnitude (with an absolute floor to ignore
/// numerically dead entries).
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let denom = a.abs().max(r.abs());
            if denom < floor {
                0.0
            } else {
                (a - r).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
