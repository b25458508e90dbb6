//! Differentiable operators. Every op computes its value eagerly and, when
//! any parent requires gradients, records a backward closure on the tape.

use super::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::stft::StftKernel;
use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use std::rc::Rc;

fn v1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d value")
}

fn v2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn scalar0(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add(t: &Tape, a: Var, b: Var) -> Var {
    let (va, vb) = (t.value(a), t.value(b));
    debug_assert_eq!(va.shape(), vb.shape());
    let out = &*va + &*vb;
    let (ra, rb) = (t.requires(a), t.requires(b));
    if !(ra || rb) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            if ra {
                sink.accumulate(a.0, g.clone());
            }
            if rb {
                sink.accumulate(b.0, g.clone());
            }
        })),
    )
}

pub fn sub(t: &Tape, a: Var, b: Var) -> Var {
    let (va, vb) = (t.value(a), t.value(b));
    let out = &*va - &*vb;
    let (ra, rb) = (t.requires(a), t.requires(b));
    if !(ra || rb) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            if ra {
                sink.accumulate(a.0, g.clone());
            }
            if rb {
                sink.accumulate(b.0, g.mapv(|x| -x));
            }
        })),
    )
}

pub fn mul(t: &Tape, a: Var, b: Var) -> Var {
    let (va, vb) = (t.value(a), t.value(b));
    let out = &*va * &*vb;
    let (ra, rb) = (t.requires(a), t.requires(b));
    if !(ra || rb) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            if ra {
                sink.accumulate(a.0, g * &*vb);
            }
            if rb {
                sink.accumulate(b.0, g * &*va);
            }
        })),
    )
}

pub fn neg(t: &Tape, a: Var) -> Var {
    scale(t, a, -1.0)
}

pub fn scale(t: &Tape, a: Var, c: f64) -> Var {
    let va = t.value(a);
    let out = va.mapv(|x| c * x);
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            sink.accumulate(a.0, g.mapv(|x| c * x));
        })),
    )
}

/// y = a*x + c (scalar affine).
pub fn affine(t: &Tape, x: Var, a: f64, c: f64) -> Var {
    let vx = t.value(x);
    let out = vx.mapv(|v| a * v + c);
    if !t.requires(x) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            sink.accumulate(x.0, g.mapv(|v| a * v));
        })),
    )
}

pub fn sigmoid(t: &Tape, a: Var) -> Var {
    let va = t.value(a);
    let out = Rc::new(va.mapv(|x| 1.0 / (1.0 + (-x).exp())));
    if !t.requires(a) {
        return t.constant_rc(out);
    }
    let cap = out.clone();
    t.push_node(
        out,
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = g.clone();
            dx.zip_mut_with(&cap, |d, &y| *d *= y * (1.0 - y));
            sink.accumulate(a.0, dx);
        })),
    )
}

pub fn tanh_op(t: &Tape, a: Var) -> Var {
    let va = t.value(a);
    let out = Rc::new(va.mapv(f64::tanh));
    if !t.requires(a) {
        return t.constant_rc(out);
    }
    let cap = out.clone();
    t.push_node(
        out,
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = g.clone();
            dx.zip_mut_with(&cap, |d, &y| *d *= 1.0 - y * y);
            sink.accumulate(a.0, dx);
        })),
    )
}

pub fn relu(t: &Tape, a: Var) -> Var {
    let va = t.value(a);
    let out = va.mapv(|x| x.max(0.0));
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = g.clone();
            dx.zip_mut_with(&va, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            sink.accumulate(a.0, dx);
        })),
    )
}

pub fn leaky_relu(t: &Tape, a: Var, slope: f64) -> Var {
    let va = t.value(a);
    let out = va.mapv(|x| if x > 0.0 { x } else { slope * x });
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = g.clone();
            dx.zip_mut_with(&va, |d, &x| {
                if x <= 0.0 {
                    *d *= slope;
                }
            });
            sink.accumulate(a.0, dx);
        })),
    )
}

/// ln(1 + x); inputs must stay > -1.
pub fn ln1p(t: &Tape, a: Var) -> Var {
    let va = t.value(a);
    let out = va.mapv(f64::ln_1p);
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = g.clone();
            dx.zip_mut_with(&va, |d, &x| *d /= 1.0 + x);
            sink.accumulate(a.0, dx);
        })),
    )
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all(t: &Tape, a: Var) -> Var {
    let va = t.value(a);
    let out = scalar0(va.sum());
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let gv = g[[]];
            sink.accumulate(a.0, Arr::from_elem(va.raw_dim(), gv));
        })),
    )
}

pub fn mean_all(t: &Tape, a: Var) -> Var {
    let n = t.value(a).len() as f64;
    let s = sum_all(t, a);
    scale(t, s, 1.0 / n)
}

/// Mean of scalar vars.
pub fn mean_of(t: &Tape, parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let n = parts.len() as f64;
    let total: f64 = parts.iter().map(|&p| t.scalar(p)).sum();
    let out = scalar0(total / n);
    let flags: Vec<bool> = parts.iter().map(|&p| t.requires(p)).collect();
    if !flags.iter().any(|&f| f) {
        return t.constant(out);
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let gv = g[[]] / n;
            for (&id, &f) in ids.iter().zip(&flags) {
                if f {
                    sink.accumulate(id, scalar0(gv));
                }
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

pub fn reshape(t: &Tape, a: Var, shape: &[usize]) -> Var {
    let va = t.value(a);
    let out = (*va)
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch");
    let old_shape: Vec<usize> = va.shape().to_vec();
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let back = g
                .clone()
                .into_shape_with_order(IxDyn(&old_shape))
                .expect("reshape backward");
            sink.accumulate(a.0, back);
        })),
    )
}

/// Permute axes, materializing a standard-layout copy.
pub fn permute(t: &Tape, a: Var, axes: &[usize]) -> Var {
    let va = t.value(a);
    let out = va
        .view()
        .permuted_axes(IxDyn(axes))
        .as_standard_layout()
        .to_owned();
    if !t.requires(a) {
        return t.constant(out);
    }
    let mut inverse = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let back = g
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned();
            sink.accumulate(a.0, back);
        })),
    )
}

/// Columns [lo, hi) of a 2-d value.
pub fn slice_cols(t: &Tape, a: Var, lo: usize, hi: usize) -> Var {
    let va = t.value(a);
    let a2 = v2(&va);
    let out = a2.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn();
    let (rows, cols) = a2.dim();
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = Array2::<f64>::zeros((rows, cols));
            dx.slice_mut(ndarray::s![.., lo..hi]).assign(&v2(g));
            sink.accumulate(a.0, dx.into_dyn());
        })),
    )
}

/// Rows [lo, hi) of a 2-d value.
pub fn slice_rows(t: &Tape, a: Var, lo: usize, hi: usize) -> Var {
    let va = t.value(a);
    let a2 = v2(&va);
    let out = a2.slice(ndarray::s![lo..hi, ..]).to_owned().into_dyn();
    let (rows, cols) = a2.dim();
    if !t.requires(a) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let mut dx = Array2::<f64>::zeros((rows, cols));
            dx.slice_mut(ndarray::s![lo..hi, ..]).assign(&v2(g));
            sink.accumulate(a.0, dx.into_dyn());
        })),
    )
}

/// Rows start, start+stride, ..., start+(count-1)*stride of a 2-d value.
pub fn gather_rows_strided(t: &Tape, a: Var, start: usize, stride: usize, count: usize) -> Var {
    let va = t.value(a);
    let a2 = v2(&va);
    let (rows, cols) = a2.dim();
    let mut out = Array2::<f64>::zeros((count, cols));
    for i in 0..count {
        out.row_mut(i).assign(&a2.row(start + i * stride));
    }
    if !t.requires(a) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g2 = v2(g);
            let mut dx = Array2::<f64>::zeros((rows, cols));
            for i in 0..count {
                dx.row_mut(start + i * stride).assign(&g2.row(i));
            }
            sink.accumulate(a.0, dx.into_dyn());
        })),
    )
}

/// Concatenate equally-wide 2-d blocks along the row axis.
pub fn stack_rows(t: &Tape, parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let values: Vec<Rc<Arr>> = parts.iter().map(|&p| t.value(p)).collect();
    let cols = v2(&values[0]).ncols();
    let total: usize = values.iter().map(|v| v2(v).nrows()).sum();
    let mut out = Array2::<f64>::zeros((total, cols));
    let mut row = 0;
    let mut offsets = Vec::with_capacity(values.len());
    for v in &values {
        let b = v2(v);
        out.slice_mut(ndarray::s![row..row + b.nrows(), ..]).assign(&b);
        offsets.push((row, b.nrows()));
        row += b.nrows();
    }
    let flags: Vec<bool> = parts.iter().map(|&p| t.requires(p)).collect();
    if !flags.iter().any(|&f| f) {
        return t.constant(out.into_dyn());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g2 = v2(g);
            for ((&id, &f), &(lo, n)) in ids.iter().zip(&flags).zip(&offsets) {
                if f {
                    let block = g2.slice(ndarray::s![lo..lo + n, ..]).to_owned();
                    sink.accumulate(id, block.into_dyn());
                }
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

pub fn matmul(t: &Tape, a: Var, b: Var) -> Var {
    let (va, vb) = (t.value(a), t.value(b));
    let out = v2(&va).dot(&v2(&vb));
    let (ra, rb) = (t.requires(a), t.requires(b));
    if !(ra || rb) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g2 = v2(g);
            if ra {
                sink.accumulate(a.0, g2.dot(&v2(&vb).t()).into_dyn());
            }
            if rb {
                sink.accumulate(b.0, v2(&va).t().dot(&g2).into_dyn());
            }
        })),
    )
}

/// y = x·w + bias (bias broadcast over rows).
pub fn linear(t: &Tape, x: Var, w: Var, bias: Var) -> Var {
    let (vx, vw, vb) = (t.value(x), t.value(w), t.value(bias));
    let mut out = v2(&vx).dot(&v2(&vw));
    out += &v1(&vb);
    let (rx, rw, rb) = (t.requires(x), t.requires(w), t.requires(bias));
    if !(rx || rw || rb) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g2 = v2(g);
            if rx {
                sink.accumulate(x.0, g2.dot(&v2(&vw).t()).into_dyn());
            }
            if rw {
                sink.accumulate(w.0, v2(&vx).t().dot(&g2).into_dyn());
            }
            if rb {
                sink.accumulate(bias.0, g2.sum_axis(Axis(0)).into_dyn());
            }
        })),
    )
}

/// x (R,C) + row vector (C), broadcast over rows.
pub fn add_rowvec(t: &Tape, x: Var, bias: Var) -> Var {
    let (vx, vb) = (t.value(x), t.value(bias));
    let mut out = v2(&vx).to_owned();
    out += &v1(&vb);
    let (rx, rb) = (t.requires(x), t.requires(bias));
    if !(rx || rb) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            if rx {
                sink.accumulate(x.0, g.clone());
            }
            if rb {
                sink.accumulate(bias.0, v2(g).sum_axis(Axis(0)).into_dyn());
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// padding and convolution
// ---------------------------------------------------------------------------

/// Zero padding on the last two axes of a (B, C, H, W) value.
pub fn zero_pad2d(t: &Tape, x: Var, pad: usize) -> Var {
    let vx = t.value(x);
    let x4 = vx.view().into_dimensionality::<Ix4>().expect("4-d value");
    let (b, c, h, w) = x4.dim();
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(ndarray::s![.., .., pad..pad + h, pad..pad + w])
        .assign(&x4);
    if !t.requires(x) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dx = g4
                .slice(ndarray::s![.., .., pad..pad + h, pad..pad + w])
                .to_owned();
            sink.accumulate(x.0, dx.into_dyn());
        })),
    )
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * n - 2 - j;
    }
    j as usize
}

/// Reflection padding (border excluded) on the last two axes of (B, C, H, W).
pub fn reflect_pad2d(t: &Tape, x: Var, pad: usize) -> Var {
    let vx = t.value(x);
    let x4 = vx.view().into_dimensionality::<Ix4>().expect("4-d value");
    let (b, c, h, w) = x4.dim();
    assert!(h > pad && w > pad, "reflection pad needs size > pad");
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h + 2 * pad, w + 2 * pad));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h + 2 * pad {
                let si = reflect_index(i as isize - pad as isize, h);
                for j in 0..w + 2 * pad {
                    let sj = reflect_index(j as isize - pad as isize, w);
                    out[[bi, ci, i, j]] = x4[[bi, ci, si, sj]];
                }
            }
        }
    }
    if !t.requires(x) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h + 2 * pad {
                        let si = reflect_index(i as isize - pad as isize, h);
                        for j in 0..w + 2 * pad {
                            let sj = reflect_index(j as isize - pad as isize, w);
                            dx[[bi, ci, si, sj]] += g4[[bi, ci, i, j]];
                        }
                    }
                }
            }
            sink.accumulate(x.0, dx.into_dyn());
        })),
    )
}

fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    b: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (_, c, _, w_in) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    let xb = x.index_axis(ndarray::Axis(0), b);
    let xs = xb.as_slice().expect("standard layout");
    let h_stride = w_in;
    for ci in 0..c {
        let base_c = ci * (xb.len() / c);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut col_slice = cols.row_mut(row);
                let cs = col_slice.as_slice_mut().unwrap();
                for oi in 0..oh {
                    let src_row = oi * sh + ki;
                    let src_base = base_c + src_row * h_stride + kj;
                    let dst_base = oi * ow;
                    for oj in 0..ow {
                        cs[dst_base + oj] = xs[src_base + oj * sw];
                    }
                }
            }
        }
    }
    cols
}

/// 2-d convolution, no implicit padding. x (B, Cin, H, W), w (Cout, Cin, kh, kw),
/// bias (Cout), stride (sh, sw). Combine with a padding op when needed.
pub fn conv2d(t: &Tape, x: Var, w: Var, bias: Var, stride: (usize, usize)) -> Var {
    let (vx, vw, vb) = (t.value(x), t.value(w), t.value(bias));
    let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d input");
    let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv2d weight");
    let (b, cin, h, width) = x4.dim();
    let (cout, cin_w, kh, kw) = w4.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let (sh, sw) = stride;
    let oh = (h - kh) / sh + 1;
    let ow = (width - kw) / sw + 1;
    let wmat = v2(&(*vw).clone().into_shape_with_order(IxDyn(&[cout, cin * kh * kw])).unwrap())
        .to_owned();
    let bias1 = v1(&vb).to_owned();
    let mut out = ndarray::Array4::<f64>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        let cols = im2col(&x4, bi, kh, kw, sh, sw, oh, ow);
        let mut res = wmat.dot(&cols); // (Cout, OH*OW)
        for (mut row, &bv) in res.outer_iter_mut().zip(bias1.iter()) {
            row += bv;
        }
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&res.into_shape_with_order((cout, oh, ow)).unwrap());
    }
    let (rx, rw, rb) = (t.requires(x), t.requires(w), t.requires(bias));
    if !(rx || rw || rb) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
            let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
            let mut db = Array1::<f64>::zeros(cout);
            let mut dx = ndarray::Array4::<f64>::zeros((b, cin, h, width));
            for bi in 0..b {
                let gb = g4
                    .index_axis(ndarray::Axis(0), bi)
                    .to_owned()
                    .into_shape_with_order((cout, oh * ow))
                    .unwrap();
                if rw || rx {
                    let cols = im2col(&x4, bi, kh, kw, sh, sw, oh, ow);
                    if rw {
                        dw += &gb.dot(&cols.t());
                    }
                    if rx {
                        // col2im scatter of wmat^T . gb
                        let dcols = wmat.t().dot(&gb); // (Cin*kh*kw, OH*OW)
                        let mut dxb = dx.index_axis_mut(ndarray::Axis(0), bi);
                        let dxs = dxb.as_slice_mut().unwrap();
                        let plane = h * width;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let row = (ci * kh + ki) * kw + kj;
                                    let dc = dcols.row(row);
                                    let dcs = dc.as_slice().unwrap();
                                    for oi in 0..oh {
                                        let src_row = oi * sh + ki;
                                        let dst_base = ci * plane + src_row * width + kj;
                                        let src_base = oi * ow;
                                        for oj in 0..ow {
                                            dxs[dst_base + oj * sw] += dcs[src_base + oj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if rb {
                    db += &gb.sum_axis(Axis(1));
                }
            }
            if rx {
                sink.accumulate(x.0, dx.into_dyn());
            }
            if rw {
                sink.accumulate(
                    w.0,
                    dw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn(),
                );
            }
            if rb {
                sink.accumulate(bias.0, db.into_dyn());
            }
        })),
    )
}

/// 1-d transposed convolution. x (B, Cin, L), w (Cin, Cout, k), bias (Cout),
/// output length (L-1)*stride + k.
pub fn conv_transpose1d(t: &Tape, x: Var, w: Var, bias: Var, stride: usize) -> Var {
    let (vx, vw, vb) = (t.value(x), t.value(w), t.value(bias));
    let x3 = vx.view().into_dimensionality::<Ix3>().expect("convT input");
    let w3 = vw.view().into_dimensionality::<Ix3>().expect("convT weight");
    let (b, cin, l) = x3.dim();
    let (cin_w, cout, k) = w3.dim();
    assert_eq!(cin, cin_w, "convT channel mismatch");
    let lo = (l - 1) * stride + k;
    let wmat = v2(&(*vw).clone().into_shape_with_order(IxDyn(&[cin, cout * k])).unwrap())
        .to_owned();
    let bias1 = v1(&vb).to_owned();
    let mut out = ndarray::Array3::<f64>::zeros((b, cout, lo));
    for bi in 0..b {
        let xb = x3.index_axis(ndarray::Axis(0), bi); // (Cin, L)
        let xt = xb.t().as_standard_layout().to_owned(); // (L, Cin)
        let tmp = xt.dot(&wmat); // (L, Cout*k)
        let mut ob = out.index_axis_mut(ndarray::Axis(0), bi);
        for i in 0..l {
            let ti = tmp.row(i);
            let ts = ti.as_slice().unwrap();
            for co in 0..cout {
                for kk in 0..k {
                    ob[[co, i * stride + kk]] += ts[co * k + kk];
                }
            }
        }
        for co in 0..cout {
            let mut row = ob.index_axis_mut(ndarray::Axis(0), co);
            row += bias1[co];
        }
    }
    let (rx, rw, rb) = (t.requires(x), t.requires(w), t.requires(bias));
    if !(rx || rw || rb) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
            let mut dw = Array2::<f64>::zeros((cin, cout * k));
            let mut db = Array1::<f64>::zeros(cout);
            let mut dx = ndarray::Array3::<f64>::zeros((b, cin, l));
            for bi in 0..b {
                let gb = g3.index_axis(ndarray::Axis(0), bi); // (Cout, Lo)
                // gather dtmp (L, Cout*k)
                let mut dtmp = Array2::<f64>::zeros((l, cout * k));
                for i in 0..l {
                    let mut di = dtmp.row_mut(i);
                    let ds = di.as_slice_mut().unwrap();
                    for co in 0..cout {
                        for kk in 0..k {
                            ds[co * k + kk] = gb[[co, i * stride + kk]];
                        }
                    }
                }
                if rx {
                    let dxt = dtmp.dot(&wmat.t()); // (L, Cin)
                    dx.index_axis_mut(ndarray::Axis(0), bi).assign(&dxt.t());
                }
                if rw {
                    let xb = x3.index_axis(ndarray::Axis(0), bi);
                    let xt = xb.t().as_standard_layout().to_owned(); // (L, Cin)
                    dw += &xt.t().dot(&dtmp);
                }
                if rb {
                    db += &gb.sum_axis(Axis(1));
                }
            }
            if rx {
                sink.accumulate(x.0, dx.into_dyn());
            }
            if rw {
                sink.accumulate(
                    w.0,
                    dw.into_shape_with_order((cin, cout, k)).unwrap().into_dyn(),
                );
            }
            if rb {
                sink.accumulate(bias.0, db.into_dyn());
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Batch statistics of (B, C, H, W) over (B, H, W) per channel: (mean, biased var).
pub fn batch_stats2d(x: &Arr) -> (Array1<f64>, Array1<f64>) {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("4-d value");
    let (b, c, h, w) = x4.dim();
    let n = (b * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    s += x4[[bi, ci, i, j]];
                }
            }
        }
        mean[ci] = s / n;
        let mut s2 = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let d = x4[[bi, ci, i, j]] - mean[ci];
                    s2 += d * d;
                }
            }
        }
        var[ci] = s2 / n;
    }
    (mean, var)
}

/// Batch norm over (B, C, H, W) using the given per-channel statistics.
/// In training mode pass the batch statistics (and let the caller update
/// running averages); in eval mode pass the running statistics. Gradients
/// treat the statistics as functions of x only when `train` is set.
pub fn batchnorm2d(
    t: &Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    eps: f64,
    train: bool,
) -> Var {
    let (vx, vg, vb) = (t.value(x), t.value(gamma), t.value(beta));
    let x4 = vx.view().into_dimensionality::<Ix4>().expect("4-d value");
    let (b, c, h, w) = x4.dim();
    let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let g1 = v1(&vg).to_owned();
    let b1 = v1(&vb).to_owned();
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let scale = g1[ci] * inv_std[ci];
            let shift = b1[ci] - mean[ci] * scale;
            let src = x4.index_axis(ndarray::Axis(0), bi);
            let src = src.index_axis(ndarray::Axis(0), ci);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), bi);
            let mut dst = dst.index_axis_mut(ndarray::Axis(0), ci);
            dst.zip_mut_with(&src, |d, &s| *d = s * scale + shift);
        }
    }
    let (rx, rg, rb) = (t.requires(x), t.requires(gamma), t.requires(beta));
    if !(rx || rg || rb) {
        return t.constant(out.into_dyn());
    }
    let mean = mean.clone();
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
            let n = (b * h * w) as f64;
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for ci in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let gv = g4[[bi, ci, i, j]];
                            let xhat = (x4[[bi, ci, i, j]] - mean[ci]) * inv_std[ci];
                            sum_g += gv;
                            sum_gx += gv * xhat;
                        }
                    }
                }
                dbeta[ci] = sum_g;
                dgamma[ci] = sum_gx;
                if rx {
                    let scale = g1[ci] * inv_std[ci];
                    if train {
                        let mg = sum_g / n;
                        let mgx = sum_gx / n;
                        for bi in 0..b {
                            for i in 0..h {
                                for j in 0..w {
                                    let gv = g4[[bi, ci, i, j]];
                                    let xhat = (x4[[bi, ci, i, j]] - mean[ci]) * inv_std[ci];
                                    dx[[bi, ci, i, j]] = scale * (gv - mg - xhat * mgx);
                                }
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for i in 0..h {
                                for j in 0..w {
                                    dx[[bi, ci, i, j]] = scale * g4[[bi, ci, i, j]];
                                }
                            }
                        }
                    }
                }
            }
            if rx {
                sink.accumulate(x.0, dx.into_dyn());
            }
            if rg {
                sink.accumulate(gamma.0, dgamma.into_dyn());
            }
            if rb {
                sink.accumulate(beta.0, dbeta.into_dyn());
            }
        })),
    )
}

/// PReLU with one learned slope per channel (axis 1).
pub fn prelu(t: &Tape, x: Var, alpha: Var) -> Var {
    let (vx, va) = (t.value(x), t.value(alpha));
    let shape = vx.shape().to_vec();
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let batch = shape[0];
    let a1 = v1(&va).to_owned();
    let xs = vx.as_slice().expect("standard layout");
    let mut out = vec![0.0; xs.len()];
    for bi in 0..batch {
        for ci in 0..c {
            let base = (bi * c + ci) * spatial;
            let a = a1[ci];
            for s in 0..spatial {
                let v = xs[base + s];
                out[base + s] = if v > 0.0 { v } else { a * v };
            }
        }
    }
    let out = Arr::from_shape_vec(IxDyn(&shape), out).unwrap();
    let (rx, ra) = (t.requires(x), t.requires(alpha));
    if !(rx || ra) {
        return t.constant(out);
    }
    t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let gs = g.as_slice().expect("standard layout");
            let xs = vx.as_slice().unwrap();
            let mut dx = vec![0.0; xs.len()];
            let mut da = vec![0.0; c];
            for bi in 0..batch {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    let a = a1[ci];
                    for s in 0..spatial {
                        let v = xs[base + s];
                        let gv = gs[base + s];
                        if v > 0.0 {
                            dx[base + s] = gv;
                        } else {
                            dx[base + s] = a * gv;
                            da[ci] += v * gv;
                        }
                    }
                }
            }
            if rx {
                sink.accumulate(x.0, Arr::from_shape_vec(IxDyn(&shape), dx).unwrap());
            }
            if ra {
                sink.accumulate(alpha.0, Array1::from_vec(da).into_dyn());
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// softmax and CTC
// ---------------------------------------------------------------------------

/// Row-wise log-softmax of a 2-d value.
pub fn log_softmax_rows(t: &Tape, x: Var) -> Var {
    let vx = t.value(x);
    let x2 = v2(&vx);
    let (rows, cols) = x2.dim();
    let mut out = Array2::<f64>::zeros((rows, cols));
    for (mut o, r) in out.outer_iter_mut().zip(x2.outer_iter()) {
        let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        o.zip_mut_with(&r, |d, &v| *d = v - lse);
    }
    let out = Rc::new(out.into_dyn());
    if !t.requires(x) {
        return t.constant_rc(out);
    }
    let cap = out.clone();
    t.push_node(
        out,
        true,
        Some(Box::new(move |g, sink| {
            let g2 = v2(g);
            let y2 = v2(&cap);
            let mut dx = Array2::<f64>::zeros((rows, cols));
            for i in 0..rows {
                let row_sum: f64 = g2.row(i).sum();
                for j in 0..cols {
                    dx[[i, j]] = g2[[i, j]] - y2[[i, j]].exp() * row_sum;
                }
            }
            sink.accumulate(x.0, dx.into_dyn());
        })),
    )
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

/// Minimum frame count needed to align `labels` under CTC.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|p| p[0] == p[1]).count();
    labels.len() + repeats
}

/// CTC negative log-likelihood of `labels` given per-frame log-probs (T, C).
/// Returns a scalar var; gradient flows into the log-probs.
pub fn ctc_loss(t: &Tape, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let vp = t.value(log_probs);
    let p2 = v2(&vp);
    let (t_len, classes) = p2.dim();
    if labels.is_empty() {
        return Err(Error::domain("ctc target must be non-empty"));
    }
    if labels.iter().any(|&l| l >= classes || l == blank) {
        return Err(Error::domain("ctc labels must be non-blank class indices"));
    }
    let needed = ctc_min_frames(labels);
    if t_len < needed {
        return Err(Error::AlignmentInfeasible {
            needed,
            available: t_len,
        });
    }

    // Extended label sequence with blanks: blank l1 blank l2 ... blank
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels[s / 2]
        }
    };

    let neg = f64::NEG_INFINITY;
    let mut alpha = Array2::<f64>::from_elem((t_len, s_len), neg);
    alpha[[0, 0]] = p2[[0, blank]];
    if s_len > 1 {
        alpha[[0, 1]] = p2[[0, ext(1)]];
    }
    for ti in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[ti - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[ti - 1, s - 1]]);
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                acc = log_add(acc, alpha[[ti - 1, s - 2]]);
            }
            alpha[[ti, s]] = if acc == neg { neg } else { acc + p2[[ti, ext(s)]] };
        }
    }
    let mut log_p = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[[t_len - 1, s_len - 2]]);
    }
    let loss = -log_p;
    let out = scalar0(loss);
    if !t.requires(log_probs) {
        return Ok(t.constant(out));
    }

    // beta: symmetric recursion (emission included), for gradients.
    let mut beta = Array2::<f64>::from_elem((t_len, s_len), neg);
    beta[[t_len - 1, s_len - 1]] = p2[[t_len - 1, blank]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = p2[[t_len - 1, ext(s_len - 2)]];
    }
    for ti in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[ti + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[ti + 1, s + 1]]);
            }
            if s + 2 < s_len && ext(s) != blank && ext(s) != ext(s + 2) {
                acc = log_add(acc, beta[[ti + 1, s + 2]]);
            }
            beta[[ti, s]] = if acc == neg { neg } else { acc + p2[[ti, ext(s)]] };
        }
    }

    // d(-lnP)/d(logp[t][k]) = -exp( lse_{s: ext(s)=k}(alpha+beta) - lnP - logp[t][k] )
    let mut grad = Array2::<f64>::zeros((t_len, classes));
    for ti in 0..t_len {
        let mut per_class = vec![neg; classes];
        for s in 0..s_len {
            let k = ext(s);
            let ab = if alpha[[ti, s]] == neg || beta[[ti, s]] == neg {
                neg
            } else {
                alpha[[ti, s]] + beta[[ti, s]]
            };
            per_class[k] = log_add(per_class[k], ab);
        }
        for k in 0..classes {
            if per_class[k] != neg {
                grad[[ti, k]] = -((per_class[k] - log_p - p2[[ti, k]]).exp());
            }
        }
    }
    let lp_id = log_probs.0;
    Ok(t.push_node(
        Rc::new(out),
        true,
        Some(Box::new(move |g, sink| {
            let gv = g[[]];
            sink.accumulate(lp_id, grad.mapv(|v| v * gv).into_dyn());
        })),
    ))
}

// ---------------------------------------------------------------------------
// audio-domain ops
// ---------------------------------------------------------------------------

/// y = x with p added in place at `offset` (attack chunks mixed into a
/// stream). Overhang past the end of x is discarded.
pub fn add_at(t: &Tape, x: Var, p: Var, offset: usize) -> Var {
    let (vx, vp) = (t.value(x), t.value(p));
    let xs = v1(&vx);
    let ps = v1(&vp);
    let n = xs.len();
    let usable = ps.len().min(n.saturating_sub(offset));
    let mut out = xs.to_owned();
    for i in 0..usable {
        out[offset + i] += ps[i];
    }
    let (rx, rp) = (t.requires(x), t.requires(p));
    if !(rx || rp) {
        return t.constant(out.into_dyn());
    }
    let p_len = ps.len();
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g1 = v1(g);
            if rx {
                sink.accumulate(x.0, g.clone());
            }
            if rp {
                let mut dp = Array1::<f64>::zeros(p_len);
                for i in 0..usable {
                    dp[i] = g1[offset + i];
                }
                sink.accumulate(p.0, dp.into_dyn());
            }
        })),
    )
}

/// Differentiable STFT: x (N,) -> (2, bins, frames). Backward is the exact
/// adjoint of the linear analysis map.
pub fn stft_op(t: &Tape, kernel: &Rc<StftKernel>, x: Var) -> Result<Var> {
    let vx = t.value(x);
    let xs = v1(&vx);
    let spec = kernel
        .forward_samples(xs.as_slice().expect("standard layout"))?
        .into_dyn();
    if !t.requires(x) {
        return Ok(t.constant(spec));
    }
    let kernel = kernel.clone();
    let n = xs.len();
    Ok(t.push_node(
        Rc::new(spec),
        true,
        Some(Box::new(move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap().to_owned();
            let dx = kernel.adjoint(&g3, n);
            sink.accumulate(x.0, Array1::from_vec(dx).into_dyn());
        })),
    ))
}

/// (2, F, T) -> (F, T): per-bin power re^2 + im^2.
pub fn power_spectrum(t: &Tape, x: Var) -> Var {
    let vx = t.value(x);
    let x3 = vx.view().into_dimensionality::<Ix3>().expect("3-d value");
    let (_, f, frames) = x3.dim();
    let mut out = Array2::<f64>::zeros((f, frames));
    for i in 0..f {
        for j in 0..frames {
            let re = x3[[0, i, j]];
            let im = x3[[1, i, j]];
            out[[i, j]] = re * re + im * im;
        }
    }
    if !t.requires(x) {
        return t.constant(out.into_dyn());
    }
    t.push_node(
        Rc::new(out.into_dyn()),
        true,
        Some(Box::new(move |g, sink| {
            let g2 = v2(g);
            let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((2, f, frames));
            for i in 0..f {
                for j in 0..frames {
                    let gv = g2[[i, j]];
                    dx[[0, i, j]] = 2.0 * x3[[0, i, j]] * gv;
                    dx[[1, i, j]] = 2.0 * x3[[1, i, j]] * gv;
                }
            }
            sink.accumulate(x.0, dx.into_dyn());
        })),
    )
}
