//! Compute kernels behind the tensor ops.
//!
//! Each kernel has a sequential implementation (`*_seq`) and, with the
//! `parallel` feature, a rayon implementation (`*_par`) that splits work
//! over independent output rows or channels. Every output element is
//! produced by the same inner loop in both paths, so the two are
//! bit-identical; the public entry points dispatch on the feature flag.
//! The criterion bench suite compares both directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

/// Geometry of a 2D convolution over a `[C, T, F]` map.
///
/// `stride` and padding are ordered (time, freq). Padding is explicit and
/// per-edge; causal time padding pads only the past edge. For transposed
/// convolution the same fields act as output trims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad_t: (usize, usize),
    pub pad_f: (usize, usize),
}

impl ConvSpec {
    pub fn out_dim(in_dim: usize, pad: (usize, usize), k: usize, stride: usize) -> Option<usize> {
        let padded = in_dim + pad.0 + pad.1;
        if padded < k {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

fn matmul_row<S: Scalar>(a_row: &[S], b: &[S], n: usize, out_row: &mut [S]) {
    for v in out_row.iter_mut() {
        *v = S::zero();
    }
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o = *o + av * bv;
        }
    }
}

pub fn matmul_seq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        matmul_row(&a.data()[i * k..(i + 1) * k], b.data(), n, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(feature = "parallel")]
pub fn matmul_par<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![S::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(&a.data()[i * k..(i + 1) * k], b.data(), n, out_row);
    });
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] . b[k,n] -> [m,n]`
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            "[m,k] x [k,n]".to_string(),
            format!("{} x {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
        ));
    }
    #[cfg(feature = "parallel")]
    {
        // Tiny products are cheaper on one thread.
        if a.shape()[0] > 1 && a.len() * b.shape()[1] > 16_384 {
            return Ok(matmul_par(a, b));
        }
    }
    Ok(matmul_seq(a, b))
}

// ---------------------------------------------------------------------------
// conv2d over [C, T, F]
// ---------------------------------------------------------------------------

struct ConvDims {
    c_in: usize,
    t_in: usize,
    f_in: usize,
    c_out: usize,
    k_t: usize,
    k_f: usize,
    t_out: usize,
    f_out: usize,
}

fn conv_dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &ConvSpec) -> Result<ConvDims> {
    if x.ndim() != 3 || w.ndim() != 4 || x.shape()[0] != w.shape()[1] {
        return Err(Error::shape(
            "conv2d",
            "x [C_in,T,F], w [C_out,C_in,k_t,k_f]".to_string(),
            format!("x {}, w {}", fmt_shape(x.shape()), fmt_shape(w.shape())),
        ));
    }
    let (k_t, k_f) = (w.shape()[2], w.shape()[3]);
    let t_out = ConvSpec::out_dim(x.shape()[1], spec.pad_t, k_t, spec.stride.0);
    let f_out = ConvSpec::out_dim(x.shape()[2], spec.pad_f, k_f, spec.stride.1);
    match (t_out, f_out) {
        (Some(t_out), Some(f_out)) => Ok(ConvDims {
            c_in: x.shape()[0],
            t_in: x.shape()[1],
            f_in: x.shape()[2],
            c_out: w.shape()[0],
            k_t,
            k_f,
            t_out,
            f_out,
        }),
        _ => Err(Error::shape(
            "conv2d",
            "kernel no larger than padded input".to_string(),
            format!(
                "input {} pad t{:?} f{:?}, kernel ({},{})",
                fmt_shape(x.shape()),
                spec.pad_t,
                spec.pad_f,
                k_t,
                k_f
            ),
        )),
    }
}

/// One output channel of the cross-correlation; accumulation order over
/// (c_in, k_t, k_f) is fixed so parallel and sequential runs agree bitwise.
fn conv_channel<S: Scalar>(
    x: &[S],
    w_c: &[S],
    d: &ConvDims,
    spec: &ConvSpec,
    out_c: &mut [S],
) {
    let (st, sf) = spec.stride;
    for to in 0..d.t_out {
        let row_out = &mut out_c[to * d.f_out..(to + 1) * d.f_out];
        for v in row_out.iter_mut() {
            *v = S::zero();
        }
        for ci in 0..d.c_in {
            for i in 0..d.k_t {
                let t = (to * st + i) as isize - spec.pad_t.0 as isize;
                if t < 0 || t as usize >= d.t_in {
                    continue;
                }
                let x_row = &x[(ci * d.t_in + t as usize) * d.f_in..][..d.f_in];
                let w_row = &w_c[(ci * d.k_t + i) * d.k_f..][..d.k_f];
                for (j, &wv) in w_row.iter().enumerate() {
                    for fo in 0..d.f_out {
                        let f = (fo * sf + j) as isize - spec.pad_f.0 as isize;
                        if f >= 0 && (f as usize) < d.f_in {
                            row_out[fo] = row_out[fo] + x_row[f as usize] * wv;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_seq<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let d = conv_dims(x, w, spec)?;
    let mut out = vec![S::zero(); d.c_out * d.t_out * d.f_out];
    let per_c = d.t_out * d.f_out;
    let w_per_c = d.c_in * d.k_t * d.k_f;
    for co in 0..d.c_out {
        conv_channel(
            x.data(),
            &w.data()[co * w_per_c..(co + 1) * w_per_c],
            &d,
            spec,
            &mut out[co * per_c..(co + 1) * per_c],
        );
    }
    Ok(Tensor::new(vec![d.c_out, d.t_out, d.f_out], out))
}

#[cfg(feature = "parallel")]
pub fn conv2d_par<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let d = conv_dims(x, w, spec)?;
    let mut out = vec![S::zero(); d.c_out * d.t_out * d.f_out];
    let per_c = d.t_out * d.f_out;
    let w_per_c = d.c_in * d.k_t * d.k_f;
    out.par_chunks_mut(per_c).enumerate().for_each(|(co, out_c)| {
        conv_channel(
            x.data(),
            &w.data()[co * w_per_c..(co + 1) * w_per_c],
            &d,
            spec,
            out_c,
        );
    });
    Ok(Tensor::new(vec![d.c_out, d.t_out, d.f_out], out))
}

/// Cross-correlation of `x [C_in,T,F]` with `w [C_out,C_in,k_t,k_f]`.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    #[cfg(feature = "parallel")]
    {
        if w.shape()[0] > 1 && x.len() * w.shape()[0] > 8_192 {
            return conv2d_par(x, w, spec);
        }
    }
    conv2d_seq(x, w, spec)
}

/// Weight gradient of conv2d: `dW[co,ci,i,j] = sum_{to,fo} g[co,to,fo] * x[ci, to*st-pt0+i, fo*sf-pf0+j]`.
pub fn conv2d_grad_weight<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    spec: &ConvSpec,
    k_t: usize,
    k_f: usize,
) -> Tensor<S> {
    let (c_in, t_in, f_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, t_out, f_out) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (st, sf) = spec.stride;
    let w_per_c = c_in * k_t * k_f;
    let compute_co = |co: usize, dw_c: &mut [S]| {
        let g_c = &g.data()[co * t_out * f_out..][..t_out * f_out];
        for ci in 0..c_in {
            for i in 0..k_t {
                for j in 0..k_f {
                    let mut acc = S::zero();
                    for to in 0..t_out {
                        let t = (to * st + i) as isize - spec.pad_t.0 as isize;
                        if t < 0 || t as usize >= t_in {
                            continue;
                        }
                        let x_row = &x.data()[(ci * t_in + t as usize) * f_in..][..f_in];
                        let g_row = &g_c[to * f_out..][..f_out];
                        for (fo, &gv) in g_row.iter().enumerate() {
                            let f = (fo * sf + j) as isize - spec.pad_f.0 as isize;
                            if f >= 0 && (f as usize) < f_in {
                                acc = acc + gv * x_row[f as usize];
                            }
                        }
                    }
                    dw_c[(ci * k_t + i) * k_f + j] = acc;
                }
            }
        }
    };
    let mut dw = vec![S::zero(); c_out * w_per_c];
    #[cfg(feature = "parallel")]
    {
        if c_out > 1 {
            dw.par_chunks_mut(w_per_c)
                .enumerate()
                .for_each(|(co, dw_c)| compute_co(co, dw_c));
            return Tensor::new(vec![c_out, c_in, k_t, k_f], dw);
        }
    }
    for co in 0..c_out {
        compute_co(co, &mut dw[co * w_per_c..(co + 1) * w_per_c]);
    }
    Tensor::new(vec![c_out, c_in, k_t, k_f], dw)
}

// ---------------------------------------------------------------------------
// transposed conv2d (adjoint of conv2d)
// ---------------------------------------------------------------------------

/// Output size sanity: the conv of the produced map must reproduce `y`'s dims.
fn tconv_check(
    y_dim: usize,
    out_dim: usize,
    pad: (usize, usize),
    k: usize,
    stride: usize,
) -> bool {
    ConvSpec::out_dim(out_dim, pad, k, stride) == Some(y_dim)
}

fn tconv_channel<S: Scalar>(
    y: &[S],
    w: &[S],
    c_out_conv: usize,
    k_t: usize,
    k_f: usize,
    t_y: usize,
    f_y: usize,
    out_t: usize,
    out_f: usize,
    spec: &ConvSpec,
    ci: usize,
    c_in_conv: usize,
    out_c: &mut [S],
) {
    let (st, sf) = spec.stride;
    for v in out_c.iter_mut() {
        *v = S::zero();
    }
    for co in 0..c_out_conv {
        let y_c = &y[co * t_y * f_y..][..t_y * f_y];
        let w_c = &w[(co * c_in_conv + ci) * k_t * k_f..][..k_t * k_f];
        for t in 0..out_t {
            let row_out = &mut out_c[t * out_f..(t + 1) * out_f];
            for i in 0..k_t {
                let u = t + spec.pad_t.0;
                if u < i || (u - i) % st != 0 {
                    continue;
                }
                let to = (u - i) / st;
                if to >= t_y {
                    continue;
                }
                let y_row = &y_c[to * f_y..][..f_y];
                let w_row = &w_c[i * k_f..][..k_f];
                for (j, &wv) in w_row.iter().enumerate() {
                    for (f, o) in row_out.iter_mut().enumerate() {
                        let v = f + spec.pad_f.0;
                        if v >= j && (v - j) % sf == 0 {
                            let fo = (v - j) / sf;
                            if fo < f_y {
                                *o = *o + y_row[fo] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution: the exact adjoint of [`conv2d`] with the same
/// `w [C_out,C_in,k_t,k_f]` and spec, mapping `[C_out,T',F'] -> [C_in,out_t,out_f]`.
/// The spec's padding fields act as output trims; `out_t`/`out_f` pick the
/// target size (for a strided axis several sizes are consistent).
pub fn tconv2d<S: Scalar>(
    y: &Tensor<S>,
    w: &Tensor<S>,
    spec: &ConvSpec,
    out_t: usize,
    out_f: usize,
) -> Result<Tensor<S>> {
    if y.ndim() != 3 || w.ndim() != 4 || y.shape()[0] != w.shape()[0] {
        return Err(Error::shape(
            "transposed_conv2d",
            "y [C_out,T',F'], w [C_out,C_in,k_t,k_f]".to_string(),
            format!("y {}, w {}", fmt_shape(y.shape()), fmt_shape(w.shape())),
        ));
    }
    let (k_t, k_f) = (w.shape()[2], w.shape()[3]);
    if !tconv_check(y.shape()[1], out_t, spec.pad_t, k_t, spec.stride.0)
        || !tconv_check(y.shape()[2], out_f, spec.pad_f, k_f, spec.stride.1)
    {
        return Err(Error::shape(
            "transposed_conv2d",
            "output dims consistent with stride/trim/kernel".to_string(),
            format!("y {} -> ({},{})", fmt_shape(y.shape()), out_t, out_f),
        ));
    }
    let (c_out_conv, c_in_conv) = (w.shape()[0], w.shape()[1]);
    let (t_y, f_y) = (y.shape()[1], y.shape()[2]);
    let per_c = out_t * out_f;
    let mut out = vec![S::zero(); c_in_conv * per_c];
    let run = |ci: usize, out_c: &mut [S]| {
        tconv_channel(
            y.data(),
            w.data(),
            c_out_conv,
            k_t,
            k_f,
            t_y,
            f_y,
            out_t,
            out_f,
            spec,
            ci,
            c_in_conv,
            out_c,
        )
    };
    #[cfg(feature = "parallel")]
    {
        if c_in_conv > 1 && y.len() * c_in_conv > 8_192 {
            out.par_chunks_mut(per_c)
                .enumerate()
                .for_each(|(ci, out_c)| run(ci, out_c));
            return Ok(Tensor::new(vec![c_in_conv, out_t, out_f], out));
        }
    }
    for ci in 0..c_in_conv {
        run(ci, &mut out[ci * per_c..(ci + 1) * per_c]);
    }
    Ok(Tensor::new(vec![c_in_conv, out_t, out_f], out))
}

/// Weight gradient of tconv2d: `dW[co,ci,i,j] = sum over valid positions of
/// y[co,to,fo] * g[ci, to*st+i-pt0, fo*sf+j-pf0]`.
pub fn tconv2d_grad_weight<S: Scalar>(
    y: &Tensor<S>,
    g: &Tensor<S>,
    spec: &ConvSpec,
    k_t: usize,
    k_f: usize,
) -> Tensor<S> {
    let (c_out_conv, t_y, f_y) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (c_in_conv, out_t, out_f) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (st, sf) = spec.stride;
    let w_per_c = c_in_conv * k_t * k_f;
    let compute_co = |co: usize, dw_c: &mut [S]| {
        let y_c = &y.data()[co * t_y * f_y..][..t_y * f_y];
        for ci in 0..c_in_conv {
            let g_c = &g.data()[ci * out_t * out_f..][..out_t * out_f];
            for i in 0..k_t {
                for j in 0..k_f {
                    let mut acc = S::zero();
                    for to in 0..t_y {
                        let t = (to * st + i) as isize - spec.pad_t.0 as isize;
                        if t < 0 || t as usize >= out_t {
                            continue;
                        }
                        let g_row = &g_c[t as usize * out_f..][..out_f];
                        let y_row = &y_c[to * f_y..][..f_y];
                        for (fo, &yv) in y_row.iter().enumerate() {
                            let f = (fo * sf + j) as isize - spec.pad_f.0 as isize;
                            if f >= 0 && (f as usize) < out_f {
                                acc = acc + yv * g_row[f as usize];
                            }
                        }
                    }
                    dw_c[(ci * k_t + i) * k_f + j] = acc;
                }
            }
        }
    };
    let mut dw = vec![S::zero(); c_out_conv * w_per_c];
    for co in 0..c_out_conv {
        compute_co(co, &mut dw[co * w_per_c..(co + 1) * w_per_c]);
    }
    Tensor::new(vec![c_out_conv, c_in_conv, k_t, k_f], dw)
}

// ---------------------------------------------------------------------------
// broadcast binary ops
// ---------------------------------------------------------------------------

/// Trailing-dimension broadcast of `b` into `a`'s shape: shapes are aligned
/// at the right; each aligned dim of `b` must equal `a`'s or be 1, and `b`
/// may have fewer dims (implicit leading 1s). Output has `a`'s shape.
pub fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let off = a.len() - b.len();
    b.iter().enumerate().all(|(i, &bd)| bd == a[off + i] || bd == 1)
}

/// Index map from a's linear index to b's linear index under the rule above.
pub fn broadcast_index(a_shape: &[usize], b_shape: &[usize], a_idx: usize) -> usize {
    let off = a_shape.len() - b_shape.len();
    let mut rem = a_idx;
    let mut b_idx = 0usize;
    let mut b_stride = 1usize;
    // Walk dims right to left.
    let mut b_strides = vec![0usize; b_shape.len()];
    for i in (0..b_shape.len()).rev() {
        b_strides[i] = b_stride;
        b_stride *= b_shape[i];
    }
    for i in (0..a_shape.len()).rev() {
        let coord = rem % a_shape[i];
        rem /= a_shape[i];
        if i >= off {
            let bi = i - off;
            if b_shape[bi] != 1 {
                b_idx += coord * b_strides[bi];
            }
        }
    }
    b_idx
}

pub fn broadcast_zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if !broadcast_compatible(a.shape(), b.shape()) {
        return Err(Error::shape(
            "broadcast",
            format!("trailing-broadcastable into {}", fmt_shape(a.shape())),
            fmt_shape(b.shape()),
        ));
    }
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::new(a.shape().to_vec(), data));
    }
    let data = (0..a.len())
        .map(|i| f(a.data()[i], b.data()[broadcast_index(a.shape(), b.shape(), i)]))
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data))
}

/// Reduce a full-shaped gradient back onto the broadcast operand's shape by
/// summing over the broadcast axes.
pub fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, b_shape: &[usize]) -> Tensor<S> {
    if g.shape() == b_shape {
        return g.clone();
    }
    let mut out = vec![S::zero(); b_shape.iter().product()];
    for i in 0..g.len() {
        out[broadcast_index(g.shape(), b_shape, i)] =
            out[broadcast_index(g.shape(), b_shape, i)] + g.data()[i];
    }
    Tensor::new(b_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// axis utilities (sequential; all cheap next to the kernels above)
// ---------------------------------------------------------------------------

/// View a shape as `[outer, axis_len, inner]` around one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn transpose2d<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn slice_axis<S: Scalar>(t: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let (outer, ax, inner) = axis_split(t.shape(), axis);
    assert!(start + len <= ax, "slice [{start}, {}) out of axis {ax}", start + len);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ax + start) * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Embed `g` into a zero tensor whose `axis` has length `full`, at `start`.
/// Adjoint of [`slice_axis`].
pub fn scatter_axis<S: Scalar>(g: &Tensor<S>, axis: usize, start: usize, full: usize) -> Tensor<S> {
    let (outer, len, inner) = axis_split(g.shape(), axis);
    let mut shape = g.shape().to_vec();
    shape[axis] = full;
    let mut out = vec![S::zero(); outer * full * inner];
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(shape, out)
}

pub fn concat_axis<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| {
        Error::shape("concat", "at least one input".to_string(), "none".to_string())
    })?;
    let mut shape = first.shape().to_vec();
    for p in &parts[1..] {
        if p.ndim() != shape.len()
            || p.shape().iter().enumerate().any(|(i, &d)| i != axis && d != shape[i])
        {
            return Err(Error::shape(
                "concat",
                format!("same shape as {} off axis {axis}", fmt_shape(&shape)),
                fmt_shape(p.shape()),
            ));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, total, inner) = axis_split(&shape, axis);
    let mut out = vec![S::zero(); outer * total * inner];
    let mut offset = 0usize;
    for p in parts {
        let len = p.shape()[axis];
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * total + offset) * inner;
            out[dst..dst + len * inner].copy_from_slice(&p.data()[src..src + len * inner]);
        }
        offset += len;
    }
    Ok(Tensor::new(shape, out))
}

pub fn permute<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    assert_eq!(perm.len(), t.ndim());
    let in_strides = crate::tensor::strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let mut out = vec![S::zero(); t.len()];
    let out_strides = crate::tensor::strides(&out_shape);
    for (lin, v) in t.data().iter().enumerate() {
        let mut dst = 0usize;
        for (o, &p) in perm.iter().enumerate() {
            let coord = (lin / in_strides[p]) % t.shape()[p];
            dst += coord * out_strides[o];
        }
        out[dst] = *v;
    }
    Tensor::new(out_shape, out)
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Sum over one axis. With `keepdim` the axis stays as length 1, which the
/// trailing-broadcast binary ops can then expand back.
pub fn sum_axis<S: Scalar>(t: &Tensor<S>, axis: usize, keepdim: bool) -> Tensor<S> {
    let (outer, ax, inner) = axis_split(t.shape(), axis);
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..ax {
            let base = (o * ax + a) * inner;
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + t.data()[base + i];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`sum_axis`]: repeat `g` along the axis.
pub fn repeat_axis<S: Scalar>(g: &Tensor<S>, axis: usize, len: usize, kept: bool) -> Tensor<S> {
    let mut g_shape = g.shape().to_vec();
    if kept {
        assert_eq!(g_shape[axis], 1);
        g_shape.remove(axis);
    }
    let (outer, inner) = {
        let outer: usize = g_shape[..axis].iter().product();
        (outer, g_shape[axis..].iter().product::<usize>())
    };
    let mut shape = g_shape.clone();
    shape.insert(axis, len);
    let mut out = vec![S::zero(); outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let dst = (o * len + a) * inner;
            out[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(shape, out)
}

/// Running prefix sum along one axis.
pub fn cumsum_axis<S: Scalar>(t: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, ax, inner) = axis_split(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for a in 1..ax {
            let prev = (o * ax + a - 1) * inner;
            let cur = (o * ax + a) * inner;
            for i in 0..inner {
                out[cur + i] = out[cur + i] + out[prev + i];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Suffix sum along one axis; adjoint of [`cumsum_axis`].
pub fn revcumsum_axis<S: Scalar>(t: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, ax, inner) = axis_split(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for a in (0..ax.saturating_sub(1)).rev() {
            let next = (o * ax + a + 1) * inner;
            let cur = (o * ax + a) * inner;
            for i in 0..inner {
                out[cur + i] = out[cur + i] + out[next + i];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Shift along one axis with zero fill: `y[a] = x[a - offset]` where defined.
/// Positive offsets delay (pull from the past); the adjoint is the negated
/// offset.
pub fn shift_axis<S: Scalar>(t: &Tensor<S>, axis: usize, offset: isize) -> Tensor<S> {
    let (outer, ax, inner) = axis_split(t.shape(), axis);
    let mut out = vec![S::zero(); t.len()];
    for o in 0..outer {
        for a in 0..ax {
            let src = a as isize - offset;
            if src < 0 || src as usize >= ax {
                continue;
            }
            let s = (o * ax + src as usize) * inner;
            let d = (o * ax + a) * inner;
            out[d..d + inner].copy_from_slice(&t.data()[s..s + inner]);
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let m = t(&[2, 2], &[3.0, -1.0, 2.0, 5.0]);
        let i = Tensor::eye(2);
        let p = matmul(&i, &m).unwrap();
        assert_eq!(p.data(), m.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let p = matmul(&a, &b).unwrap();
        assert_eq!(p.shape(), &[2, 1]);
        assert_eq!(p.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_1x1() {
        let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let spec = ConvSpec { stride: (1, 1), pad_t: (0, 0), pad_f: (0, 0) };
        let y = conv2d(&x, &w, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_local_sums() {
        // 1x3x3 input, 2x2 ones kernel, stride 1, no pad -> 2x2 local sums.
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t(&[1, 1, 2, 2], &[1.0; 4]);
        let spec = ConvSpec { stride: (1, 1), pad_t: (0, 0), pad_f: (0, 0) };
        let y = conv2d(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // Direct summation oracle.
        let oracle = |t0: usize, f0: usize| -> f64 {
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += x.data()[(t0 + i) * 3 + (f0 + j)];
                }
            }
            s
        };
        assert_eq!(y.data(), &[oracle(0, 0), oracle(0, 1), oracle(1, 0), oracle(1, 1)]);
    }

    #[test]
    fn conv_kernel_too_large_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let spec = ConvSpec { stride: (1, 1), pad_t: (0, 0), pad_f: (0, 0) };
        assert!(conv2d(&x, &w, &spec).is_err());
    }

    #[test]
    fn causal_padding_ignores_future() {
        // kernel_t=2 with pad (1,0): output at t must not see x[t+1:].
        let spec = ConvSpec { stride: (1, 1), pad_t: (1, 0), pad_f: (0, 0) };
        let w = Tensor::<f64>::from_fn(&[1, 1, 2, 1], |i| (i + 1) as f64);
        let x1 = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let x2 = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 99.0]);
        let y1 = conv2d(&x1, &w, &spec).unwrap();
        let y2 = conv2d(&x2, &w, &spec).unwrap();
        assert_eq!(y1.data()[..3], y2.data()[..3]);
    }

    #[test]
    fn tconv_delta_copies_kernel() {
        // Stride-2 upsampling of a delta reproduces the kernel at the site.
        let y = t(&[1, 1, 3], &[0.0, 1.0, 0.0]);
        let w = Tensor::<f64>::from_fn(&[1, 1, 1, 3], |i| (i + 1) as f64);
        let spec = ConvSpec { stride: (1, 2), pad_t: (0, 0), pad_f: (0, 0) };
        let x = tconv2d(&y, &w, &spec, 1, 7).unwrap();
        assert_eq!(x.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn adjoint_identity_random() {
        // <conv(x), y> == <x, tconv(y)> on random tensors, f64.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (2, 2) };
        let x = Tensor::<f64>::from_fn(&[3, 5, 8], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn(&[4, 3, 2, 5], |_| rng.gen_range(-1.0..1.0));
        let y_shape_t = ConvSpec::out_dim(5, spec.pad_t, 2, 1).unwrap();
        let y_shape_f = ConvSpec::out_dim(8, spec.pad_f, 5, 2).unwrap();
        let y = Tensor::<f64>::from_fn(&[4, y_shape_t, y_shape_f], |_| rng.gen_range(-1.0..1.0));
        let cx = conv2d(&x, &w, &spec).unwrap();
        let ty = tconv2d(&y, &w, &spec, 5, 8).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() / lhs.abs().max(1e-12) < 1e-5,
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn conv_tconv_shape_round_trip() {
        let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (2, 2) };
        let x = Tensor::<f64>::zeros(&[2, 7, 64]);
        let w = Tensor::<f64>::zeros(&[5, 2, 2, 5]);
        let y = conv2d(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[5, 7, 32]);
        let back = tconv2d(&y, &w, &spec, 7, 64).unwrap();
        assert_eq!(back.shape(), x.shape());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f32>::from_fn(&[37, 50], |_| rng.gen_range(-1.0f32..1.0));
        let b = Tensor::<f32>::from_fn(&[50, 41], |_| rng.gen_range(-1.0f32..1.0));
        assert_eq!(matmul_seq(&a, &b).data(), matmul_par(&a, &b).data());

        let x = Tensor::<f32>::from_fn(&[6, 11, 32], |_| rng.gen_range(-1.0f32..1.0));
        let w = Tensor::<f32>::from_fn(&[8, 6, 2, 5], |_| rng.gen_range(-1.0f32..1.0));
        let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (2, 2) };
        assert_eq!(
            conv2d_seq(&x, &w, &spec).unwrap().data(),
            conv2d_par(&x, &w, &spec).unwrap().data()
        );
    }

    #[test]
    fn broadcast_trailing() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let s = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(s.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        // [2,1] into [2,3]
        let c = t(&[2, 1], &[1.0, 2.0]);
        let s2 = broadcast_zip(&a, &c, |x, y| x + y).unwrap();
        assert_eq!(s2.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        // leading broadcast is rejected
        let d = t(&[2], &[1.0, 2.0]);
        assert!(broadcast_zip(&a, &d, |x, y| x + y).is_err());
    }

    #[test]
    fn reduce_inverts_broadcast() {
        let g = Tensor::<f64>::from_fn(&[2, 3], |i| (i + 1) as f64);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }

    #[test]
    fn slice_concat_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3], |i| i as f64);
        let a = slice_axis(&x, 1, 0, 1);
        let b = slice_axis(&x, 1, 1, 3);
        let back = concat_axis(&[&a, &b], 1).unwrap();
        assert_eq!(back.data(), x.data());
        assert_eq!(a.shape(), &[2, 1, 3]);
    }

    #[test]
    fn scatter_is_slice_adjoint() {
        let g = Tensor::<f64>::from_fn(&[2, 2, 3], |i| (i + 1) as f64);
        let s = scatter_axis(&g, 1, 1, 4);
        assert_eq!(s.shape(), &[2, 4, 3]);
        assert_eq!(slice_axis(&s, 1, 1, 2).data(), g.data());
        assert_eq!(slice_axis(&s, 1, 0, 1).data(), &[0.0; 6]);
        assert_eq!(slice_axis(&s, 1, 3, 1).data(), &[0.0; 6]);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[c,a,b] == x[a,b,c]
        assert_eq!(p.data()[0 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 0]);
        let back = permute(&p, &invert_perm(&[2, 0, 1]));
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn sums_and_cumsums_hand_case() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(sum_axis(&x, 1, false).data(), &[6.0, 15.0]);
        assert_eq!(sum_axis(&x, 0, true).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(sum_axis(&x, 0, true).shape(), &[1, 3]);
        assert_eq!(cumsum_axis(&x, 1).data(), &[1.0, 3.0, 6.0, 4.0, 9.0, 15.0]);
        assert_eq!(revcumsum_axis(&x, 1).data(), &[6.0, 5.0, 3.0, 15.0, 11.0, 6.0]);
        assert_eq!(repeat_axis(&sum_axis(&x, 0, true), 0, 2, true).shape(), &[2, 3]);
    }

    #[test]
    fn shift_zero_fills_and_adjoint_holds() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(shift_axis(&x, 1, 1).data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(shift_axis(&x, 1, -2).data(), &[3.0, 4.0, 0.0, 0.0]);
        // <shift(x, k), y> == <x, shift(y, -k)>
        let y = t(&[1, 4], &[5.0, -1.0, 2.0, 0.5]);
        let lhs: f64 = shift_axis(&x, 1, 1).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(shift_axis(&y, 1, -1).data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn transpose_hand_case() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = transpose2d(&x);
        assert_eq!(xt.shape(), &[3, 2]);
        assert_eq!(xt.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
