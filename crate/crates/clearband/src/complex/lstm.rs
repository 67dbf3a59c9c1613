//! LSTM scans and linear projections, real and complex.
//!
//! Sequences are laid out [steps, batch, features]. Gate order inside the
//! packed weight matrices is input, forget, cell, output; the initial state
//! is zero. A complex LSTM is two real LSTMs (an r-net and an i-net)
//! combined by the product rule on whole scans: re = r(xr) - i(xi),
//! im = r(xi) + i(xr). The value-path scans share every kernel call with
//! the tape versions so chunked streaming reproduces offline output
//! bit for bit.

use super::{CTensor, CVar};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels;
use crate::tensor::fmt_shape;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct LstmParams<P> {
    pub w_ih: P,
    pub w_hh: P,
    pub b: P,
}

impl<P> LstmParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> LstmParams<Q> {
        LstmParams {
            w_ih: f("w_ih", &self.w_ih),
            w_hh: f("w_hh", &self.w_hh),
            b: f("b", &self.b),
        }
    }
}

/// Weights [input, 4H] and [hidden, 4H], bias [4H], all U(+-1/sqrt(hidden)).
pub fn init_lstm<S: Scalar>(
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> LstmParams<Tensor<S>> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut draw = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| S::of_f64(rng.gen_range(-bound..bound)))
    };
    LstmParams {
        w_ih: draw(&[input, 4 * hidden]),
        w_hh: draw(&[hidden, 4 * hidden]),
        b: draw(&[4 * hidden]),
    }
}

fn check_seq<S: Scalar>(op: &'static str, x: &Tensor<S>, input: usize) -> Result<()> {
    if x.ndim() != 3 || x.shape()[2] != input {
        return Err(Error::shape(op, format!("[T, B, {input}]"), fmt_shape(x.shape())));
    }
    Ok(())
}

fn step_order(len: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    }
}

/// One scan over [T, B, I] input, returning [T, B, H] hidden rows in input
/// order plus the final (h, c).
pub fn lstm_scan_carry<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    p: &LstmParams<Var>,
    hidden: usize,
    state: Option<(Var, Var)>,
    reverse: bool,
) -> Result<(Var, (Var, Var))> {
    let xv = g.value(x);
    let input = g.shape(p.w_ih)[0];
    check_seq("lstm_scan", &xv, input)?;
    let (t_len, b) = (xv.shape()[0], xv.shape()[1]);
    let (mut h, mut c) = state.unwrap_or_else(|| {
        (
            g.constant(Tensor::zeros(&[b, hidden])),
            g.constant(Tensor::zeros(&[b, hidden])),
        )
    });
    let mut outs: Vec<Option<Var>> = vec![None; t_len];
    for t in step_order(t_len, reverse) {
        let xt = g.reshape(g.slice(x, 0, t, 1)?, &[b, input])?;
        let gates = g.add(
            g.add(g.matmul(xt, p.w_ih)?, g.matmul(h, p.w_hh)?)?,
            p.b,
        )?;
        let gi = g.sigmoid(g.slice(gates, 1, 0, hidden)?);
        let gf = g.sigmoid(g.slice(gates, 1, hidden, hidden)?);
        let gg = g.tanh(g.slice(gates, 1, 2 * hidden, hidden)?);
        let go = g.sigmoid(g.slice(gates, 1, 3 * hidden, hidden)?);
        c = g.add(g.mul(gf, c)?, g.mul(gi, gg)?)?;
        h = g.mul(go, g.tanh(c))?;
        outs[t] = Some(g.reshape(h, &[1, b, hidden])?);
    }
    let parts: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
    Ok((g.concat(&parts, 0)?, (h, c)))
}

pub fn lstm_scan<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    p: &LstmParams<Var>,
    hidden: usize,
    reverse: bool,
) -> Result<Var> {
    lstm_scan_carry(g, x, p, hidden, None, reverse).map(|(y, _)| y)
}

/// Hidden and cell rows carried across streamed chunks.
#[derive(Debug, Clone)]
pub struct LstmState<S: Scalar> {
    pub h: Tensor<S>,
    pub c: Tensor<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zero(batch: usize, hidden: usize) -> Self {
        LstmState { h: Tensor::zeros(&[batch, hidden]), c: Tensor::zeros(&[batch, hidden]) }
    }
}

/// Value twin of [`lstm_scan_carry`]: consumes [T, B, I], updates the state
/// in place, returns [T, B, H].
pub fn lstm_scan_value<S: Scalar>(
    x: &Tensor<S>,
    p: &LstmParams<Tensor<S>>,
    state: &mut LstmState<S>,
    reverse: bool,
) -> Result<Tensor<S>> {
    let input = p.w_ih.shape()[0];
    check_seq("lstm_scan", x, input)?;
    let hidden = p.w_hh.shape()[0];
    let (t_len, b) = (x.shape()[0], x.shape()[1]);
    let mut outs: Vec<Option<Tensor<S>>> = vec![None; t_len];
    for t in step_order(t_len, reverse) {
        let xt = kernels::slice_axis(x, 0, t, 1).reshaped(&[b, input])?;
        let gates = kernels::broadcast_zip(
            &kernels::broadcast_zip(
                &kernels::matmul(&xt, &p.w_ih)?,
                &kernels::matmul(&state.h, &p.w_hh)?,
                |a, b| a + b,
            )?,
            &p.b,
            |a, b| a + b,
        )?;
        let sig = |t: Tensor<S>| t.map(|a| S::one() / (S::one() + (-a).exp()));
        let gi = sig(kernels::slice_axis(&gates, 1, 0, hidden));
        let gf = sig(kernels::slice_axis(&gates, 1, hidden, hidden));
        let gg = kernels::slice_axis(&gates, 1, 2 * hidden, hidden).map(|a| a.tanh());
        let go = sig(kernels::slice_axis(&gates, 1, 3 * hidden, hidden));
        state.c = kernels::broadcast_zip(
            &kernels::broadcast_zip(&gf, &state.c, |a, b| a * b)?,
            &kernels::broadcast_zip(&gi, &gg, |a, b| a * b)?,
            |a, b| a + b,
        )?;
        state.h =
            kernels::broadcast_zip(&go, &state.c.map(|a| a.tanh()), |a, b| a * b)?;
        outs[t] = Some(state.h.reshaped(&[1, b, hidden])?);
    }
    let parts: Vec<Tensor<S>> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
    kernels::concat_axis(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Bidirectional scan: forward and reverse hidden rows concatenated on the
/// feature axis, [T, B, 2H].
pub fn blstm<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    fwd: &LstmParams<Var>,
    bwd: &LstmParams<Var>,
    hidden: usize,
) -> Result<Var> {
    let f = lstm_scan(g, x, fwd, hidden, false)?;
    let b = lstm_scan(g, x, bwd, hidden, true)?;
    g.concat(&[f, b], 2)
}

pub fn blstm_value<S: Scalar>(
    x: &Tensor<S>,
    fwd: &LstmParams<Tensor<S>>,
    bwd: &LstmParams<Tensor<S>>,
) -> Result<Tensor<S>> {
    let hidden = fwd.w_hh.shape()[0];
    let b = x.shape()[1];
    let f = lstm_scan_value(x, fwd, &mut LstmState::zero(b, hidden), false)?;
    let r = lstm_scan_value(x, bwd, &mut LstmState::zero(b, hidden), true)?;
    kernels::concat_axis(&[&f, &r], 2)
}

#[derive(Debug, Clone)]
pub struct CLstmParams<P> {
    pub r: LstmParams<P>,
    pub i: LstmParams<P>,
}

impl<P> CLstmParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> CLstmParams<Q> {
        CLstmParams {
            r: self.r.map(&mut |n, p| f(&format!("r.{n}"), p)),
            i: self.i.map(&mut |n, p| f(&format!("i.{n}"), p)),
        }
    }
}

pub fn init_clstm<S: Scalar>(
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> CLstmParams<Tensor<S>> {
    CLstmParams { r: init_lstm(input, hidden, rng), i: init_lstm(input, hidden, rng) }
}

/// Quasi-complex scan: re = r(xr) - i(xi), im = r(xi) + i(xr), each term a
/// full real scan from a zero state.
pub fn clstm_scan<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    p: &CLstmParams<Var>,
    hidden: usize,
    reverse: bool,
) -> Result<CVar> {
    let rr = lstm_scan(g, x.re, &p.r, hidden, reverse)?;
    let ii = lstm_scan(g, x.im, &p.i, hidden, reverse)?;
    let re = g.sub(rr, ii)?;
    let ri = lstm_scan(g, x.im, &p.r, hidden, reverse)?;
    let ir = lstm_scan(g, x.re, &p.i, hidden, reverse)?;
    let im = g.add(ri, ir)?;
    Ok(CVar::new(re, im))
}

/// The four real-scan states behind a streamed [`clstm_scan`].
#[derive(Debug, Clone)]
pub struct CLstmState<S: Scalar> {
    pub rr: LstmState<S>,
    pub ii: LstmState<S>,
    pub ri: LstmState<S>,
    pub ir: LstmState<S>,
}

impl<S: Scalar> CLstmState<S> {
    pub fn zero(batch: usize, hidden: usize) -> Self {
        CLstmState {
            rr: LstmState::zero(batch, hidden),
            ii: LstmState::zero(batch, hidden),
            ri: LstmState::zero(batch, hidden),
            ir: LstmState::zero(batch, hidden),
        }
    }
}

pub fn clstm_scan_value<S: Scalar>(
    x: &CTensor<S>,
    p: &CLstmParams<Tensor<S>>,
    state: &mut CLstmState<S>,
) -> Result<CTensor<S>> {
    let rr = lstm_scan_value(&x.re, &p.r, &mut state.rr, false)?;
    let ii = lstm_scan_value(&x.im, &p.i, &mut state.ii, false)?;
    let re = kernels::broadcast_zip(&rr, &ii, |a, b| a - b)?;
    let ri = lstm_scan_value(&x.im, &p.r, &mut state.ri, false)?;
    let ir = lstm_scan_value(&x.re, &p.i, &mut state.ir, false)?;
    let im = kernels::broadcast_zip(&ri, &ir, |a, b| a + b)?;
    Ok(CTensor::new(re, im))
}

/// Complex bidirectional scan: [T, B, 2H] per plane, forward features then
/// reverse features on the last axis.
pub fn cblstm<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    fwd: &CLstmParams<Var>,
    bwd: &CLstmParams<Var>,
    hidden: usize,
) -> Result<CVar> {
    let f = clstm_scan(g, x, fwd, hidden, false)?;
    let b = clstm_scan(g, x, bwd, hidden, true)?;
    Ok(CVar::new(g.concat(&[f.re, b.re], 2)?, g.concat(&[f.im, b.im], 2)?))
}

pub fn cblstm_value<S: Scalar>(
    x: &CTensor<S>,
    fwd: &CLstmParams<Tensor<S>>,
    bwd: &CLstmParams<Tensor<S>>,
) -> Result<CTensor<S>> {
    let hidden = fwd.r.w_hh.shape()[0];
    let b = x.re.shape()[1];
    let scan = |p: &CLstmParams<Tensor<S>>, rev: bool| -> Result<(Tensor<S>, Tensor<S>)> {
        let rr = lstm_scan_value(&x.re, &p.r, &mut LstmState::zero(b, hidden), rev)?;
        let ii = lstm_scan_value(&x.im, &p.i, &mut LstmState::zero(b, hidden), rev)?;
        let re = kernels::broadcast_zip(&rr, &ii, |a, b| a - b)?;
        let ri = lstm_scan_value(&x.im, &p.r, &mut LstmState::zero(b, hidden), rev)?;
        let ir = lstm_scan_value(&x.re, &p.i, &mut LstmState::zero(b, hidden), rev)?;
        let im = kernels::broadcast_zip(&ri, &ir, |a, b| a + b)?;
        Ok((re, im))
    };
    let (fr, fi) = scan(fwd, false)?;
    let (br, bi) = scan(bwd, true)?;
    Ok(CTensor::new(
        kernels::concat_axis(&[&fr, &br], 2)?,
        kernels::concat_axis(&[&fi, &bi], 2)?,
    ))
}

#[derive(Debug, Clone)]
pub struct LinearParams<P> {
    pub w_re: P,
    pub w_im: P,
    pub b_re: P,
    pub b_im: P,
}

impl<P> LinearParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> LinearParams<Q> {
        LinearParams {
            w_re: f("w_re", &self.w_re),
            w_im: f("w_im", &self.w_im),
            b_re: f("b_re", &self.b_re),
            b_im: f("b_im", &self.b_im),
        }
    }
}

/// Complex projection weights [input, output], U(+-1/sqrt(input)), zero
/// bias.
pub fn init_linear<S: Scalar>(
    input: usize,
    output: usize,
    rng: &mut ChaCha8Rng,
) -> LinearParams<Tensor<S>> {
    let bound = 1.0 / (input as f64).sqrt();
    let mut draw = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| S::of_f64(rng.gen_range(-bound..bound)))
    };
    LinearParams {
        w_re: draw(&[input, output]),
        w_im: draw(&[input, output]),
        b_re: Tensor::zeros(&[output]),
        b_im: Tensor::zeros(&[output]),
    }
}

/// Complex linear map over the last axis of x.
pub fn clinear<S: Scalar>(g: &Graph<S>, x: CVar, p: &LinearParams<Var>) -> Result<CVar> {
    let shape = g.shape(x.re);
    let input = g.shape(p.w_re)[0];
    let output = g.shape(p.w_re)[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = CVar::new(
        g.reshape(x.re, &[rows, shape[shape.len() - 1]])?,
        g.reshape(x.im, &[rows, shape[shape.len() - 1]])?,
    );
    if shape[shape.len() - 1] != input {
        return Err(Error::shape(
            "clinear",
            format!("last axis {input}"),
            fmt_shape(g.value(x.re).shape()),
        ));
    }
    let y = super::cmatmul(g, flat, CVar::new(p.w_re, p.w_im))?;
    let mut out_shape = shape.clone();
    *out_shape.last_mut().expect("non-scalar") = output;
    Ok(CVar::new(
        g.reshape(g.add(y.re, p.b_re)?, &out_shape)?,
        g.reshape(g.add(y.im, p.b_im)?, &out_shape)?,
    ))
}

/// Value twin of [`clinear`].
pub fn clinear_value<S: Scalar>(x: &CTensor<S>, p: &LinearParams<Tensor<S>>) -> Result<CTensor<S>> {
    let shape = x.re.shape().to_vec();
    let input = p.w_re.shape()[0];
    let output = p.w_re.shape()[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    if shape[shape.len() - 1] != input {
        return Err(Error::shape("clinear", format!("last axis {input}"), fmt_shape(x.re.shape())));
    }
    let fr = x.re.reshaped(&[rows, input])?;
    let fi = x.im.reshaped(&[rows, input])?;
    let (yr, yi) = super::cmatmul_value(&fr, &fi, &p.w_re, &p.w_im)?;
    let yr = kernels::broadcast_zip(&yr, &p.b_re, |a, b| a + b)?;
    let yi = kernels::broadcast_zip(&yi, &p.b_im, |a, b| a + b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-scalar") = output;
    Ok(CTensor::new(yr.reshaped(&out_shape)?, yi.reshaped(&out_shape)?))
}
