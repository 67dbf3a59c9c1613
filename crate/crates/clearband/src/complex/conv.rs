//! Complex 2-D convolutions over [C, T, F] feature maps.
//!
//! A complex conv is four real convolutions combined by the product rule:
//! re = Xr*Wr - Xi*Wi, im = Xr*Wi + Xi*Wr. Transposed layers use the same
//! rule over the transposed real kernel. Weight layout is [C_out, C_in,
//! k_t, k_f] for forward convs and [C_in, C_out, k_t, k_f] for transposed
//! ones; biases are one complex scalar per output channel.

use super::CVar;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels::{self, ConvSpec};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ConvParams<P> {
    pub w_re: P,
    pub w_im: P,
    pub b_re: P,
    pub b_im: P,
}

impl<P> ConvParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ConvParams<Q> {
        ConvParams {
            w_re: f("w_re", &self.w_re),
            w_im: f("w_im", &self.w_im),
            b_re: f("b_re", &self.b_re),
            b_im: f("b_im", &self.b_im),
        }
    }
}

fn uniform_kernel<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of_f64(rng.gen_range(-bound..bound)))
}

/// Forward-conv weights [c_out, c_in, k_t, k_f], U(+-1/sqrt(fan_in)) per
/// plane, zero bias.
pub fn init_conv<S: Scalar>(
    c_out: usize,
    c_in: usize,
    k_t: usize,
    k_f: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams<Tensor<S>> {
    let bound = 1.0 / ((c_in * k_t * k_f) as f64).sqrt();
    ConvParams {
        w_re: uniform_kernel(&[c_out, c_in, k_t, k_f], bound, rng),
        w_im: uniform_kernel(&[c_out, c_in, k_t, k_f], bound, rng),
        b_re: Tensor::zeros(&[c_out]),
        b_im: Tensor::zeros(&[c_out]),
    }
}

/// Transposed-conv weights [c_in, c_out, k_t, k_f].
pub fn init_tconv<S: Scalar>(
    c_in: usize,
    c_out: usize,
    k_t: usize,
    k_f: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams<Tensor<S>> {
    let bound = 1.0 / ((c_in * k_t * k_f) as f64).sqrt();
    ConvParams {
        w_re: uniform_kernel(&[c_in, c_out, k_t, k_f], bound, rng),
        w_im: uniform_kernel(&[c_in, c_out, k_t, k_f], bound, rng),
        b_re: Tensor::zeros(&[c_out]),
        b_im: Tensor::zeros(&[c_out]),
    }
}

fn add_bias<S: Scalar>(g: &Graph<S>, y: Var, b: Var) -> Result<Var> {
    let c = g.shape(y)[0];
    g.add(y, g.reshape(b, &[c, 1, 1])?)
}

pub fn cconv2d<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    p: &ConvParams<Var>,
    spec: ConvSpec,
) -> Result<CVar> {
    let rr = g.conv2d(x.re, p.w_re, spec)?;
    let ii = g.conv2d(x.im, p.w_im, spec)?;
    let re = g.sub(rr, ii)?;
    let ri = g.conv2d(x.re, p.w_im, spec)?;
    let ir = g.conv2d(x.im, p.w_re, spec)?;
    let im = g.add(ri, ir)?;
    Ok(CVar::new(add_bias(g, re, p.b_re)?, add_bias(g, im, p.b_im)?))
}

/// Value twin of [`cconv2d`]; identical kernel call order.
pub fn cconv2d_value<S: Scalar>(
    xr: &Tensor<S>,
    xi: &Tensor<S>,
    p: &ConvParams<Tensor<S>>,
    spec: ConvSpec,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let rr = kernels::conv2d(xr, &p.w_re, &spec)?;
    let ii = kernels::conv2d(xi, &p.w_im, &spec)?;
    let re = kernels::broadcast_zip(&rr, &ii, |a, b| a - b)?;
    let ri = kernels::conv2d(xr, &p.w_im, &spec)?;
    let ir = kernels::conv2d(xi, &p.w_re, &spec)?;
    let im = kernels::broadcast_zip(&ri, &ir, |a, b| a + b)?;
    let c = re.shape()[0];
    Ok((
        kernels::broadcast_zip(&re, &p.b_re.reshaped(&[c, 1, 1])?, |a, b| a + b)?,
        kernels::broadcast_zip(&im, &p.b_im.reshaped(&[c, 1, 1])?, |a, b| a + b)?,
    ))
}

pub fn ctconv2d<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    p: &ConvParams<Var>,
    spec: ConvSpec,
    out_t: usize,
    out_f: usize,
) -> Result<CVar> {
    let rr = g.tconv2d(x.re, p.w_re, spec, out_t, out_f)?;
    let ii = g.tconv2d(x.im, p.w_im, spec, out_t, out_f)?;
    let re = g.sub(rr, ii)?;
    let ri = g.tconv2d(x.re, p.w_im, spec, out_t, out_f)?;
    let ir = g.tconv2d(x.im, p.w_re, spec, out_t, out_f)?;
    let im = g.add(ri, ir)?;
    Ok(CVar::new(add_bias(g, re, p.b_re)?, add_bias(g, im, p.b_im)?))
}

/// Value twin of [`ctconv2d`].
pub fn ctconv2d_value<S: Scalar>(
    xr: &Tensor<S>,
    xi: &Tensor<S>,
    p: &ConvParams<Tensor<S>>,
    spec: ConvSpec,
    out_t: usize,
    out_f: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let rr = kernels::tconv2d(xr, &p.w_re, &spec, out_t, out_f)?;
    let ii = kernels::tconv2d(xi, &p.w_im, &spec, out_t, out_f)?;
    let re = kernels::broadcast_zip(&rr, &ii, |a, b| a - b)?;
    let ri = kernels::tconv2d(xr, &p.w_im, &spec, out_t, out_f)?;
    let ir = kernels::tconv2d(xi, &p.w_re, &spec, out_t, out_f)?;
    let im = kernels::broadcast_zip(&ri, &ir, |a, b| a + b)?;
    let c = re.shape()[0];
    Ok((
        kernels::broadcast_zip(&re, &p.b_re.reshaped(&[c, 1, 1])?, |a, b| a + b)?,
        kernels::broadcast_zip(&im, &p.b_im.reshaped(&[c, 1, 1])?, |a, b| a + b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_tape, DEFAULT_STEP, DEFAULT_TOL};
    use num_complex::Complex;
    use rand::SeedableRng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_complex_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (c_in, c_out, t, f) = (2, 3, 4, 5);
        let (k_t, k_f) = (2, 3);
        let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (1, 1) };
        let mut p = init_conv::<f64>(c_out, c_in, k_t, k_f, &mut rng);
        p.b_re = rand_t(&[c_out], &mut rng);
        p.b_im = rand_t(&[c_out], &mut rng);
        let xr = rand_t(&[c_in, t, f], &mut rng);
        let xi = rand_t(&[c_in, t, f], &mut rng);
        let (yr, yi) = cconv2d_value(&xr, &xi, &p, spec).unwrap();

        let pt = t + 1;
        let pf = f + 2;
        let out_t = (pt - k_t) / 1 + 1;
        let out_f = (pf - k_f) / 2 + 1;
        assert_eq!(yr.shape(), &[c_out, out_t, out_f]);
        let xp = |plane: &Tensor<f64>, c: usize, ti: isize, fi: isize| -> f64 {
            let ti = ti - 1;
            let fi = fi - 1;
            if ti < 0 || fi < 0 || ti >= t as isize || fi >= f as isize {
                0.0
            } else {
                plane.data()[(c * t + ti as usize) * f + fi as usize]
            }
        };
        for co in 0..c_out {
            for to in 0..out_t {
                for fo in 0..out_f {
                    let mut acc = Complex::new(p.b_re.data()[co], p.b_im.data()[co]);
                    for ci in 0..c_in {
                        for i in 0..k_t {
                            for j in 0..k_f {
                                let x = Complex::new(
                                    xp(&xr, ci, (to + i) as isize, (fo * 2 + j) as isize),
                                    xp(&xi, ci, (to + i) as isize, (fo * 2 + j) as isize),
                                );
                                let w = Complex::new(
                                    p.w_re.data()[((co * c_in + ci) * k_t + i) * k_f + j],
                                    p.w_im.data()[((co * c_in + ci) * k_t + i) * k_f + j],
                                );
                                acc += x * w;
                            }
                        }
                    }
                    let idx = (co * out_t + to) * out_f + fo;
                    assert!((yr.data()[idx] - acc.re).abs() < 1e-12);
                    assert!((yi.data()[idx] - acc.im).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_and_value_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (2, 2) };
        let mut p = init_conv::<f64>(4, 2, 2, 5, &mut rng);
        p.b_re = rand_t(&[4], &mut rng);
        let xr = rand_t(&[2, 6, 8], &mut rng);
        let xi = rand_t(&[2, 6, 8], &mut rng);
        let g = Graph::new();
        let pv = p.map(&mut |_, t| g.constant(t.clone()));
        let y = cconv2d(&g, CVar::new(g.constant(xr.clone()), g.constant(xi.clone())), &pv, spec)
            .unwrap();
        let (yr, yi) = cconv2d_value(&xr, &xi, &p, spec).unwrap();
        assert_eq!(g.value(y.re).data(), yr.data());
        assert_eq!(g.value(y.im).data(), yi.data());

        let tp = init_tconv::<f64>(4, 2, 2, 5, &mut rng);
        let tv = tp.map(&mut |_, t| g.constant(t.clone()));
        let up = ctconv2d(&g, y, &tv, spec, 6, 8).unwrap();
        let (ur, ui) = ctconv2d_value(&yr, &yi, &tp, spec, 6, 8).unwrap();
        assert_eq!(g.value(up.re).data(), ur.data());
        assert_eq!(g.value(up.im).data(), ui.data());
    }

    #[test]
    fn causal_time_padding_sees_no_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let spec = ConvSpec { stride: (1, 1), pad_t: (1, 0), pad_f: (0, 0) };
        let p = init_conv::<f64>(1, 1, 2, 1, &mut rng);
        let xr = rand_t(&[1, 5, 3], &mut rng);
        let xi = rand_t(&[1, 5, 3], &mut rng);
        let (yr, _) = cconv2d_value(&xr, &xi, &p, spec).unwrap();
        let mut bumped = xr.data().to_vec();
        for v in &mut bumped[3 * 3..] {
            *v += 7.0;
        }
        let xb = Tensor::new(vec![1, 5, 3], bumped);
        let (yb, _) = cconv2d_value(&xb, &xi, &p, spec).unwrap();
        assert_eq!(&yr.data()[..3 * 3], &yb.data()[..3 * 3]);
        assert_ne!(&yr.data()[3 * 3..], &yb.data()[3 * 3..]);
    }

    #[test]
    fn conv_and_transposed_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (1, 1) };
        let p = init_conv::<f64>(2, 1, 2, 3, &mut rng);
        let tp = init_tconv::<f64>(2, 1, 2, 3, &mut rng);
        let inputs = vec![
            rand_t(&[1, 3, 6], &mut rng),
            rand_t(&[1, 3, 6], &mut rng),
            p.w_re.clone(),
            p.w_im.clone(),
            p.b_re.clone(),
            tp.w_re.clone(),
            tp.w_im.clone(),
            tp.b_im.clone(),
        ];
        check_tape(
            |g, v| {
                let pv = ConvParams {
                    w_re: v[2],
                    w_im: v[3],
                    b_re: v[4],
                    b_im: g.constant(Tensor::zeros(&[2])),
                };
                let tv = ConvParams {
                    w_re: v[5],
                    w_im: v[6],
                    b_re: g.constant(Tensor::zeros(&[1])),
                    b_im: v[7],
                };
                let mid = cconv2d(g, CVar::new(v[0], v[1]), &pv, spec).unwrap();
                let back = ctconv2d(g, mid, &tv, spec, 3, 6).unwrap();
                let m = super::super::cmul(g, back, back).unwrap();
                g.add(g.sum_all(m.re), g.sum_all(m.im)).unwrap()
            },
            &inputs,
            20,
            39,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }
}
