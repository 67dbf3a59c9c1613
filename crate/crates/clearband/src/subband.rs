//! Learnable subband analysis and synthesis.
//!
//! The spectrum (DC bin dropped, 256 bins at the default STFT size) is cut
//! into K contiguous blocks of width F/K. Analysis multiplies each block by
//! its own complex F/K x F/K matrix; synthesis concatenates the processed
//! bands back to width F and multiplies by one full complex F x F matrix.
//! Both start at the identity, so before training the pair is a transparent
//! slice/concat and the round trip is exact.

use crate::complex::{cmatmul, cmatmul_value, CVar};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels;
use crate::tensor::fmt_shape;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubbandConfig {
    pub bands: usize,
    pub net_bins: usize,
}

impl Default for SubbandConfig {
    fn default() -> Self {
        SubbandConfig { bands: 4, net_bins: 256 }
    }
}

impl SubbandConfig {
    pub fn new(bands: usize, net_bins: usize) -> Self {
        let cfg = SubbandConfig { bands, net_bins };
        assert!(bands > 0 && net_bins % bands == 0, "bins must split evenly into bands");
        cfg
    }

    pub fn band_width(&self) -> usize {
        self.net_bins / self.bands
    }
}

/// Analysis matrices `a_*` are stacked [K, W, W] with biases [K, W];
/// synthesis `s_*` is [F, F] with bias [F]; the per-band affine of the
/// running normalizer is [K] per plane.
#[derive(Debug, Clone)]
pub struct SubbandParams<P> {
    pub a_re: P,
    pub a_im: P,
    pub a_b_re: P,
    pub a_b_im: P,
    pub s_re: P,
    pub s_im: P,
    pub s_b_re: P,
    pub s_b_im: P,
    pub gamma_re: P,
    pub gamma_im: P,
    pub beta_re: P,
    pub beta_im: P,
}

impl<P> SubbandParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> SubbandParams<Q> {
        SubbandParams {
            a_re: f("split.a_re", &self.a_re),
            a_im: f("split.a_im", &self.a_im),
            a_b_re: f("split.b_re", &self.a_b_re),
            a_b_im: f("split.b_im", &self.a_b_im),
            s_re: f("merge.s_re", &self.s_re),
            s_im: f("merge.s_im", &self.s_im),
            s_b_re: f("merge.b_re", &self.s_b_re),
            s_b_im: f("merge.b_im", &self.s_b_im),
            gamma_re: f("bandnorm.gamma_re", &self.gamma_re),
            gamma_im: f("bandnorm.gamma_im", &self.gamma_im),
            beta_re: f("bandnorm.beta_re", &self.beta_re),
            beta_im: f("bandnorm.beta_im", &self.beta_im),
        }
    }
}

fn identity_stack<S: Scalar>(k: usize, w: usize, noise: &mut impl FnMut() -> S) -> Tensor<S> {
    Tensor::from_fn(&[k, w, w], |i| {
        let diag = if (i / w) % w == i % w { S::one() } else { S::zero() };
        diag + noise()
    })
}

/// Identity filters plus N(0, sigma) jitter on both planes. `sigma = 0`
/// gives the exact slice/concat pair.
pub fn init_subband<S: Scalar>(
    cfg: &SubbandConfig,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> SubbandParams<Tensor<S>> {
    let w = cfg.band_width();
    let k = cfg.bands;
    let f = cfg.net_bins;
    let dist = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let noise = |rng: &mut ChaCha8Rng| {
        if sigma == 0.0 {
            S::zero()
        } else {
            S::of_f64(dist.sample(rng))
        }
    };
    let a_re = identity_stack(k, w, &mut || noise(rng));
    let a_im = Tensor::from_fn(&[k, w, w], |_| noise(rng));
    let s_re = Tensor::from_fn(&[f, f], |i| {
        let diag = if i / f == i % f { S::one() } else { S::zero() };
        diag + noise(rng)
    });
    let s_im = Tensor::from_fn(&[f, f], |_| noise(rng));
    SubbandParams {
        a_re,
        a_im,
        a_b_re: Tensor::zeros(&[k, w]),
        a_b_im: Tensor::zeros(&[k, w]),
        s_re,
        s_im,
        s_b_re: Tensor::zeros(&[f]),
        s_b_im: Tensor::zeros(&[f]),
        gamma_re: Tensor::full(&[k], S::one()),
        gamma_im: Tensor::full(&[k], S::one()),
        beta_re: Tensor::zeros(&[k]),
        beta_im: Tensor::zeros(&[k]),
    }
}

fn check_spectrum<S: Scalar>(op: &'static str, v: &Tensor<S>, cfg: &SubbandConfig) -> Result<()> {
    if v.ndim() != 2 || v.shape()[1] != cfg.net_bins {
        return Err(Error::shape(op, format!("[T, {}]", cfg.net_bins), fmt_shape(v.shape())));
    }
    Ok(())
}

/// Band-split a [T, F] spectrum into [K, T, F/K]: band k is the k-th bin
/// block times its analysis matrix, plus a per-band bias.
pub fn split_bands<S: Scalar>(
    g: &Graph<S>,
    spec: CVar,
    p: &SubbandParams<Var>,
    cfg: &SubbandConfig,
) -> Result<CVar> {
    check_spectrum("split_bands", &g.value(spec.re), cfg)?;
    let w = cfg.band_width();
    let t = g.shape(spec.re)[0];
    let mut parts_re = Vec::with_capacity(cfg.bands);
    let mut parts_im = Vec::with_capacity(cfg.bands);
    for k in 0..cfg.bands {
        let xr = g.slice(spec.re, 1, k * w, w)?;
        let xi = g.slice(spec.im, 1, k * w, w)?;
        let ar = g.reshape(g.slice(p.a_re, 0, k, 1)?, &[w, w])?;
        let ai = g.reshape(g.slice(p.a_im, 0, k, 1)?, &[w, w])?;
        let br = g.reshape(g.slice(p.a_b_re, 0, k, 1)?, &[w])?;
        let bi = g.reshape(g.slice(p.a_b_im, 0, k, 1)?, &[w])?;
        let y = cmatmul(g, CVar::new(xr, xi), CVar::new(ar, ai))?;
        parts_re.push(g.reshape(g.add(y.re, br)?, &[1, t, w])?);
        parts_im.push(g.reshape(g.add(y.im, bi)?, &[1, t, w])?);
    }
    Ok(CVar::new(g.concat(&parts_re, 0)?, g.concat(&parts_im, 0)?))
}

/// Value twin of [`split_bands`]; same kernels in the same order.
pub fn split_bands_value<S: Scalar>(
    re: &Tensor<S>,
    im: &Tensor<S>,
    p: &SubbandParams<Tensor<S>>,
    cfg: &SubbandConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_spectrum("split_bands", re, cfg)?;
    let w = cfg.band_width();
    let t = re.shape()[0];
    let mut parts_re = Vec::with_capacity(cfg.bands);
    let mut parts_im = Vec::with_capacity(cfg.bands);
    for k in 0..cfg.bands {
        let xr = kernels::slice_axis(re, 1, k * w, w);
        let xi = kernels::slice_axis(im, 1, k * w, w);
        let ar = kernels::slice_axis(&p.a_re, 0, k, 1).reshaped(&[w, w])?;
        let ai = kernels::slice_axis(&p.a_im, 0, k, 1).reshaped(&[w, w])?;
        let br = kernels::slice_axis(&p.a_b_re, 0, k, 1).reshaped(&[w])?;
        let bi = kernels::slice_axis(&p.a_b_im, 0, k, 1).reshaped(&[w])?;
        let (yr, yi) = cmatmul_value(&xr, &xi, &ar, &ai)?;
        let yr = kernels::broadcast_zip(&yr, &br, |a, b| a + b)?;
        let yi = kernels::broadcast_zip(&yi, &bi, |a, b| a + b)?;
        parts_re.push(yr.reshaped(&[1, t, w])?);
        parts_im.push(yi.reshaped(&[1, t, w])?);
    }
    let re_out = kernels::concat_axis(&parts_re.iter().collect::<Vec<_>>(), 0)?;
    let im_out = kernels::concat_axis(&parts_im.iter().collect::<Vec<_>>(), 0)?;
    Ok((re_out, im_out))
}

fn check_bands<S: Scalar>(op: &'static str, v: &Tensor<S>, cfg: &SubbandConfig) -> Result<()> {
    if v.ndim() != 3 || v.shape()[0] != cfg.bands || v.shape()[2] != cfg.band_width() {
        return Err(Error::shape(
            op,
            format!("[{}, T, {}]", cfg.bands, cfg.band_width()),
            fmt_shape(v.shape()),
        ));
    }
    Ok(())
}

/// Concatenate [K, T, F/K] bands back to [T, F], apply the synthesis matrix
/// and its bias.
pub fn merge_bands<S: Scalar>(
    g: &Graph<S>,
    bands: CVar,
    p: &SubbandParams<Var>,
    cfg: &SubbandConfig,
) -> Result<CVar> {
    check_bands("merge_bands", &g.value(bands.re), cfg)?;
    let w = cfg.band_width();
    let t = g.shape(bands.re)[1];
    let mut parts_re = Vec::with_capacity(cfg.bands);
    let mut parts_im = Vec::with_capacity(cfg.bands);
    for k in 0..cfg.bands {
        parts_re.push(g.reshape(g.slice(bands.re, 0, k, 1)?, &[t, w])?);
        parts_im.push(g.reshape(g.slice(bands.im, 0, k, 1)?, &[t, w])?);
    }
    let cat = CVar::new(g.concat(&parts_re, 1)?, g.concat(&parts_im, 1)?);
    let y = cmatmul(g, cat, CVar::new(p.s_re, p.s_im))?;
    Ok(CVar::new(g.add(y.re, p.s_b_re)?, g.add(y.im, p.s_b_im)?))
}

/// Value twin of [`merge_bands`].
pub fn merge_bands_value<S: Scalar>(
    re: &Tensor<S>,
    im: &Tensor<S>,
    p: &SubbandParams<Tensor<S>>,
    cfg: &SubbandConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_bands("merge_bands", re, cfg)?;
    let w = cfg.band_width();
    let t = re.shape()[1];
    let mut parts_re = Vec::with_capacity(cfg.bands);
    let mut parts_im = Vec::with_capacity(cfg.bands);
    for k in 0..cfg.bands {
        parts_re.push(kernels::slice_axis(re, 0, k, 1).reshaped(&[t, w])?);
        parts_im.push(kernels::slice_axis(im, 0, k, 1).reshaped(&[t, w])?);
    }
    let cat_re = kernels::concat_axis(&parts_re.iter().collect::<Vec<_>>(), 1)?;
    let cat_im = kernels::concat_axis(&parts_im.iter().collect::<Vec<_>>(), 1)?;
    let (yr, yi) = cmatmul_value(&cat_re, &cat_im, &p.s_re, &p.s_im)?;
    Ok((
        kernels::broadcast_zip(&yr, &p.s_b_re, |a, b| a + b)?,
        kernels::broadcast_zip(&yi, &p.s_b_im, |a, b| a + b)?,
    ))
}

fn affine_per_band<S: Scalar>(
    g: &Graph<S>,
    normed: Var,
    gamma: Var,
    beta: Var,
    bands: usize,
) -> Result<Var> {
    let ga = g.reshape(gamma, &[bands, 1, 1])?;
    let be = g.reshape(beta, &[bands, 1, 1])?;
    g.add(g.mul(normed, ga)?, be)
}

fn norm_plane_full<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: S,
) -> Result<Var> {
    let shape = g.shape(x);
    let (k, t, w) = (shape[0], shape[1], shape[2]);
    let inv_n = S::one() / S::of_usize(t * w);
    let sums = g.sum_axis(g.sum_axis(x, 2, true), 1, true);
    let mu = g.mul_scalar(sums, inv_n);
    let centered = g.sub(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mul_scalar(g.sum_axis(g.sum_axis(sq, 2, true), 1, true), inv_n);
    let denom = g.sqrt(g.add_scalar(var, eps));
    affine_per_band(g, g.div(centered, denom)?, gamma, beta, k)
}

/// Whole-utterance normalization of a [K, T, W] band stack: zero mean, unit
/// variance per band with statistics over all T*W cells, real and imaginary
/// planes handled independently, then a per-band affine.
pub fn instance_norm<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    p: &SubbandParams<Var>,
    cfg: &SubbandConfig,
) -> Result<CVar> {
    check_bands("instance_norm", &g.value(x.re), cfg)?;
    let eps = S::of_f64(NORM_EPS);
    Ok(CVar::new(
        norm_plane_full(g, x.re, p.gamma_re, p.beta_re, eps)?,
        norm_plane_full(g, x.im, p.gamma_im, p.beta_im, eps)?,
    ))
}

fn norm_plane_causal<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    counts: Var,
    eps: S,
) -> Result<Var> {
    let k = g.shape(x)[0];
    let s1 = g.cumsum(g.sum_axis(x, 2, true), 1);
    let mu = g.div(s1, counts)?;
    let sq = g.mul(x, x)?;
    let s2 = g.cumsum(g.sum_axis(sq, 2, true), 1);
    let e2 = g.div(s2, counts)?;
    let var = g.relu(g.sub(e2, g.mul(mu, mu)?)?);
    let denom = g.sqrt(g.add_scalar(var, eps));
    let normed = g.div(g.sub(x, mu)?, denom)?;
    affine_per_band(g, normed, gamma, beta, k)
}

/// Causal counterpart of [`instance_norm`]: the statistics at frame t use
/// only frames 0..=t, so the output never depends on later input. This is
/// the variant the enhancement model uses.
pub fn causal_instance_norm<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    p: &SubbandParams<Var>,
    cfg: &SubbandConfig,
) -> Result<CVar> {
    check_bands("causal_instance_norm", &g.value(x.re), cfg)?;
    let t = g.shape(x.re)[1];
    let w = cfg.band_width();
    let counts = g.constant(Tensor::from_fn(&[t, 1], |i| S::of_usize((i + 1) * w)));
    let eps = S::of_f64(NORM_EPS);
    Ok(CVar::new(
        norm_plane_causal(g, x.re, p.gamma_re, p.beta_re, counts, eps)?,
        norm_plane_causal(g, x.im, p.gamma_im, p.beta_im, counts, eps)?,
    ))
}

/// Running sums behind the streaming twin of [`causal_instance_norm`].
#[derive(Debug, Clone)]
pub struct CausalNormState<S> {
    s1_re: Vec<S>,
    s2_re: Vec<S>,
    s1_im: Vec<S>,
    s2_im: Vec<S>,
    frames: usize,
}

impl<S: Scalar> CausalNormState<S> {
    pub fn new(bands: usize) -> Self {
        CausalNormState {
            s1_re: vec![S::zero(); bands],
            s2_re: vec![S::zero(); bands],
            s1_im: vec![S::zero(); bands],
            s2_im: vec![S::zero(); bands],
            frames: 0,
        }
    }

    pub fn reset(&mut self) {
        for v in [&mut self.s1_re, &mut self.s2_re, &mut self.s1_im, &mut self.s2_im] {
            v.iter_mut().for_each(|x| *x = S::zero());
        }
        self.frames = 0;
    }

    /// Consume [K, T, W] of new frames, producing their normalized values
    /// exactly as [`causal_instance_norm`] would at the same absolute frame
    /// positions.
    pub fn apply(&mut self, x: &crate::complex::CTensor<S>, p: &SubbandParams<Tensor<S>>) -> crate::complex::CTensor<S> {
        let (k, t, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(k, self.s1_re.len());
        let eps = S::of_f64(NORM_EPS);
        let mut out_re = vec![S::zero(); k * t * w];
        let mut out_im = vec![S::zero(); k * t * w];
        for ti in 0..t {
            let count = S::of_usize((self.frames + ti + 1) * w);
            for ki in 0..k {
                let base = (ki * t + ti) * w;
                let row_re = &x.re.data()[base..base + w];
                let row_im = &x.im.data()[base..base + w];
                let plane = |row: &[S], s1: &mut S, s2: &mut S, gamma: S, beta: S, out: &mut [S]| {
                    let mut f1 = S::zero();
                    let mut f2 = S::zero();
                    for &v in row {
                        f1 = f1 + v;
                        f2 = f2 + v * v;
                    }
                    *s1 = *s1 + f1;
                    *s2 = *s2 + f2;
                    let mu = *s1 / count;
                    let e2 = *s2 / count;
                    let var = e2 - mu * mu;
                    let var = if var > S::zero() { var } else { S::zero() };
                    let denom = (var + eps).sqrt();
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = (v - mu) / denom * gamma + beta;
                    }
                };
                plane(
                    row_re,
                    &mut self.s1_re[ki],
                    &mut self.s2_re[ki],
                    p.gamma_re.data()[ki],
                    p.beta_re.data()[ki],
                    &mut out_re[base..base + w],
                );
                plane(
                    row_im,
                    &mut self.s1_im[ki],
                    &mut self.s2_im[ki],
                    p.gamma_im.data()[ki],
                    p.beta_im.data()[ki],
                    &mut out_im[base..base + w],
                );
            }
        }
        self.frames += t;
        crate::complex::CTensor::new(
            Tensor::new(vec![k, t, w], out_re),
            Tensor::new(vec![k, t, w], out_im),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::CTensor;
    use crate::tensor::gradcheck::{check_tape, DEFAULT_STEP, DEFAULT_TOL};
    use num_complex::Complex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> SubbandConfig {
        SubbandConfig::new(4, 16)
    }

    fn rand_spec(t: usize, f: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::from_fn(&[t, f], |_| rng.gen_range(-2.0..2.0)),
            Tensor::from_fn(&[t, f], |_| rng.gen_range(-2.0..2.0)),
        )
    }

    fn bind(g: &Graph<f64>, p: &SubbandParams<Tensor<f64>>) -> SubbandParams<Var> {
        p.map(&mut |_, t| g.constant(t.clone()))
    }

    #[test]
    fn identity_filters_slice_the_spectrum() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        let (re, im) = rand_spec(3, 16, 2);
        let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
        assert_eq!(br.shape(), &[4, 3, 4]);
        assert_eq!(bi.shape(), &[4, 3, 4]);
        for k in 0..4 {
            for t in 0..3 {
                for f in 0..4 {
                    assert_eq!(br.data()[(k * 3 + t) * 4 + f], re.data()[t * 16 + k * 4 + f]);
                    assert_eq!(bi.data()[(k * 3 + t) * 4 + f], im.data()[t * 16 + k * 4 + f]);
                }
            }
        }
    }

    #[test]
    fn random_filters_match_direct_summation() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = init_subband::<f64>(&cfg, 0.5, &mut rng);
        p.a_b_re = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-0.5..0.5));
        p.a_b_im = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-0.5..0.5));
        let (re, im) = rand_spec(2, 16, 4);
        let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
        let w = cfg.band_width();
        for k in 0..cfg.bands {
            for t in 0..2 {
                for f in 0..w {
                    let mut acc = Complex::new(
                        p.a_b_re.data()[k * w + f],
                        p.a_b_im.data()[k * w + f],
                    );
                    for fp in 0..w {
                        let y = Complex::new(
                            re.data()[t * 16 + k * w + fp],
                            im.data()[t * 16 + k * w + fp],
                        );
                        let a = Complex::new(
                            p.a_re.data()[(k * w + fp) * w + f],
                            p.a_im.data()[(k * w + fp) * w + f],
                        );
                        acc += y * a;
                    }
                    let got_re = br.data()[(k * 2 + t) * w + f];
                    let got_im = bi.data()[(k * 2 + t) * w + f];
                    assert!((got_re - acc.re).abs() / acc.re.abs().max(1.0) < 1e-12);
                    assert!((got_im - acc.im).abs() / acc.im.abs().max(1.0) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        let (re, im) = rand_spec(5, 16, 6);
        let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
        let (or, oi) = merge_bands_value(&br, &bi, &p, &cfg).unwrap();
        assert!(or.max_abs_diff(&re) < 1e-12);
        assert!(oi.max_abs_diff(&im) < 1e-12);
    }

    #[test]
    fn identity_round_trip_f32_stays_tight() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_subband::<f32>(&cfg, 0.0, &mut rng);
        let mut vr = ChaCha8Rng::seed_from_u64(8);
        let re = Tensor::<f32>::from_fn(&[4, 16], |_| vr.gen_range(-2.0..2.0));
        let im = Tensor::<f32>::from_fn(&[4, 16], |_| vr.gen_range(-2.0..2.0));
        let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
        let (or, oi) = merge_bands_value(&br, &bi, &p, &cfg).unwrap();
        assert!(or.max_abs_diff(&re) < 1e-6);
        assert!(oi.max_abs_diff(&im) < 1e-6);
    }

    #[test]
    fn tape_split_merge_match_value_twins_bitwise() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = init_subband::<f64>(&cfg, 1e-3, &mut rng);
        p.a_b_re = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-0.1..0.1));
        p.s_b_im = Tensor::from_fn(&[16], |_| rng.gen_range(-0.1..0.1));
        let (re, im) = rand_spec(3, 16, 10);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let spec = CVar::new(g.constant(re.clone()), g.constant(im.clone()));
        let bands = split_bands(&g, spec, &pv, &cfg).unwrap();
        let merged = merge_bands(&g, bands, &pv, &cfg).unwrap();
        let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
        let (mr, mi) = merge_bands_value(&br, &bi, &p, &cfg).unwrap();
        assert_eq!(g.value(bands.re).data(), br.data());
        assert_eq!(g.value(bands.im).data(), bi.data());
        assert_eq!(g.value(merged.re).data(), mr.data());
        assert_eq!(g.value(merged.im).data(), mi.data());
    }

    #[test]
    fn split_rejects_wrong_width() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        let (re, im) = rand_spec(2, 12, 12);
        assert!(split_bands_value(&re, &im, &p, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn bands_only_see_their_own_bins(
            t in 1usize..5,
            band in 0usize..4,
            bin in 0usize..4,
            bump in -3.0f64..3.0,
            seed in 0u64..500,
        ) {
            let cfg = small_cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = init_subband::<f64>(&cfg, 1e-3, &mut rng);
            let (re, im) = rand_spec(t, 16, seed + 1000);
            let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
            let mut re2 = re.data().to_vec();
            re2[band * 4 + bin] += bump;
            let re2 = Tensor::new(vec![t, 16], re2);
            let (cr, ci) = split_bands_value(&re2, &im, &p, &cfg).unwrap();
            let w = cfg.band_width();
            for k in 0..cfg.bands {
                if k == band {
                    continue;
                }
                let lo = k * t * w;
                let hi = lo + t * w;
                prop_assert_eq!(&br.data()[lo..hi], &cr.data()[lo..hi]);
                prop_assert_eq!(&bi.data()[lo..hi], &ci.data()[lo..hi]);
            }
        }

        #[test]
        fn split_is_linear_in_the_spectrum(
            alpha in -2.0f64..2.0,
            seed in 0u64..500,
        ) {
            let cfg = small_cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = init_subband::<f64>(&cfg, 1e-2, &mut rng);
            let (re, im) = rand_spec(3, 16, seed + 2000);
            let (br, bi) = split_bands_value(&re, &im, &p, &cfg).unwrap();
            let sr = re.map(|v| v * alpha);
            let si = im.map(|v| v * alpha);
            let (cr, ci) = split_bands_value(&sr, &si, &p, &cfg).unwrap();
            for (a, b) in br.data().iter().zip(cr.data()) {
                prop_assert!((a * alpha - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            for (a, b) in bi.data().iter().zip(ci.data()) {
                prop_assert!((a * alpha - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    fn band_stack(k: usize, t: usize, w: usize, seed: u64, spread: f64) -> CTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CTensor::new(
            Tensor::from_fn(&[k, t, w], |_| rng.gen_range(-spread..spread) + 0.3),
            Tensor::from_fn(&[k, t, w], |_| rng.gen_range(-spread..spread) - 0.2),
        )
    }

    #[test]
    fn whole_utterance_norm_hits_zero_mean_unit_variance() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        let x = band_stack(4, 6, 4, 14, 2.0);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let xv = CVar::new(g.constant(x.re.clone()), g.constant(x.im.clone()));
        let y = instance_norm(&g, xv, &pv, &cfg).unwrap();
        for plane in [g.value(y.re), g.value(y.im)] {
            for k in 0..4 {
                let cells = &plane.data()[k * 24..(k + 1) * 24];
                let mean: f64 = cells.iter().sum::<f64>() / 24.0;
                let var: f64 = cells.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
                assert!(mean.abs() < 1e-4, "band {k} mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "band {k} var {var}");
            }
        }
    }

    #[test]
    fn constant_band_normalizes_to_beta() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        p.beta_re = Tensor::from_fn(&[4], |i| i as f64 * 0.5);
        p.beta_im = Tensor::full(&[4], -1.0);
        let x = CTensor::new(Tensor::full(&[4, 5, 4], 3.0), Tensor::full(&[4, 5, 4], -2.0));
        let g = Graph::new();
        let pv = bind(&g, &p);
        let xv = CVar::new(g.constant(x.re), g.constant(x.im));
        let y = instance_norm(&g, xv, &pv, &cfg).unwrap();
        let yr = g.value(y.re);
        let yi = g.value(y.im);
        for k in 0..4 {
            for c in &yr.data()[k * 20..(k + 1) * 20] {
                assert_eq!(*c, k as f64 * 0.5);
            }
        }
        assert!(yi.data().iter().all(|v| *v == -1.0));
    }

    #[test]
    fn causal_norm_of_a_prefix_matches_the_prefix_of_the_full_pass() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        let x = band_stack(4, 8, 4, 18, 1.5);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let full = causal_instance_norm(
            &g,
            CVar::new(g.constant(x.re.clone()), g.constant(x.im.clone())),
            &pv,
            &cfg,
        )
        .unwrap();
        let pre_re = kernels::slice_axis(&x.re, 1, 0, 3);
        let pre_im = kernels::slice_axis(&x.im, 1, 0, 3);
        let part = causal_instance_norm(
            &g,
            CVar::new(g.constant(pre_re), g.constant(pre_im)),
            &pv,
            &cfg,
        )
        .unwrap();
        let full_re = g.value(full.re);
        let part_re = g.value(part.re);
        for k in 0..4 {
            for t in 0..3 {
                for f in 0..4 {
                    assert_eq!(
                        part_re.data()[(k * 3 + t) * 4 + f],
                        full_re.data()[(k * 8 + t) * 4 + f],
                    );
                }
            }
        }
    }

    #[test]
    fn streaming_norm_state_matches_tape_bitwise() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut p = init_subband::<f64>(&cfg, 0.0, &mut rng);
        p.gamma_re = Tensor::from_fn(&[4], |i| 1.0 + i as f64 * 0.1);
        p.beta_im = Tensor::full(&[4], 0.25);
        let x = band_stack(4, 7, 4, 20, 40.0);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let tape = causal_instance_norm(
            &g,
            CVar::new(g.constant(x.re.clone()), g.constant(x.im.clone())),
            &pv,
            &cfg,
        )
        .unwrap();
        let mut state = CausalNormState::new(4);
        let mut got_re = Vec::new();
        let mut got_im = Vec::new();
        // uneven chunks: 2, 1, 4 frames
        for (start, len) in [(0usize, 2usize), (2, 1), (3, 4)] {
            let chunk = CTensor::new(
                kernels::slice_axis(&x.re, 1, start, len),
                kernels::slice_axis(&x.im, 1, start, len),
            );
            let out = state.apply(&chunk, &p);
            got_re.push(out.re);
            got_im.push(out.im);
        }
        let got_re = kernels::concat_axis(&got_re.iter().collect::<Vec<_>>(), 1).unwrap();
        let got_im = kernels::concat_axis(&got_im.iter().collect::<Vec<_>>(), 1).unwrap();
        assert_eq!(got_re.data(), g.value(tape.re).data());
        assert_eq!(got_im.data(), g.value(tape.im).data());
    }

    #[test]
    fn split_merge_norm_gradients_check_out() {
        let cfg = SubbandConfig::new(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = init_subband::<f64>(&cfg, 0.1, &mut rng);
        let (re, im) = rand_spec(3, 6, 22);
        let inputs = vec![
            re,
            im,
            p.a_re.clone(),
            p.a_im.clone(),
            p.s_re.clone(),
            p.s_im.clone(),
            p.gamma_re.clone(),
            p.beta_re.clone(),
            p.a_b_re.clone(),
            p.s_b_im.clone(),
        ];
        check_tape(
            |g, v| {
                let pv = SubbandParams {
                    a_re: v[2],
                    a_im: v[3],
                    a_b_re: v[8],
                    a_b_im: g.constant(Tensor::zeros(&[2, 3])),
                    s_re: v[4],
                    s_im: v[5],
                    s_b_re: g.constant(Tensor::zeros(&[6])),
                    s_b_im: v[9],
                    gamma_re: v[6],
                    gamma_im: g.constant(Tensor::full(&[2], 1.0)),
                    beta_re: v[7],
                    beta_im: g.constant(Tensor::zeros(&[2])),
                };
                let bands = split_bands(g, CVar::new(v[0], v[1]), &pv, &cfg).unwrap();
                let normed = causal_instance_norm(g, bands, &pv, &cfg).unwrap();
                let merged = merge_bands(g, normed, &pv, &cfg).unwrap();
                let sq_re = g.mul(merged.re, merged.re).unwrap();
                let sq_im = g.mul(merged.im, merged.im).unwrap();
                g.add(g.sum_all(sq_re), g.sum_all(sq_im)).unwrap()
            },
            &inputs,
            16,
            23,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }

    #[test]
    fn whole_utterance_norm_gradients_check_out() {
        let cfg = SubbandConfig::new(2, 6);
        let x = band_stack(2, 4, 3, 24, 1.0);
        let inputs = vec![
            x.re,
            x.im,
            Tensor::from_fn(&[2], |i| 1.0 + 0.2 * i as f64),
            Tensor::from_fn(&[2], |i| 0.1 - 0.3 * i as f64),
        ];
        check_tape(
            |g, v| {
                let unused = g.constant(Tensor::zeros(&[1]));
                let pv = SubbandParams {
                    a_re: unused,
                    a_im: unused,
                    a_b_re: unused,
                    a_b_im: unused,
                    s_re: unused,
                    s_im: unused,
                    s_b_re: unused,
                    s_b_im: unused,
                    gamma_re: v[2],
                    gamma_im: v[2],
                    beta_re: v[3],
                    beta_im: v[3],
                };
                let y = instance_norm(g, CVar::new(v[0], v[1]), &pv, &cfg).unwrap();
                let sq_re = g.mul(y.re, y.re).unwrap();
                let prod = g.mul(y.im, sq_re).unwrap();
                g.sum_all(prod)
            },
            &inputs,
            16,
            25,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }
}
