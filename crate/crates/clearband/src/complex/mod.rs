//! Complex-valued building blocks over real tensor pairs.
//!
//! A complex value is a (re, im) pair of equal-shaped real tensors; every op
//! expands to the four-real-product rule. Tape functions take [`CVar`],
//! value functions take tensor pairs; both run the same kernel calls in the
//! same order, which is what lets the streaming path reproduce the offline
//! path bit for bit.

pub mod conv;
pub mod lstm;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(re: Var, im: Var) -> Self {
        CVar { re, im }
    }
}

#[derive(Debug, Clone)]
pub struct CTensor<S: Scalar> {
    pub re: Tensor<S>,
    pub im: Tensor<S>,
}

impl<S: Scalar> CTensor<S> {
    pub fn new(re: Tensor<S>, im: Tensor<S>) -> Self {
        assert_eq!(re.shape(), im.shape());
        CTensor { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        CTensor { re: Tensor::zeros(shape), im: Tensor::zeros(shape) }
    }
}

pub fn cadd<S: Scalar>(g: &Graph<S>, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar::new(g.add(a.re, b.re)?, g.add(a.im, b.im)?))
}

pub fn csub<S: Scalar>(g: &Graph<S>, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar::new(g.sub(a.re, b.re)?, g.sub(a.im, b.im)?))
}

/// Elementwise complex product (ar+i ai)(br+i bi).
pub fn cmul<S: Scalar>(g: &Graph<S>, a: CVar, b: CVar) -> Result<CVar> {
    let rr = g.mul(a.re, b.re)?;
    let ii = g.mul(a.im, b.im)?;
    let ri = g.mul(a.re, b.im)?;
    let ir = g.mul(a.im, b.re)?;
    Ok(CVar::new(g.sub(rr, ii)?, g.add(ri, ir)?))
}

/// Complex matrix product X.A of [m,k] by [k,n] pairs.
pub fn cmatmul<S: Scalar>(g: &Graph<S>, x: CVar, a: CVar) -> Result<CVar> {
    let rr = g.matmul(x.re, a.re)?;
    let ii = g.matmul(x.im, a.im)?;
    let re = g.sub(rr, ii)?;
    let ri = g.matmul(x.re, a.im)?;
    let ir = g.matmul(x.im, a.re)?;
    let im = g.add(ri, ir)?;
    Ok(CVar::new(re, im))
}

/// Value twin of [`cmatmul`]; identical kernel call order.
pub fn cmatmul_value<S: Scalar>(
    xr: &Tensor<S>,
    xi: &Tensor<S>,
    ar: &Tensor<S>,
    ai: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let rr = kernels::matmul(xr, ar)?;
    let ii = kernels::matmul(xi, ai)?;
    let re = kernels::broadcast_zip(&rr, &ii, |a, b| a - b)?;
    let ri = kernels::matmul(xr, ai)?;
    let ir = kernels::matmul(xi, ar)?;
    let im = kernels::broadcast_zip(&ri, &ir, |a, b| a + b)?;
    Ok((re, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_matches_num_complex_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, n) = (3, 4, 2);
        let xr = rand_t(&[m, k], &mut rng);
        let xi = rand_t(&[m, k], &mut rng);
        let ar = rand_t(&[k, n], &mut rng);
        let ai = rand_t(&[k, n], &mut rng);
        let (re, im) = cmatmul_value(&xr, &xi, &ar, &ai).unwrap();

        for i in 0..m {
            for j in 0..n {
                let mut acc = Complex::new(0.0, 0.0);
                for p in 0..k {
                    let x = Complex::new(xr.data()[i * k + p], xi.data()[i * k + p]);
                    let a = Complex::new(ar.data()[p * n + j], ai.data()[p * n + j]);
                    acc += x * a;
                }
                assert!((re.data()[i * n + j] - acc.re).abs() < 1e-12);
                assert!((im.data()[i * n + j] - acc.im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_and_value_products_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xr = rand_t(&[5, 6], &mut rng);
        let xi = rand_t(&[5, 6], &mut rng);
        let ar = rand_t(&[6, 3], &mut rng);
        let ai = rand_t(&[6, 3], &mut rng);
        let g = Graph::new();
        let x = CVar::new(g.constant(xr.clone()), g.constant(xi.clone()));
        let a = CVar::new(g.constant(ar.clone()), g.constant(ai.clone()));
        let y = cmatmul(&g, x, a).unwrap();
        let (re, im) = cmatmul_value(&xr, &xi, &ar, &ai).unwrap();
        assert_eq!(g.value(y.re).data(), re.data());
        assert_eq!(g.value(y.im).data(), im.data());
    }

    #[test]
    fn elementwise_product_rule() {
        // (1+2i)(3-1i) = 5+5i
        let g = Graph::<f64>::new();
        let a = CVar::new(g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(2.0)));
        let b = CVar::new(g.constant(Tensor::scalar(3.0)), g.constant(Tensor::scalar(-1.0)));
        let c = cmul(&g, a, b).unwrap();
        assert_eq!(g.value(c.re).item(), 5.0);
        assert_eq!(g.value(c.im).item(), 5.0);
    }

    #[test]
    fn product_gradients_check_out() {
        use crate::tensor::gradcheck::{check_tape, DEFAULT_SAMPLES, DEFAULT_STEP, DEFAULT_TOL};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs: Vec<Tensor<f64>> = vec![
            rand_t(&[3, 4], &mut rng),
            rand_t(&[3, 4], &mut rng),
            rand_t(&[4, 2], &mut rng),
            rand_t(&[4, 2], &mut rng),
        ];
        check_tape(
            |g, v| {
                let y = cmatmul(
                    g,
                    CVar::new(v[0], v[1]),
                    CVar::new(v[2], v[3]),
                )
                .unwrap();
                let m = cmul(g, y, y).unwrap();
                g.add(g.sum_all(m.re), g.sum_all(m.im)).unwrap()
            },
            &inputs,
            DEFAULT_SAMPLES,
            7,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }
}
