//! Real-signal FFT helpers over cached complex plans.
//!
//! rustfft transforms are unnormalized; the inverse here folds in the 1/N so
//! `real_ifft(real_fft(x)) == x`.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

pub struct FftEngine<S: Scalar> {
    size: usize,
    fwd: Arc<dyn Fft<S>>,
    inv: Arc<dyn Fft<S>>,
}

impl<S: Scalar> FftEngine<S> {
    pub fn new(size: usize) -> Self {
        assert!(size >= 2 && size % 2 == 0, "transform size must be even");
        let mut planner = FftPlanner::new();
        FftEngine {
            size,
            fwd: planner.plan_fft_forward(size),
            inv: planner.plan_fft_inverse(size),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Non-redundant bin count for a real input: size/2 + 1.
    pub fn bins(&self) -> usize {
        self.size / 2 + 1
    }

    /// DFT of a real frame (zero-padded to the transform size), returning
    /// the non-redundant half spectrum.
    pub fn real_fft(&self, frame: &[S]) -> Vec<Complex<S>> {
        assert!(frame.len() <= self.size, "frame longer than transform");
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.size];
        for (b, &x) in buf.iter_mut().zip(frame.iter()) {
            b.re = x;
        }
        self.fwd.process(&mut buf);
        buf.truncate(self.bins());
        buf
    }

    /// Inverse DFT of a half spectrum back to `size` real samples. The
    /// redundant half is reconstructed by conjugate symmetry, so any
    /// imaginary parts at DC and Nyquist are ignored.
    pub fn real_ifft(&self, spec: &[Complex<S>]) -> Vec<S> {
        assert_eq!(spec.len(), self.bins(), "half spectrum has size/2+1 bins");
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.size];
        buf[0] = Complex::new(spec[0].re, S::zero());
        buf[self.size / 2] = Complex::new(spec[self.size / 2].re, S::zero());
        for k in 1..self.size / 2 {
            buf[k] = spec[k];
            buf[self.size - k] = spec[k].conj();
        }
        self.inv.process(&mut buf);
        let scale = S::one() / S::of_usize(self.size);
        buf.into_iter().map(|c| c.re * scale).collect()
    }
}

impl<S: Scalar> Clone for FftEngine<S> {
    fn clone(&self) -> Self {
        FftEngine { size: self.size, fwd: self.fwd.clone(), inv: self.inv.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Textbook DFT by direct summation; the oracle for the fast transform.
    fn dft_direct(x: &[f64], size: usize) -> Vec<Complex<f64>> {
        (0..size / 2 + 1)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (m, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * m) as f64 / size as f64;
                    acc += Complex::new(v * ang.cos(), v * ang.sin());
                }
                acc
            })
            .collect()
    }

    #[test]
    fn matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eng = FftEngine::<f64>::new(16);
        let fast = eng.real_fft(&x);
        let slow = dft_direct(&x, 16);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_lands_on_its_bin() {
        let n = 64;
        let k0 = 5;
        let x: Vec<f64> = (0..n).map(|m| (2.0 * PI * (k0 * m) as f64 / n as f64).cos()).collect();
        let spec = FftEngine::<f64>::new(n).real_fft(&x);
        for (k, c) in spec.iter().enumerate() {
            let expect = if k == k0 { n as f64 / 2.0 } else { 0.0 };
            assert!((c.re - expect).abs() < 1e-9 && c.im.abs() < 1e-9, "bin {k}: {c}");
        }
    }

    #[test]
    fn round_trip_with_zero_padding() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eng = FftEngine::<f64>::new(32);
        let back = eng.real_ifft(&eng.real_fft(&x));
        for (i, &v) in back.iter().enumerate() {
            let expect = if i < 20 { x[i] } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_round_trip() {
        let x: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin()).collect();
        let eng = FftEngine::<f32>::new(8);
        let back = eng.real_ifft(&eng.real_fft(&x));
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
