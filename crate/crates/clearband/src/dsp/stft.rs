//! Short-time spectral analysis and synthesis.
//!
//! Frames of 320 samples (20 ms at 16 kHz) advance by 160 and are zero-padded
//! into a 512-point transform, giving 257 bins per frame. Both directions
//! apply the square root of a periodic Hann window, so the squared window
//! overlap-adds to exactly one at half-frame hop and interior samples
//! round-trip unchanged.

use num_complex::Complex;

use crate::dsp::fft::FftEngine;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { frame: 320, hop: 160, fft_size: 512 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames that fit fully inside `n` samples: 1 + (n - frame) / hop.
    pub fn num_frames(&self, n: usize) -> Option<usize> {
        if n < self.frame {
            None
        } else {
            Some(1 + (n - self.frame) / self.hop)
        }
    }

    pub fn synthesis_len(&self, t: usize) -> usize {
        assert!(t > 0);
        (t - 1) * self.hop + self.frame
    }

    fn validate(&self) -> Result<()> {
        if self.frame == 0
            || self.hop == 0
            || self.hop * 2 != self.frame
            || self.fft_size < self.frame
            || self.fft_size % 2 != 0
        {
            return Err(Error::Data(format!(
                "bad framing: frame {} hop {} fft {} (need hop = frame/2, fft >= frame, fft even)",
                self.frame, self.hop, self.fft_size
            )));
        }
        Ok(())
    }
}

/// Square root of the periodic Hann window. Its square satisfies
/// w2[n] + w2[n + len/2] == 1, which is what makes analysis+synthesis
/// windowing exact at half-frame hop.
pub fn sqrt_hann<S: Scalar>(len: usize) -> Vec<S> {
    let half = S::of_f64(0.5);
    (0..len)
        .map(|n| {
            let ang = S::of_f64(2.0) * S::PI() * S::of_usize(n) / S::of_usize(len);
            (half * (S::one() - ang.cos())).sqrt()
        })
        .collect()
}

/// Windowed spectra of `x`: a `[T, bins]` pair of (real, imag) tensors.
/// Samples past the last full frame are dropped.
pub fn analyze<S: Scalar>(x: &[S], cfg: &StftConfig) -> Result<(Tensor<S>, Tensor<S>)> {
    cfg.validate()?;
    let t_frames = cfg
        .num_frames(x.len())
        .ok_or_else(|| Error::Data(format!("{} samples < one frame of {}", x.len(), cfg.frame)))?;
    let eng = FftEngine::<S>::new(cfg.fft_size);
    let win = sqrt_hann::<S>(cfg.frame);
    let bins = cfg.bins();
    let mut re = vec![S::zero(); t_frames * bins];
    let mut im = vec![S::zero(); t_frames * bins];
    let mut buf = vec![S::zero(); cfg.frame];
    for t in 0..t_frames {
        for (m, b) in buf.iter_mut().enumerate() {
            *b = x[t * cfg.hop + m] * win[m];
        }
        let spec = eng.real_fft(&buf);
        for (k, c) in spec.iter().enumerate() {
            re[t * bins + k] = c.re;
            im[t * bins + k] = c.im;
        }
    }
    Ok((Tensor::new(vec![t_frames, bins], re), Tensor::new(vec![t_frames, bins], im)))
}

/// Overlap-add synthesis of `[T, bins]` spectra back to
/// `(T-1)*hop + frame` samples.
pub fn synthesize<S: Scalar>(re: &Tensor<S>, im: &Tensor<S>, cfg: &StftConfig) -> Result<Vec<S>> {
    cfg.validate()?;
    let bins = cfg.bins();
    if re.ndim() != 2 || re.shape() != im.shape() || re.shape()[1] != bins || re.shape()[0] == 0 {
        return Err(Error::shape(
            "synthesize",
            format!("matching [T, {bins}] pairs, T >= 1"),
            format!(
                "re {}, im {}",
                crate::tensor::fmt_shape(re.shape()),
                crate::tensor::fmt_shape(im.shape())
            ),
        ));
    }
    let t_frames = re.shape()[0];
    let eng = FftEngine::<S>::new(cfg.fft_size);
    let win = sqrt_hann::<S>(cfg.frame);
    let mut out = vec![S::zero(); cfg.synthesis_len(t_frames)];
    let mut spec = vec![Complex::new(S::zero(), S::zero()); bins];
    for t in 0..t_frames {
        for (k, c) in spec.iter_mut().enumerate() {
            *c = Complex::new(re.data()[t * bins + k], im.data()[t * bins + k]);
        }
        let frame = eng.real_ifft(&spec);
        for m in 0..cfg.frame {
            out[t * cfg.hop + m] = out[t * cfg.hop + m] + frame[m] * win[m];
        }
    }
    Ok(out)
}

/// Streaming counterpart of [`synthesize`]: each pushed frame yields the
/// next `hop` finished samples, and [`OlaState::finish`] drains the
/// `frame - hop` tail. The concatenation equals the offline output exactly.
pub struct OlaState<S: Scalar> {
    cfg: StftConfig,
    eng: FftEngine<S>,
    win: Vec<S>,
    tail: Vec<S>,
}

impl<S: Scalar> OlaState<S> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OlaState {
            eng: FftEngine::new(cfg.fft_size),
            win: sqrt_hann(cfg.frame),
            tail: vec![S::zero(); cfg.frame - cfg.hop],
            cfg,
        })
    }

    pub fn reset(&mut self) {
        self.tail.iter_mut().for_each(|v| *v = S::zero());
    }

    /// One `[bins]` spectrum row in, the next `hop` samples out.
    pub fn push_frame(&mut self, re: &[S], im: &[S]) -> Result<Vec<S>> {
        let bins = self.cfg.bins();
        if re.len() != bins || im.len() != bins {
            return Err(Error::shape(
                "ola frame",
                format!("[{bins}] rows"),
                format!("re {}, im {}", re.len(), im.len()),
            ));
        }
        let spec: Vec<Complex<S>> = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| Complex::new(r, i))
            .collect();
        let frame = self.eng.real_ifft(&spec);
        let overlap = self.cfg.frame - self.cfg.hop;
        let mut buf = vec![S::zero(); self.cfg.frame];
        buf[..overlap].copy_from_slice(&self.tail);
        for m in 0..self.cfg.frame {
            buf[m] = buf[m] + frame[m] * self.win[m];
        }
        let emit = buf[..self.cfg.hop].to_vec();
        self.tail.copy_from_slice(&buf[self.cfg.hop..]);
        Ok(emit)
    }

    /// Samples past the last hop boundary; resets the state.
    pub fn finish(&mut self) -> Vec<S> {
        let out = self.tail.clone();
        self.reset();
        out
    }
}

/// Adjoint of [`synthesize`]: maps a gradient over the output samples back to
/// gradients over the `[T, bins]` spectra. Per frame this is a forward
/// transform of the window-weighted gradient slice, scaled by 1/fft for the
/// unique bins and 2/fft for the mirrored ones.
pub fn synthesis_adjoint<S: Scalar>(
    g: &[S],
    t_frames: usize,
    cfg: &StftConfig,
) -> (Tensor<S>, Tensor<S>) {
    let bins = cfg.bins();
    assert_eq!(g.len(), cfg.synthesis_len(t_frames));
    let eng = FftEngine::<S>::new(cfg.fft_size);
    let win = sqrt_hann::<S>(cfg.frame);
    let inv_n = S::one() / S::of_usize(cfg.fft_size);
    let two = S::of_f64(2.0);
    let mut re = vec![S::zero(); t_frames * bins];
    let mut im = vec![S::zero(); t_frames * bins];
    let mut buf = vec![S::zero(); cfg.frame];
    for t in 0..t_frames {
        for (m, b) in buf.iter_mut().enumerate() {
            *b = g[t * cfg.hop + m] * win[m];
        }
        let spec = eng.real_fft(&buf);
        for (k, c) in spec.iter().enumerate() {
            let mult = if k == 0 || k == bins - 1 { inv_n } else { two * inv_n };
            re[t * bins + k] = c.re * mult;
            im[t * bins + k] = c.im * mult;
        }
    }
    (Tensor::new(vec![t_frames, bins], re), Tensor::new(vec![t_frames, bins], im))
}
