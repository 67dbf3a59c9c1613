//! Data-simulation primitives: mixing at an exact SNR, room-response
//! convolution, and random biquad coloration.
//!
//! All power arithmetic runs in f64 regardless of the sample type, which is
//! what keeps the achieved SNR inside 1e-6 dB of the request.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared sample value.
pub fn power<S: Scalar>(x: &[S]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| v.into_f64() * v.into_f64()).sum::<f64>() / x.len() as f64
}

pub fn rms<S: Scalar>(x: &[S]) -> f64 {
    power(x).sqrt()
}

/// Cycle `x` until it covers `len` samples.
pub fn loop_to_len<S: Scalar>(x: &[S], len: usize) -> Vec<S> {
    assert!(!x.is_empty());
    x.iter().copied().cycle().take(len).collect()
}

/// Scale the noise so `10*log10(P_speech / P_noise)` hits `snr_db`, then sum.
/// Noise shorter than the speech is looped, longer is truncated. Returns
/// (noisy, clean, scaled noise).
pub fn mix_at_snr<S: Scalar>(
    speech: &[S],
    noise: &[S],
    snr_db: f64,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    if speech.is_empty() || noise.is_empty() || power(speech) == 0.0 || power(noise) == 0.0 {
        return Err(Error::Data("mixing needs nonsilent speech and noise".to_string()));
    }
    let noise = loop_to_len(noise, speech.len());
    let p_s = power(speech);
    let p_n = power(&noise);
    let gain = (p_s / (p_n * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<S> = noise.iter().map(|&v| S::of_f64(v.into_f64() * gain)).collect();
    let noisy: Vec<S> =
        speech.iter().zip(scaled.iter()).map(|(&s, &n)| s + n).collect();
    Ok((noisy, speech.to_vec(), scaled))
}

/// Measured SNR in dB between a clean reference and an additive-noise track.
pub fn snr_db<S: Scalar>(clean: &[S], noise: &[S]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

/// Linear convolution with a room response, truncated to the dry length and
/// rescaled so the wet peak matches the dry peak. The rescale keeps SNR
/// targets meaningful after reverberation.
pub fn convolve_rir<S: Scalar>(speech: &[S], rir: &[S]) -> Result<Vec<S>> {
    if rir.is_empty() {
        return Err(Error::Data("empty room response".to_string()));
    }
    if rir.len() >= speech.len() {
        return Err(Error::Data(format!(
            "room response ({} taps) must be shorter than the signal ({} samples)",
            rir.len(),
            speech.len()
        )));
    }
    let mut wet = vec![0.0f64; speech.len()];
    for (n, w) in wet.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (k, &h) in rir.iter().enumerate() {
            if k > n {
                break;
            }
            acc += h.into_f64() * speech[n - k].into_f64();
        }
        *w = acc;
    }
    let dry_peak = speech.iter().fold(0.0f64, |m, &v| m.max(v.into_f64().abs()));
    let wet_peak = wet.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if wet_peak > 0.0 { dry_peak / wet_peak } else { 1.0 };
    Ok(wet.into_iter().map(|v| S::of_f64(v * scale)).collect())
}

/// Second-order section `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2]
///                               - a1 y[n-1] - a2 y[n-2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Both poles strictly inside the unit circle, by the triangle condition
    /// on the denominator z^2 + a1 z + a2.
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    pub fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::with_capacity(x.len());
        for &xi in x {
            let x0 = xi.into_f64();
            let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            out.push(S::of_f64(y0));
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
        }
        out
    }
}

pub const BIQUAD_COEFF_RANGE: f64 = 0.375;
const BIQUAD_MAX_DRAWS: usize = 16;

/// Draw b1, b2, a1, a2 uniformly from the fixed range with b0 = 1,
/// redrawing on instability (at most 16 times before giving up).
pub fn draw_biquad(rng: &mut ChaCha8Rng) -> Result<Biquad> {
    for _ in 0..BIQUAD_MAX_DRAWS {
        let mut c = || rng.gen_range(-BIQUAD_COEFF_RANGE..=BIQUAD_COEFF_RANGE);
        let bq = Biquad { b0: 1.0, b1: c(), b2: c(), a1: c(), a2: c() };
        if bq.is_stable() {
            return Ok(bq);
        }
    }
    Err(Error::Numerical("no stable biquad after 16 draws".to_string()))
}

/// Color a signal with a seeded random biquad.
pub fn biquad_augment<S: Scalar>(x: &[S], seed: u64) -> Result<Vec<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_biquad(&mut rng)?.apply(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_vec(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
    }

    #[test]
    fn zero_snr_equalizes_powers() {
        let s = noise_vec(1, 4000);
        let n = noise_vec(2, 4000);
        let (_, clean, scaled) = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!((power(&clean) / power(&scaled) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn twenty_db_means_hundredth_power() {
        let s = noise_vec(3, 4000);
        let n = noise_vec(4, 4000);
        let (_, clean, scaled) = mix_at_snr(&s, &n, 20.0).unwrap();
        let ratio = power(&clean) / power(&scaled);
        assert!((ratio - 100.0).abs() / 100.0 < 1e-6, "{ratio}");
    }

    #[test]
    fn achieved_snr_within_a_microdecibel() {
        let s = noise_vec(5, 16000);
        let n = noise_vec(6, 9000); // shorter: forces looping
        for target in [-5.0, 1.7, 20.0] {
            let (noisy, clean, scaled) = mix_at_snr(&s, &n, target).unwrap();
            let measured = snr_db(&clean, &scaled);
            assert!((measured - target).abs() < 1e-6, "target {target}, measured {measured}");
            for i in 0..noisy.len() {
                assert!((noisy[i] - (clean[i] + scaled[i])).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn silence_is_rejected() {
        let s = vec![0.0f32; 100];
        let n = noise_vec(7, 100);
        assert!(mix_at_snr(&s, &n, 0.0).is_err());
        assert!(mix_at_snr(&n, &s, 0.0).is_err());
        assert!(mix_at_snr(&n, &[], 0.0).is_err());
    }

    #[test]
    fn unit_delta_rir_is_identity() {
        let s = noise_vec(8, 500);
        let out = convolve_rir(&s, &[1.0f32]).unwrap();
        for (a, b) in s.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn delayed_delta_shifts() {
        let s: Vec<f32> = (0..64).map(|i| if i == 5 { 1.0 } else { 0.1 * (i as f32 * 0.3).sin() }).collect();
        let d = 7usize;
        let mut rir = vec![0.0f32; d + 1];
        rir[d] = 1.0;
        let out = convolve_rir(&s, &rir).unwrap();
        // peak is preserved, so the scale stays 1 and the shift is clean
        for n in d..s.len() {
            assert!((out[n] - s[n - d]).abs() < 1e-6, "at {n}");
        }
        for n in 0..d {
            assert!(out[n].abs() < 1e-6);
        }
    }

    #[test]
    fn two_tap_rir_matches_direct_sum() {
        let s = noise_vec(9, 64);
        let rir = [0.8f32, -0.3];
        let out = convolve_rir(&s, &rir).unwrap();
        // Direct summation oracle, including the peak rescale.
        let mut wet: Vec<f64> = (0..s.len())
            .map(|n| {
                let mut acc = 0.8f64 * s[n] as f64;
                if n >= 1 {
                    acc += -0.3f64 * s[n - 1] as f64;
                }
                acc
            })
            .collect();
        let dry_peak = s.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        let wet_peak = wet.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for w in wet.iter_mut() {
            *w *= dry_peak / wet_peak;
        }
        for (a, b) in out.iter().zip(wet.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rir_preconditions() {
        let s = noise_vec(10, 10);
        assert!(convolve_rir(&s, &[]).is_err());
        assert!(convolve_rir(&s, &noise_vec(11, 10)).is_err());
    }

    #[test]
    fn passthrough_biquad_is_identity() {
        let s = noise_vec(12, 100);
        let bq = Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: 0.0, a2: 0.0 };
        assert_eq!(bq.apply(&s), s);
    }

    #[test]
    fn biquad_impulse_response_matches_recursion() {
        let bq = Biquad { b0: 1.0, b1: 0.2, b2: -0.1, a1: 0.3, a2: 0.25 };
        let mut impulse = vec![0.0f64; 16];
        impulse[0] = 1.0;
        let got = bq.apply(&impulse);
        // Hand recursion of the difference equation.
        let mut expect = vec![0.0f64; 16];
        for n in 0..16 {
            let x0 = impulse[n];
            let x1 = if n >= 1 { impulse[n - 1] } else { 0.0 };
            let x2 = if n >= 2 { impulse[n - 2] } else { 0.0 };
            let y1 = if n >= 1 { expect[n - 1] } else { 0.0 };
            let y2 = if n >= 2 { expect[n - 2] } else { 0.0 };
            expect[n] = bq.b0 * x0 + bq.b1 * x1 + bq.b2 * x2 - bq.a1 * y1 - bq.a2 * y2;
        }
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let s = noise_vec(13, 256);
        let a = biquad_augment(&s, 99).unwrap();
        let b = biquad_augment(&s, 99).unwrap();
        let c = biquad_augment(&s, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn drawn_coefficients_are_in_range_and_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let bq = draw_biquad(&mut rng).unwrap();
            assert!(bq.is_stable());
            assert_eq!(bq.b0, 1.0);
            for c in [bq.b1, bq.b2, bq.a1, bq.a2] {
                assert!(c.abs() <= BIQUAD_COEFF_RANGE);
            }
        }
    }

    #[test]
    fn stability_triangle_edges() {
        assert!(!Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: 2.0, a2: 0.5 }.is_stable());
        assert!(!Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: 0.0, a2: 1.0 }.is_stable());
        assert!(Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: -1.2, a2: 0.5 }.is_stable());
    }
}
