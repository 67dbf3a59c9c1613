//! Deterministic synthetic signals for tests and the toy trainer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

pub fn tone<S: Scalar>(n: usize, sample_rate: f64, freq: f64, amp: f64) -> Vec<S> {
    (0..n)
        .map(|i| S::of_f64(amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate).sin()))
        .collect()
}

/// Voiced-speech stand-in: a handful of harmonics with 1/h rolloff, slow
/// vibrato on the fundamental and a syllable-rate amplitude envelope.
/// Fully determined by the seed.
pub fn harmonic_voice<S: Scalar>(n: usize, sample_rate: f64, f0: f64, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmonics = 8;
    let phases: Vec<f64> =
        (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI)).collect();
    let vib_rate = rng.gen_range(4.0..7.0);
    let env_rate = rng.gen_range(2.0..4.0);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sample_rate;
        let f = f0 * (1.0 + 0.01 * (two_pi * vib_rate * t).sin());
        phase += two_pi * f / sample_rate;
        let env = 0.55 + 0.45 * (two_pi * env_rate * t).sin();
        let mut s = 0.0;
        for (h, &ph) in phases.iter().enumerate() {
            s += ((h + 1) as f64 * phase + ph).sin() / (h + 1) as f64;
        }
        out.push(S::of_f64(0.25 * env * s));
    }
    out
}

pub fn white_noise<S: Scalar>(n: usize, seed: u64, amp: f64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| S::of_f64(rng.gen_range(-amp..amp))).collect()
}

/// White noise through a one-pole lowpass; `pole` in [0, 1) sets the tilt.
pub fn lowpass_noise<S: Scalar>(n: usize, seed: u64, pole: f64, amp: f64) -> Vec<S> {
    assert!((0.0..1.0).contains(&pole));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.gen_range(-1.0..1.0);
        state = pole * state + (1.0 - pole) * w;
        out.push(state);
    }
    // unit peak, then requested amplitude
    let peak = out.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    out.into_iter().map(|v| S::of_f64(v / peak * amp)).collect()
}

pub fn scale_to_rms<S: Scalar>(x: &mut [S], target_rms: f64) {
    let cur = crate::dsp::mix::rms(x);
    if cur == 0.0 {
        return;
    }
    let g = S::of_f64(target_rms / cur);
    for v in x.iter_mut() {
        *v = *v * g;
    }
}
