//! Fixed synthetic pairs for overfit and generalization demos, plus the
//! waveform-domain evaluation used to score them.

use crate::complex::CVar;
use crate::dsp::mix::mix_at_snr;
use crate::dsp::stft::{analyze, synthesize};
use crate::dsp::synth::{harmonic_voice, lowpass_noise, scale_to_rms};
use crate::dsp::wav::SAMPLE_RATE;
use crate::error::Result;
use crate::losses::si_snr_db;
use crate::model::{forward, Mode, ModelBuffers, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::graph::Graph;
use crate::tensor::Tensor;

use super::Utterance;

/// Mixing SNRs of the five demo pairs, in dB.
pub const TOY_SNRS_DB: [f64; 5] = [0.0, 2.5, 5.0, 7.5, 10.0];

/// Five deterministic voice-plus-noise pairs, one per entry of
/// `TOY_SNRS_DB`. Different `seed` values give a disjoint set with the same
/// makeup, which is how the held-out pairs are drawn.
pub fn toy_pairs<S: Scalar>(seconds: f64, seed: u64) -> Result<Vec<Utterance<S>>> {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    TOY_SNRS_DB
        .iter()
        .enumerate()
        .map(|(i, &snr)| {
            let tag = seed.wrapping_mul(31).wrapping_add(i as u64);
            let f0 = 105.0 + 27.0 * i as f64;
            let mut speech: Vec<S> = harmonic_voice(n, SAMPLE_RATE as f64, f0, tag);
            scale_to_rms(&mut speech, 0.1);
            let pole = 0.55 + 0.08 * i as f64;
            let noise: Vec<S> = lowpass_noise(n, tag.wrapping_add(1000), pole, 0.2);
            let (noisy, clean, noise) = mix_at_snr(&speech, &noise, snr)?;
            Ok(Utterance { noisy, clean, noise })
        })
        .collect()
}

/// Mean SI-SNR in dB of (a) the enhanced output and (b) the untouched noisy
/// input, both against the framed-and-resynthesized clean signal. The gap
/// between the two is the improvement the model buys.
pub fn eval_pairs<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    buffers: &ModelBuffers<S>,
    cfg: &ModelConfig,
    pairs: &[Utterance<S>],
) -> Result<(f64, f64)> {
    let stft = cfg.stft;
    let mut enhanced_sum = 0.0;
    let mut noisy_sum = 0.0;
    for u in pairs {
        let (nr, ni) = analyze(&u.noisy, &stft)?;
        let (cr, ci) = analyze(&u.clean, &stft)?;
        let reference = synthesize(&cr, &ci, &stft)?;
        let passthrough = synthesize(&nr, &ni, &stft)?;

        let g: Graph<S> = Graph::new();
        let p = params.map(&mut |_, t| g.constant(t.clone()));
        let spec = CVar::new(g.constant(nr), g.constant(ni));
        let mut bufs = buffers.clone();
        let out = forward(&g, spec, &p, &mut bufs, cfg, Mode::Eval)?;
        let est = synthesize(&g.value(out.enhanced.re), &g.value(out.enhanced.im), &stft)?;

        enhanced_sum += si_snr_db(&est, &reference)?;
        noisy_sum += si_snr_db(&passthrough, &reference)?;
    }
    let n = pairs.len() as f64;
    Ok((enhanced_sum / n, noisy_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mix::snr_db;
    use crate::model::init_model;

    #[test]
    fn pairs_are_deterministic_and_hit_their_snrs() {
        let a = toy_pairs::<f32>(0.1, 0).unwrap();
        let b = toy_pairs::<f32>(0.1, 0).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.noisy, y.noisy);
            assert_eq!(x.clean, y.clean);
        }
        for (i, u) in a.iter().enumerate() {
            assert_eq!(u.noisy.len(), 1600);
            let measured = snr_db(&u.clean, &u.noise);
            assert!(
                (measured - TOY_SNRS_DB[i]).abs() < 1e-6,
                "pair {i}: measured {measured} dB"
            );
        }

        let held_out = toy_pairs::<f32>(0.1, 1).unwrap();
        assert!(held_out[0].noisy != a[0].noisy);
    }

    #[test]
    fn eval_scores_a_fresh_model_near_the_noisy_baseline() {
        let cfg = ModelConfig::tiny();
        let (params, buffers) = init_model::<f32>(&cfg, 0);
        // Tiny framing, so shorten the clips to keep the test quick.
        let pairs: Vec<Utterance<f32>> = toy_pairs(0.05, 0).unwrap();
        let (enhanced, noisy) = eval_pairs(&params, &buffers, &cfg, &pairs).unwrap();
        assert!(enhanced.is_finite() && noisy.is_finite());
        // Untrained eval runs on unadapted normalization buffers, so the
        // output drifts from pass-through; it must still be signal-shaped,
        // not noise-shaped.
        assert!((enhanced - noisy).abs() < 20.0, "enhanced {enhanced}, noisy {noisy}");
        assert!(noisy > 0.0, "baseline should be positive at these SNRs: {noisy}");
    }
}
