//! Self-checks runnable from the command line: a compact version of the
//! oracle suite that guards the numerics at runtime, on whatever machine
//! the binary landed on. Each check returns a pass/fail plus a one-line
//! measurement.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complex::{cmatmul_value, cconv2d_value, CTensor, CVar};
use crate::dsp::stft::{analyze, synthesize, StftConfig};
use crate::dsp::synth::{harmonic_voice, lowpass_noise, white_noise};
use crate::losses::SnrLabelState;
use crate::model::{forward, init_model, leaf_params, Mode, ModelBuffers, ModelConfig};
use crate::pipeline::{enhance_offline, StreamEnhancer};
use crate::postproc::{exp_integral_e1, mmse_lsa_gain, SnrTrack, GAIN_FLOOR};
use crate::scalar::Scalar;
use crate::subband::{init_subband, merge_bands_value, split_bands_value, SubbandConfig};
use crate::tensor::gradcheck::{check_tape, DEFAULT_STEP, DEFAULT_TOL};
use crate::tensor::graph::Graph;
use crate::tensor::kernels::ConvSpec;
use crate::tensor::Tensor;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(detail) => CheckResult { name, passed: false, detail },
        }
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Finite differences through a composite expression and through the whole
/// tiny network in 64-bit.
fn check_gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let worst_ops = check_tape(
        |g, vars| {
            let p = g.matmul(vars[0], vars[1]).unwrap();
            let s = g.sigmoid(p);
            let t = g.sum_all(g.tanh(s));
            g.add(t, g.mean_all(g.exp(g.mul_scalar(vars[1], 0.3)))).unwrap()
        },
        &[a, b],
        12,
        3,
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
    .map_err(|e| format!("op expression: {e}"))?;

    let cfg = ModelConfig::tiny();
    let (pt, _) = init_model::<f64>(&cfg, 31);
    let mut tensors: Vec<Tensor<f64>> = Vec::new();
    pt.for_each(&mut |_, t| tensors.push(t.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let bins = cfg.net_bins + 1;
    tensors.push(rand_tensor(&[4, bins], &mut rng));
    tensors.push(rand_tensor(&[4, bins], &mut rng));
    let template = pt;
    let cfg2 = cfg.clone();
    let worst_model = check_tape(
        move |g, vars| {
            let mut i = 0;
            let p = template.map(&mut |_, _| {
                let v = vars[i];
                i += 1;
                v
            });
            let spec = CVar::new(vars[i], vars[i + 1]);
            let mut bufs = ModelBuffers::fresh(&cfg2);
            let out = forward(g, spec, &p, &mut bufs, &cfg2, Mode::Train).unwrap();
            let energy = g
                .add(
                    g.mean_all(g.mul(out.enhanced.re, out.enhanced.re).unwrap()),
                    g.mean_all(g.mul(out.enhanced.im, out.enhanced.im).unwrap()),
                )
                .unwrap();
            g.add(energy, g.mean_all(out.snr)).unwrap()
        },
        &tensors,
        1,
        37,
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
    .map_err(|e| format!("whole network: {e}"))?;
    Ok(format!("worst rel err: ops {worst_ops:.2e}, network {worst_model:.2e}"))
}

/// Complex matmul and conv against direct complex-arithmetic sums.
fn check_complex_blocks() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (m, k, n) = (3, 4, 2);
    let xr = rand_tensor(&[m, k], &mut rng);
    let xi = rand_tensor(&[m, k], &mut rng);
    let ar = rand_tensor(&[k, n], &mut rng);
    let ai = rand_tensor(&[k, n], &mut rng);
    let (yr, yi) = cmatmul_value(&xr, &xi, &ar, &ai).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let mut acc = Complex::new(0.0, 0.0);
            for l in 0..k {
                let x = Complex::new(xr.data()[i * k + l], xi.data()[i * k + l]);
                let a = Complex::new(ar.data()[l * n + j], ai.data()[l * n + j]);
                acc += x * a;
            }
            worst = worst
                .max((acc.re - yr.data()[i * n + j]).abs())
                .max((acc.im - yi.data()[i * n + j]).abs());
        }
    }

    // [1 channel in, 2 out] causal conv, stride 2 in frequency.
    let (t, f) = (5, 8);
    let (kt, kf) = (2, 3);
    let xr = rand_tensor(&[1, t, f], &mut rng);
    let xi = rand_tensor(&[1, t, f], &mut rng);
    let p = crate::complex::init_conv::<f64>(2, 1, kt, kf, &mut rng);
    let spec = ConvSpec { stride: (1, 2), pad_t: (1, 0), pad_f: (1, 1) };
    let (yr, yi) = cconv2d_value(&xr, &xi, &p, spec).map_err(|e| e.to_string())?;
    let (out_t, out_f) = (yr.shape()[1], yr.shape()[2]);
    let sample = |src: &Tensor<f64>, ti: i64, fi: i64| -> f64 {
        if ti < 0 || fi < 0 || ti >= t as i64 || fi >= f as i64 {
            0.0
        } else {
            src.data()[(ti as usize) * f + fi as usize]
        }
    };
    for o in 0..2usize {
        for ot in 0..out_t {
            for of in 0..out_f {
                let mut acc = Complex::new(
                    p.b_re.data()[o],
                    p.b_im.data()[o],
                );
                for dt in 0..kt {
                    for df in 0..kf {
                        let ti = ot as i64 + dt as i64 - 1;
                        let fi = (of * 2 + df) as i64 - 1;
                        let x = Complex::new(sample(&xr, ti, fi), sample(&xi, ti, fi));
                        let wi = (o * kt + dt) * kf + df;
                        let w = Complex::new(p.w_re.data()[wi], p.w_im.data()[wi]);
                        acc += x * w;
                    }
                }
                let at = (o * out_t + ot) * out_f + of;
                worst = worst
                    .max((acc.re - yr.data()[at]).abs())
                    .max((acc.im - yi.data()[at]).abs());
            }
        }
    }
    if worst < 1e-10 {
        Ok(format!("max abs err {worst:.2e}"))
    } else {
        Err(format!("max abs err {worst:.2e} (want < 1e-10)"))
    }
}

fn check_stft_round_trip() -> Result<String, String> {
    let cfg = StftConfig::default();
    let x: Vec<f32> = white_noise(16_000, 5, 1.0);
    let (re, im) = analyze(&x, &cfg).map_err(|e| e.to_string())?;
    let y = synthesize(&re, &im, &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f32;
    for i in cfg.frame..y.len() - cfg.frame {
        worst = worst.max((y[i] - x[i]).abs());
    }
    if worst < 1e-5 {
        Ok(format!("interior err {worst:.2e}"))
    } else {
        Err(format!("interior err {worst:.2e} (want < 1e-5)"))
    }
}

fn check_subband_identity() -> Result<String, String> {
    let cfg = SubbandConfig::new(4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = init_subband::<f64>(&cfg, 0.0, &mut rng);
    let re = rand_tensor(&[6, 32], &mut rng);
    let im = rand_tensor(&[6, 32], &mut rng);
    let (br, bi) = split_bands_value(&re, &im, &p, &cfg).map_err(|e| e.to_string())?;
    let (mr, mi) = merge_bands_value(&br, &bi, &p, &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..re.len() {
        worst = worst
            .max((mr.data()[i] - re.data()[i]).abs())
            .max((mi.data()[i] - im.data()[i]).abs());
    }
    if worst < 1e-6 {
        Ok(format!("identity err {worst:.2e}"))
    } else {
        Err(format!("identity err {worst:.2e} (want < 1e-6)"))
    }
}

/// Bump one input frame; earlier output frames must not move at all.
fn check_causality() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let (pt, bufs0) = init_model::<f64>(&cfg, 5);
    let t = 10;
    let bins = cfg.net_bins + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base_re = rand_tensor(&[t, bins], &mut rng);
    let base_im = rand_tensor(&[t, bins], &mut rng);
    let run = |re: Tensor<f64>, im: Tensor<f64>| -> Result<(Tensor<f64>, Tensor<f64>), String> {
        let g = Graph::new();
        let p = leaf_params(&g, &pt);
        let mut bufs = bufs0.clone();
        let out = forward(
            &g,
            CVar::new(g.constant(re), g.constant(im)),
            &p,
            &mut bufs,
            &cfg,
            Mode::Eval,
        )
        .map_err(|e| e.to_string())?;
        Ok((g.value(out.enhanced.re), g.value(out.enhanced.im)))
    };
    let (r0, i0) = run(base_re.clone(), base_im.clone())?;
    let bump = 6;
    let mut bumped = base_re.data().to_vec();
    for f in 0..bins {
        bumped[bump * bins + f] += 0.5;
    }
    let (r1, i1) = run(Tensor::new(vec![t, bins], bumped), base_im)?;
    for ti in 0..bump - 1 {
        for f in 0..bins {
            if r0.data()[ti * bins + f] != r1.data()[ti * bins + f]
                || i0.data()[ti * bins + f] != i1.data()[ti * bins + f]
            {
                return Err(format!(
                    "output frame {ti} moved when input frame {bump} was bumped"
                ));
            }
        }
    }
    let mut later_moved = false;
    for f in 0..bins {
        if r0.data()[bump * bins + f] != r1.data()[bump * bins + f] {
            later_moved = true;
        }
    }
    if !later_moved {
        return Err("perturbation never reached its own frame; check is vacuous".into());
    }
    Ok(format!("frames < {} untouched, one-frame look-ahead confirmed", bump - 1))
}

fn check_streaming() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let (params, bufs) = init_model::<f32>(&cfg, 3);
    let speech: Vec<f32> = harmonic_voice(1200, 16_000.0, 140.0, 5);
    let noise: Vec<f32> = lowpass_noise(1200, 6, 0.8, 0.1);
    let noisy: Vec<f32> = speech.iter().zip(&noise).map(|(&s, &n)| s + n).collect();
    let offline =
        enhance_offline(&params, &bufs, &cfg, &noisy, false).map_err(|e| e.to_string())?;
    let mut s = StreamEnhancer::new(cfg, params, bufs, false).map_err(|e| e.to_string())?;
    let mut streamed = Vec::new();
    for c in noisy.chunks(37) {
        streamed.extend(s.push(c).map_err(|e| e.to_string())?);
    }
    streamed.extend(s.finish().map_err(|e| e.to_string())?);
    if offline.len() != streamed.len() {
        return Err(format!("length {} vs {}", offline.len(), streamed.len()));
    }
    let worst = offline
        .iter()
        .zip(&streamed)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if worst < 1e-5 {
        Ok(format!("offline vs chunked max abs {worst:.2e}"))
    } else {
        Err(format!("offline vs chunked max abs {worst:.2e} (want < 1e-5)"))
    }
}

fn check_postproc() -> Result<String, String> {
    // Alternating series and continued fraction against pinned references.
    let refs = [
        (0.5f64, 0.5597735947761608f64),
        (1.0, 0.21938393439552029),
        (2.0, 0.04890051070806112),
    ];
    for (v, want) in refs {
        let got = exp_integral_e1(v);
        if (got - want).abs() > 1e-12 {
            return Err(format!("E1({v}) = {got}, want {want}"));
        }
    }
    let gain_ref = 0.5 * (0.5 * exp_integral_e1(1.0)).exp();
    let got = mmse_lsa_gain(1.0, 2.0);
    if (got - gain_ref).abs() > 1e-12 || (got - 0.558).abs() > 1e-3 {
        return Err(format!("gain(1,2) = {got}, want {gain_ref}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..500 {
        let xi = 10f64.powf(rng.gen_range(-6.0..4.0));
        let gamma = 10f64.powf(rng.gen_range(-6.0..4.0));
        let gain = mmse_lsa_gain(xi, gamma);
        if !(GAIN_FLOOR..=1.0).contains(&gain) {
            return Err(format!("gain({xi:.3e}, {gamma:.3e}) = {gain} out of bounds"));
        }
    }
    // Reset rule: fires exactly when the track's ratio exceeds 1.
    let mut track = SnrTrack::default();
    let script = [2e-3, 6e-3, 1.2e-2, 3.7e-2];
    let expect = [false, true, false, true];
    for (i, (&xi, &want)) in script.iter().zip(&expect).enumerate() {
        let fired = track.maybe_reset(xi);
        if fired != want {
            return Err(format!("reset step {i}: fired {fired}, want {want}"));
        }
    }
    Ok("E1, gain bounds and reset rule all hold".into())
}

fn check_labels() -> Result<String, String> {
    let mut state = SnrLabelState::<f64>::new();
    let first = Tensor::new(vec![4], vec![3.0, 9.0, 3.0, 9.0]);
    state.update(&first).map_err(|e| e.to_string())?;
    let second = Tensor::new(vec![2], vec![1.0, 3.0]);
    state.update(&second).map_err(|e| e.to_string())?;
    // Hand recursion: mu 6*0.99 + 2*0.01, sigma 3*0.99 + 1*0.01.
    let want_mu = 6.0 * 0.99 + 2.0 * 0.01;
    let want_sigma = 3.0 * 0.99 + 1.0 * 0.01;
    if (state.mu_hat - want_mu).abs() > 1e-12 || (state.sigma_hat - want_sigma).abs() > 1e-12 {
        return Err(format!(
            "moving stats ({}, {}) vs hand ({want_mu}, {want_sigma})",
            state.mu_hat, state.sigma_hat
        ));
    }
    let grid = Tensor::new(vec![5], vec![0.0, 3.0, 6.0, 9.0, 12.0]);
    let labels = state.normalize_compress(&grid).map_err(|e| e.to_string())?;
    for w in labels.data().windows(2) {
        if !(w[0] < w[1]) {
            return Err(format!("labels not monotone: {:?}", labels.data()));
        }
    }
    let extremes = Tensor::new(vec![2], vec![-200.0, 200.0]);
    let railed = state.normalize_compress(&extremes).map_err(|e| e.to_string())?;
    if railed.data().iter().chain(labels.data()).any(|&v| !(0.0 < v && v < 1.0)) {
        return Err(format!("labels escape (0,1): {:?}", railed.data()));
    }
    Ok("hand recursion exact, labels monotone in (0,1)".into())
}

/// Run every check; failures carry the measurement that broke.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        CheckResult::from("gradients", check_gradients()),
        CheckResult::from("complex-blocks", check_complex_blocks()),
        CheckResult::from("stft-round-trip", check_stft_round_trip()),
        CheckResult::from("subband-identity", check_subband_identity()),
        CheckResult::from("causality", check_causality()),
        CheckResult::from("streaming", check_streaming()),
        CheckResult::from("postproc", check_postproc()),
        CheckResult::from("snr-labels", check_labels()),
    ]
}
