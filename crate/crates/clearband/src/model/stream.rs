//! Frame-synchronous twin of the offline pass.
//!
//! [`Stream`] consumes spectra in chunks of any size and emits enhanced
//! frames that are IEEE-equal to the rows [`super::forward`] produces in
//! eval mode over the whole utterance. The final deconv layer reads one
//! future frame, so the engine holds back exactly that much: pushing the
//! first n frames emits n-1, every later push of n emits n, and
//! [`Stream::flush`] emits the last held frame.
//!
//! Equality holds because every stage here calls the same kernels on the
//! same windows of data in the same order; carried state only replaces
//! what the offline pass reads from earlier rows of its own tensors.

use crate::complex::conv::{cconv2d_value, ctconv2d_value};
use crate::complex::lstm::{cblstm_value, clinear_value, clstm_scan_value, CLstmState};
use crate::complex::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::subband::{merge_bands_value, split_bands_value, CausalNormState};
use crate::tensor::kernels::{self, ConvSpec};
use crate::tensor::{fmt_shape, Tensor};

use super::{deep_filter_frame, BnStats, CBn, ModelBuffers, ModelConfig, ModelParams, BN_EPS};

fn bn_plane_value<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
) -> Tensor<S> {
    let c = x.shape()[0];
    let inner = x.len() / c;
    let eps = S::of_f64(BN_EPS);
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        let m = mean.data()[ch];
        let d = (var.data()[ch] + eps).sqrt();
        let ga = gamma.data()[ch];
        let be = beta.data()[ch];
        for i in 0..inner {
            out[ch * inner + i] = (x.data()[ch * inner + i] - m) / d * ga + be;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn cbn_value<S: Scalar>(x: &CTensor<S>, p: &CBn<Tensor<S>>, stats: &BnStats<S>) -> CTensor<S> {
    CTensor::new(
        bn_plane_value(&x.re, &p.re.gamma, &p.re.beta, &stats.mean_re, &stats.var_re),
        bn_plane_value(&x.im, &p.im.gamma, &p.im.beta, &stats.mean_im, &stats.var_im),
    )
}

fn cprelu_value<S: Scalar>(x: &CTensor<S>, slope_re: &Tensor<S>, slope_im: &Tensor<S>) -> CTensor<S> {
    let plane = |t: &Tensor<S>, s: &Tensor<S>| {
        let c = t.shape()[0];
        let inner = t.len() / c;
        let mut out = vec![S::zero(); t.len()];
        for ch in 0..c {
            let a = s.data()[ch];
            for i in 0..inner {
                let v = t.data()[ch * inner + i];
                out[ch * inner + i] = if v > S::zero() { v } else { a * v };
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    CTensor::new(plane(&x.re, slope_re), plane(&x.im, slope_im))
}

fn ccat<S: Scalar>(a: &CTensor<S>, b: &CTensor<S>, axis: usize) -> Result<CTensor<S>> {
    Ok(CTensor::new(
        kernels::concat_axis(&[&a.re, &b.re], axis)?,
        kernels::concat_axis(&[&a.im, &b.im], axis)?,
    ))
}

fn cpermute<S: Scalar>(x: &CTensor<S>, perm: &[usize]) -> CTensor<S> {
    CTensor::new(kernels::permute(&x.re, perm), kernels::permute(&x.im, perm))
}

fn last_frame<S: Scalar>(x: &CTensor<S>) -> CTensor<S> {
    let t = x.shape()[1];
    CTensor::new(
        kernels::slice_axis(&x.re, 1, t - 1, 1),
        kernels::slice_axis(&x.im, 1, t - 1, 1),
    )
}

fn time_slice<S: Scalar>(x: &CTensor<S>, t: usize) -> CTensor<S> {
    let (a, b) = (x.shape()[0], x.shape()[2]);
    CTensor::new(
        kernels::slice_axis(&x.re, 1, t, 1).reshaped(&[a, b]).expect("contiguous slice"),
        kernels::slice_axis(&x.im, 1, t, 1).reshaped(&[a, b]).expect("contiguous slice"),
    )
}

/// Streaming state for one audio stream. Create once per stream, feed
/// spectra through [`push`](Stream::push), finish with
/// [`flush`](Stream::flush); [`reset`](Stream::reset) prepares the same
/// allocation for a new stream.
#[derive(Debug, Clone)]
pub struct Stream<S: Scalar> {
    cfg: ModelConfig,
    params: ModelParams<Tensor<S>>,
    bufs: ModelBuffers<S>,
    norm: CausalNormState<S>,
    /// Last input frame seen by each encoder layer.
    enc_cache: Vec<CTensor<S>>,
    /// Carried time-scan state, one batch row per bottleneck frequency.
    t_state: CLstmState<S>,
    /// Last concatenated input frame of each deconv layer (the output
    /// layer's entry holds the frame the look-ahead still owes).
    dec_cache: Vec<CTensor<S>>,
    /// Raw band frames still needed by the multi-tap filter, oldest first.
    band_hist: Vec<CTensor<S>>,
    started: bool,
    flushed: bool,
    frames_in: usize,
    frames_out: usize,
}

impl<S: Scalar> Stream<S> {
    pub fn new(
        cfg: ModelConfig,
        params: ModelParams<Tensor<S>>,
        bufs: ModelBuffers<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.depth();
        if params.enc.len() != depth
            || params.path.len() != depth
            || params.dec.len() != depth - 1
            || bufs.enc.len() != depth
            || bufs.path.len() != depth
            || bufs.dec.len() != depth - 1
        {
            return Err(Error::Config(format!(
                "parameter tree does not match a depth-{depth} config"
            )));
        }
        let mut s = Stream {
            cfg,
            params,
            bufs,
            norm: CausalNormState::new(0),
            enc_cache: Vec::new(),
            t_state: CLstmState::zero(1, 1),
            dec_cache: Vec::new(),
            band_hist: Vec::new(),
            started: false,
            flushed: false,
            frames_in: 0,
            frames_out: 0,
        };
        s.reset();
        Ok(s)
    }

    pub fn reset(&mut self) {
        let cfg = &self.cfg;
        let depth = cfg.depth();
        self.norm = CausalNormState::new(cfg.bands);
        self.enc_cache = (0..depth)
            .map(|l| CTensor::zeros(&[cfg.enc_in_channels(l), 1, cfg.enc_in_freq(l)]))
            .collect();
        self.t_state = CLstmState::zero(cfg.enc_in_freq(depth), cfg.t_hidden);
        self.dec_cache = (0..depth)
            .map(|i| {
                CTensor::zeros(&[2 * cfg.channels[depth - 1 - i], 1, cfg.enc_in_freq(depth - i)])
            })
            .collect();
        self.band_hist.clear();
        self.started = false;
        self.flushed = false;
        self.frames_in = 0;
        self.frames_out = 0;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Frames received but not yet emitted; equals the look-ahead depth
    /// whenever at least one frame has been pushed and flush has not run.
    pub fn frames_pending(&self) -> usize {
        self.frames_in - self.frames_out
    }

    /// Audio the engine is behind real time: one analysis frame to fill the
    /// first window, one hop to the next frame boundary, one hop per frame
    /// of look-ahead.
    pub fn latency_samples(&self) -> usize {
        self.cfg.stft.frame + self.cfg.stft.hop + self.cfg.lookahead_frames * self.cfg.stft.hop
    }

    /// Process `[n, bins]` new spectrum frames, returning the enhanced
    /// frames that are now final: `[n-1, bins]` on the first call, `[n,
    /// bins]` afterwards.
    pub fn push(&mut self, spec: &CTensor<S>) -> Result<CTensor<S>> {
        if self.flushed {
            return Err(Error::Stream("push after flush; reset the stream first".into()));
        }
        let cfg = self.cfg.clone();
        let bins = cfg.net_bins + 1;
        let shape = spec.shape();
        if shape.len() != 2 || shape[1] != bins {
            return Err(Error::shape("stream input", format!("[n, {bins}]"), fmt_shape(shape)));
        }
        let n = shape[0];
        if n == 0 {
            return Ok(CTensor::zeros(&[0, bins]));
        }
        let depth = cfg.depth();
        let sub = cfg.subband();
        let pf = (cfg.kernel_f - 1) / 2;

        let re = kernels::slice_axis(&spec.re, 1, 1, cfg.net_bins);
        let im = kernels::slice_axis(&spec.im, 1, 1, cfg.net_bins);
        let (braw_re, braw_im) = split_bands_value(&re, &im, &self.params.subband, &sub)?;
        let braw = CTensor::new(braw_re, braw_im);

        let normed = self.norm.apply(&braw, &self.params.subband);

        let mut x = normed;
        let mut enc_outs = Vec::with_capacity(depth);
        for l in 0..depth {
            let ext = ccat(&self.enc_cache[l], &x, 1)?;
            self.enc_cache[l] = last_frame(&x);
            let spec_c = ConvSpec { stride: (1, cfg.stride_f), pad_t: (0, 0), pad_f: (pf, pf) };
            let (yr, yi) = cconv2d_value(&ext.re, &ext.im, &self.params.enc[l].conv, spec_c)?;
            let y = cbn_value(&CTensor::new(yr, yi), &self.params.enc[l].bn, &self.bufs.enc[l]);
            x = cprelu_value(&y, &self.params.enc[l].slope_re, &self.params.enc[l].slope_im);
            enc_outs.push(x.clone());
        }

        let u = cpermute(&x, &[2, 1, 0]);
        let h = cblstm_value(&u, &self.params.tf.f_fwd, &self.params.tf.f_bwd)?;
        let of = clinear_value(&h, &self.params.tf.clp_f)?;
        let tseq = cpermute(&of, &[1, 0, 2]);
        let ht = clstm_scan_value(&tseq, &self.params.tf.t_net, &mut self.t_state)?;
        let ot = clinear_value(&ht, &self.params.tf.clp_t)?;
        let mut d = cpermute(&ot, &[2, 0, 1]);

        let path_spec = ConvSpec { stride: (1, 1), pad_t: (0, 0), pad_f: (0, 0) };
        let mut skips = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let pw = &self.params.path[i];
            let (yr, yi) = cconv2d_value(&enc_outs[i].re, &enc_outs[i].im, &pw.conv, path_spec)?;
            skips.push(cbn_value(&CTensor::new(yr, yi), &pw.bn, &self.bufs.path[i]));
        }

        let dec_spec = ConvSpec { stride: (1, cfg.stride_f), pad_t: (1, 1), pad_f: (pf, pf) };
        for i in 0..depth - 1 {
            let cat = ccat(&d, &skips[i], 0)?;
            let ext = ccat(&self.dec_cache[i], &cat, 1)?;
            self.dec_cache[i] = last_frame(&cat);
            let out_f = cfg.enc_in_freq(depth - 1 - i);
            let (yr, yi) =
                ctconv2d_value(&ext.re, &ext.im, &self.params.dec[i].conv, dec_spec, n, out_f)?;
            let y = cbn_value(&CTensor::new(yr, yi), &self.params.dec[i].bn, &self.bufs.dec[i]);
            d = cprelu_value(&y, &self.params.dec[i].slope_re, &self.params.dec[i].slope_im);
        }
        let cat = ccat(&d, &skips[depth - 1], 0)?;
        let ext = ccat(&self.dec_cache[depth - 1], &cat, 1)?;
        self.dec_cache[depth - 1] = last_frame(&cat);
        let (mr, mi) =
            ctconv2d_value(&ext.re, &ext.im, &self.params.out, dec_spec, n, cfg.band_width())?;
        // rows of `mask` are filter taps for output times g0-1 .. g0+n-1
        let mask = CTensor::new(mr, mi);

        let skip_first = usize::from(!self.started);
        let emit = n - skip_first;
        let hist_len = self.band_hist.len();
        let mut timeline = std::mem::take(&mut self.band_hist);
        for ti in 0..n {
            timeline.push(time_slice(&braw, ti));
        }

        let w = cfg.band_width();
        let out = if emit == 0 {
            CTensor::zeros(&[0, bins])
        } else {
            let mut filt_re = vec![S::zero(); cfg.bands * emit * w];
            let mut filt_im = vec![S::zero(); cfg.bands * emit * w];
            for e in 0..emit {
                let mask_frame = {
                    let idx = skip_first + e;
                    let c = cfg.bands * cfg.taps();
                    CTensor::new(
                        kernels::slice_axis(&mask.re, 1, idx, 1).reshaped(&[c, w])?,
                        kernels::slice_axis(&mask.im, 1, idx, 1).reshaped(&[c, w])?,
                    )
                };
                // index of the emitted frame's own band row in `timeline`:
                // time (g0 + skip_first + e - 1), timeline starts at g0 - hist_len
                let p = hist_len + skip_first + e - 1;
                let mut recent: Vec<&CTensor<S>> = Vec::with_capacity(cfg.df_taps_time);
                for back in 0..cfg.df_taps_time {
                    match p.checked_sub(back) {
                        Some(q) => recent.push(&timeline[q]),
                        None => break,
                    }
                }
                let y = deep_filter_frame(&mask_frame, &recent, &cfg);
                for k in 0..cfg.bands {
                    for f in 0..w {
                        filt_re[(k * emit + e) * w + f] = y.re.data()[k * w + f];
                        filt_im[(k * emit + e) * w + f] = y.im.data()[k * w + f];
                    }
                }
            }
            let (enh_re, enh_im) = merge_bands_value(
                &Tensor::new(vec![cfg.bands, emit, w], filt_re),
                &Tensor::new(vec![cfg.bands, emit, w], filt_im),
                &self.params.subband,
                &sub,
            )?;
            let widen = |t: &Tensor<S>| {
                Tensor::from_fn(&[emit, bins], |i| {
                    let (ti, f) = (i / bins, i % bins);
                    if f == 0 {
                        S::zero()
                    } else {
                        t.data()[ti * cfg.net_bins + f - 1]
                    }
                })
            };
            CTensor::new(widen(&enh_re), widen(&enh_im))
        };

        let keep = cfg.df_taps_time.min(timeline.len());
        self.band_hist = timeline.split_off(timeline.len() - keep);
        self.started = true;
        self.frames_in += n;
        self.frames_out += emit;
        Ok(out)
    }

    /// Emit the final frame once the input is exhausted.
    pub fn flush(&mut self) -> Result<CTensor<S>> {
        if self.flushed {
            return Err(Error::Stream("stream already flushed".into()));
        }
        if self.frames_in == 0 {
            return Err(Error::Stream("flush before any input".into()));
        }
        let cfg = self.cfg.clone();
        let bins = cfg.net_bins + 1;
        let w = cfg.band_width();
        let pf = (cfg.kernel_f - 1) / 2;
        let sub = cfg.subband();
        // the output layer's last input frame provides everything the final
        // output frame reads; the future tap falls off the end exactly as
        // it does offline
        let ext = self.dec_cache[cfg.depth() - 1].clone();
        let spec_c = ConvSpec { stride: (1, cfg.stride_f), pad_t: (1, 0), pad_f: (pf, pf) };
        let (mr, mi) = ctconv2d_value(&ext.re, &ext.im, &self.params.out, spec_c, 1, w)?;
        let c = cfg.bands * cfg.taps();
        let mask_frame = CTensor::new(mr.reshaped(&[c, w])?, mi.reshaped(&[c, w])?);
        let p = self.band_hist.len() - 1;
        let mut recent: Vec<&CTensor<S>> = Vec::with_capacity(cfg.df_taps_time);
        for back in 0..cfg.df_taps_time {
            match p.checked_sub(back) {
                Some(q) => recent.push(&self.band_hist[q]),
                None => break,
            }
        }
        let y = deep_filter_frame(&mask_frame, &recent, &cfg);
        let (enh_re, enh_im) = merge_bands_value(
            &Tensor::new(vec![cfg.bands, 1, w], y.re.data().to_vec()),
            &Tensor::new(vec![cfg.bands, 1, w], y.im.data().to_vec()),
            &self.params.subband,
            &sub,
        )?;
        let widen = |t: &Tensor<S>| {
            Tensor::from_fn(&[1, bins], |i| if i == 0 { S::zero() } else { t.data()[i - 1] })
        };
        self.flushed = true;
        self.frames_out += 1;
        Ok(CTensor::new(widen(&enh_re), widen(&enh_im)))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::{forward, init_model, leaf_params, Mode};
    use super::*;
    use crate::complex::CVar;
    use crate::tensor::graph::Graph;

    fn rand_spec(t: usize, bins: usize, seed: u64) -> CTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CTensor::new(
            Tensor::from_fn(&[t, bins], |_| rng.gen_range(-1.0..1.0)),
            Tensor::from_fn(&[t, bins], |_| rng.gen_range(-1.0..1.0)),
        )
    }

    /// Offline eval forward over the whole spectrum.
    fn offline(
        cfg: &ModelConfig,
        params: &ModelParams<Tensor<f64>>,
        bufs: &ModelBuffers<f64>,
        spec: &CTensor<f64>,
    ) -> CTensor<f64> {
        let g = Graph::new();
        let p = leaf_params(&g, params);
        let mut b = bufs.clone();
        let out = forward(
            &g,
            CVar::new(g.leaf(spec.re.clone(), false), g.leaf(spec.im.clone(), false)),
            &p,
            &mut b,
            cfg,
            Mode::Eval,
        )
        .unwrap();
        CTensor::new(g.value(out.enhanced.re), g.value(out.enhanced.im))
    }

    /// Buffers moved off their fresh values so eval mode has something to
    /// disagree about if the twins diverge.
    fn warmed(
        cfg: &ModelConfig,
        params: &ModelParams<Tensor<f64>>,
        bufs: &ModelBuffers<f64>,
        seed: u64,
    ) -> ModelBuffers<f64> {
        let g = Graph::new();
        let p = leaf_params(&g, params);
        let mut b = bufs.clone();
        let spec = rand_spec(12, cfg.net_bins + 1, seed);
        let _ = forward(
            &g,
            CVar::new(g.leaf(spec.re, false), g.leaf(spec.im, false)),
            &p,
            &mut b,
            cfg,
            Mode::Train,
        )
        .unwrap();
        b
    }

    fn rows(spec: &CTensor<f64>, start: usize, len: usize) -> CTensor<f64> {
        CTensor::new(
            kernels::slice_axis(&spec.re, 0, start, len),
            kernels::slice_axis(&spec.im, 0, start, len),
        )
    }

    fn run_chunked(stream: &mut Stream<f64>, spec: &CTensor<f64>, sizes: &[usize]) -> CTensor<f64> {
        let t = spec.shape()[0];
        assert_eq!(sizes.iter().sum::<usize>(), t);
        let mut outs_re = Vec::new();
        let mut outs_im = Vec::new();
        let mut at = 0;
        for &n in sizes {
            let out = stream.push(&rows(spec, at, n)).unwrap();
            at += n;
            if out.shape()[0] > 0 {
                outs_re.push(out.re);
                outs_im.push(out.im);
            }
        }
        let last = stream.flush().unwrap();
        outs_re.push(last.re);
        outs_im.push(last.im);
        let re_refs: Vec<&Tensor<f64>> = outs_re.iter().collect();
        let im_refs: Vec<&Tensor<f64>> = outs_im.iter().collect();
        CTensor::new(
            kernels::concat_axis(&re_refs, 0).unwrap(),
            kernels::concat_axis(&im_refs, 0).unwrap(),
        )
    }

    #[test]
    fn streaming_reproduces_offline_bit_for_bit() {
        let cfg = ModelConfig::tiny();
        let (params, bufs0) = init_model::<f64>(&cfg, 21);
        let bufs = warmed(&cfg, &params, &bufs0, 77);
        let t = 17;
        let spec = rand_spec(t, cfg.net_bins + 1, 5);
        let want = offline(&cfg, &params, &bufs, &spec);

        for sizes in [vec![17], vec![1; 17], vec![2, 5, 1, 3, 4, 2]] {
            let mut stream = Stream::new(cfg.clone(), params.clone(), bufs.clone()).unwrap();
            let got = run_chunked(&mut stream, &spec, &sizes);
            assert_eq!(got.shape(), &[t, cfg.net_bins + 1]);
            assert_eq!(want.re.max_abs_diff(&got.re), 0.0, "chunks {sizes:?}");
            assert_eq!(want.im.max_abs_diff(&got.im), 0.0, "chunks {sizes:?}");
        }
    }

    #[test]
    fn emission_counts_and_pending_depth() {
        let cfg = ModelConfig::tiny();
        let (params, bufs) = init_model::<f64>(&cfg, 2);
        let mut stream = Stream::new(cfg.clone(), params, bufs).unwrap();
        let spec = rand_spec(6, cfg.net_bins + 1, 3);

        let first = stream.push(&rows(&spec, 0, 4)).unwrap();
        assert_eq!(first.shape()[0], 3);
        assert_eq!(stream.frames_pending(), 1);
        let second = stream.push(&rows(&spec, 4, 2)).unwrap();
        assert_eq!(second.shape()[0], 2);
        assert_eq!(stream.frames_pending(), 1);
        let last = stream.flush().unwrap();
        assert_eq!(last.shape()[0], 1);
        assert_eq!(stream.frames_pending(), 0);
        assert!(stream.push(&rows(&spec, 0, 1)).is_err());
        assert!(stream.flush().is_err());
    }

    #[test]
    fn single_frame_start_defers_everything() {
        let cfg = ModelConfig::tiny();
        let (params, bufs) = init_model::<f64>(&cfg, 4);
        let spec = rand_spec(1, cfg.net_bins + 1, 6);
        let mut stream = Stream::new(cfg.clone(), params.clone(), bufs.clone()).unwrap();
        let none = stream.push(&spec).unwrap();
        assert_eq!(none.shape(), &[0, cfg.net_bins + 1]);
        let only = stream.flush().unwrap();
        let want = offline(&cfg, &params, &bufs, &spec);
        assert_eq!(want.re.max_abs_diff(&only.re), 0.0);
        assert_eq!(want.im.max_abs_diff(&only.im), 0.0);
    }

    #[test]
    fn reset_replays_identically() {
        let cfg = ModelConfig::tiny();
        let (params, bufs) = init_model::<f64>(&cfg, 8);
        let spec = rand_spec(9, cfg.net_bins + 1, 10);
        let mut stream = Stream::new(cfg.clone(), params, bufs).unwrap();
        let a = run_chunked(&mut stream, &spec, &[4, 5]);
        stream.reset();
        let b = run_chunked(&mut stream, &spec, &[4, 5]);
        assert_eq!(a.re.max_abs_diff(&b.re), 0.0);
        assert_eq!(a.im.max_abs_diff(&b.im), 0.0);
    }

    #[test]
    fn latency_budget_is_forty_milliseconds_at_full_size() {
        let cfg = ModelConfig::full();
        let (params, bufs) = init_model::<f32>(&cfg, 0);
        let stream = Stream::new(cfg, params, bufs).unwrap();
        assert_eq!(stream.latency_samples(), 640);
        let ms = stream.latency_samples() as f64 / 16_000.0 * 1000.0;
        assert_eq!(ms, 40.0);
    }

    #[test]
    fn flush_without_input_is_an_error() {
        let cfg = ModelConfig::tiny();
        let (params, bufs) = init_model::<f64>(&cfg, 1);
        let mut stream = Stream::new(cfg, params, bufs).unwrap();
        assert!(stream.flush().is_err());
    }
}
