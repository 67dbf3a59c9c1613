//! Waveform-in, waveform-out enhancement: the offline path and its chunked
//! twin with fixed algorithmic latency. Both share the exact analysis,
//! network, gain and synthesis arithmetic, so their outputs agree sample
//! for sample.

use std::collections::VecDeque;

use crate::complex::{CTensor, CVar};
use crate::dsp::fft::FftEngine;
use crate::dsp::stft::{analyze, sqrt_hann, synthesize, OlaState, StftConfig};
use crate::error::{Error, Result};
use crate::model::stream::Stream;
use crate::model::{forward, Mode, ModelBuffers, ModelConfig, ModelParams};
use crate::postproc::PostFilter;
use crate::scalar::Scalar;
use crate::tensor::graph::Graph;
use crate::tensor::Tensor;

/// Whole-utterance enhancement. `postproc` switches the statistical gain
/// stage that runs between the network and synthesis. Input shorter than
/// one analysis window is an error; samples past the last full window are
/// dropped, matching the chunked path.
pub fn enhance_offline<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    buffers: &ModelBuffers<S>,
    cfg: &ModelConfig,
    wave: &[S],
    postproc: bool,
) -> Result<Vec<S>> {
    let stft = cfg.stft;
    let (in_re, in_im) = analyze(wave, &stft)?;
    let g: Graph<S> = Graph::new();
    let p = params.map(&mut |_, t| g.constant(t.clone()));
    let mut bufs = buffers.clone();
    let spec = CVar::new(g.constant(in_re.clone()), g.constant(in_im.clone()));
    let out = forward(&g, spec, &p, &mut bufs, cfg, Mode::Eval)?;
    let (mut er, mut ei) = (g.value(out.enhanced.re), g.value(out.enhanced.im));
    if postproc {
        let (pr, pi) = PostFilter::new().push(&er, &ei, &in_re, &in_im)?;
        er = pr;
        ei = pi;
    }
    synthesize(&er, &ei, &stft)
}

/// Chunked enhancement with the same arithmetic as [`enhance_offline`].
/// Push arbitrary-size sample chunks, collect enhanced samples as they
/// become final, then call `finish` for the tail. The output lags the input
/// by `latency_samples()`.
pub struct StreamEnhancer<S: Scalar> {
    stream: Stream<S>,
    post: Option<PostFilter>,
    ola: OlaState<S>,
    eng: FftEngine<S>,
    win: Vec<S>,
    stft: StftConfig,
    /// Input samples not yet covered by a full analysis window.
    pending: Vec<S>,
    /// Input spectra waiting for their enhanced twin; the gain stage needs
    /// the pair aligned frame by frame.
    in_rows: VecDeque<(Vec<S>, Vec<S>)>,
    finished: bool,
}

impl<S: Scalar> StreamEnhancer<S> {
    pub fn new(
        cfg: ModelConfig,
        params: ModelParams<Tensor<S>>,
        buffers: ModelBuffers<S>,
        postproc: bool,
    ) -> Result<Self> {
        let stft = cfg.stft;
        Ok(StreamEnhancer {
            stream: Stream::new(cfg, params, buffers)?,
            post: postproc.then(PostFilter::new),
            ola: OlaState::new(stft)?,
            eng: FftEngine::new(stft.fft_size),
            win: sqrt_hann(stft.frame),
            stft,
            pending: Vec::new(),
            in_rows: VecDeque::new(),
            finished: false,
        })
    }

    /// Samples of algorithmic delay between input and output: one analysis
    /// window to fill, one hop to the next frame boundary, one hop per
    /// frame of look-ahead.
    pub fn latency_samples(&self) -> usize {
        self.stream.latency_samples()
    }

    pub fn config(&self) -> &ModelConfig {
        self.stream.config()
    }

    /// Analysis of every full window now available; consumed samples leave
    /// `pending`, the overlap stays.
    fn drain_frames(&mut self) -> Option<CTensor<S>> {
        let (frame, hop) = (self.stft.frame, self.stft.hop);
        if self.pending.len() < frame {
            return None;
        }
        let n = 1 + (self.pending.len() - frame) / hop;
        let bins = self.stft.bins();
        let mut re = vec![S::zero(); n * bins];
        let mut im = vec![S::zero(); n * bins];
        let mut buf = vec![S::zero(); frame];
        for t in 0..n {
            for (m, b) in buf.iter_mut().enumerate() {
                *b = self.pending[t * hop + m] * self.win[m];
            }
            for (k, c) in self.eng.real_fft(&buf).iter().enumerate() {
                re[t * bins + k] = c.re;
                im[t * bins + k] = c.im;
            }
            self.in_rows.push_back((
                re[t * bins..(t + 1) * bins].to_vec(),
                im[t * bins..(t + 1) * bins].to_vec(),
            ));
        }
        self.pending.drain(..n * hop);
        Some(CTensor::new(Tensor::new(vec![n, bins], re), Tensor::new(vec![n, bins], im)))
    }

    /// Run emitted network frames through the gain stage (when on) and
    /// overlap-add, returning finished samples.
    fn emit(&mut self, frames: CTensor<S>) -> Result<Vec<S>> {
        let n = frames.shape()[0];
        if n == 0 {
            return Ok(Vec::new());
        }
        let bins = frames.shape()[1];
        let (mut er, mut ei) = (frames.re, frames.im);
        if let Some(post) = &mut self.post {
            let m = self.in_rows.len();
            if m < n {
                return Err(Error::Stream(format!(
                    "gain stage starves: {n} enhanced frames but {m} queued inputs"
                )));
            }
            let mut ir = vec![S::zero(); n * bins];
            let mut ii = vec![S::zero(); n * bins];
            for t in 0..n {
                let (r, i) = self.in_rows.pop_front().expect("length checked");
                ir[t * bins..(t + 1) * bins].copy_from_slice(&r);
                ii[t * bins..(t + 1) * bins].copy_from_slice(&i);
            }
            let shape = vec![n, bins];
            let (pr, pi) = post.push(
                &er,
                &ei,
                &Tensor::new(shape.clone(), ir),
                &Tensor::new(shape, ii),
            )?;
            er = pr;
            ei = pi;
        } else {
            for _ in 0..n.min(self.in_rows.len()) {
                self.in_rows.pop_front();
            }
        }
        let mut out = Vec::with_capacity(n * self.stft.hop);
        for t in 0..n {
            let row = t * bins..(t + 1) * bins;
            out.extend(self.ola.push_frame(&er.data()[row.clone()], &ei.data()[row])?);
        }
        Ok(out)
    }

    /// Feed a chunk of input samples; returns every output sample that is
    /// final. Chunks may be any size, including empty.
    pub fn push(&mut self, chunk: &[S]) -> Result<Vec<S>> {
        if self.finished {
            return Err(Error::Stream("push after finish".into()));
        }
        self.pending.extend_from_slice(chunk);
        match self.drain_frames() {
            None => Ok(Vec::new()),
            Some(spec) => {
                let ready = self.stream.push(&spec)?;
                self.emit(ready)
            }
        }
    }

    /// Flush the look-ahead and the overlap-add tail. Input samples that
    /// never filled a window are dropped, matching the offline path.
    pub fn finish(&mut self) -> Result<Vec<S>> {
        if self.finished {
            return Err(Error::Stream("stream already finished".into()));
        }
        self.finished = true;
        let last = self.stream.flush()?;
        let mut out = self.emit(last)?;
        out.extend(self.ola.finish());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mix::mix_at_snr;
    use crate::dsp::synth::{harmonic_voice, lowpass_noise};
    use crate::model::init_model;

    fn setup() -> (ModelConfig, ModelParams<Tensor<f32>>, ModelBuffers<f32>, Vec<f32>) {
        let cfg = ModelConfig::tiny();
        let (params, bufs) = init_model::<f32>(&cfg, 3);
        let speech: Vec<f32> = harmonic_voice(900, 16_000.0, 150.0, 5);
        let noise: Vec<f32> = lowpass_noise(900, 6, 0.8, 0.3);
        let (noisy, _, _) = mix_at_snr(&speech, &noise, 5.0).unwrap();
        (cfg, params, bufs, noisy)
    }

    fn run_chunked(
        cfg: &ModelConfig,
        params: &ModelParams<Tensor<f32>>,
        bufs: &ModelBuffers<f32>,
        wave: &[f32],
        postproc: bool,
        chunk: usize,
    ) -> Vec<f32> {
        let mut s =
            StreamEnhancer::new(cfg.clone(), params.clone(), bufs.clone(), postproc).unwrap();
        let mut out = Vec::new();
        for c in wave.chunks(chunk) {
            out.extend(s.push(c).unwrap());
        }
        out.extend(s.finish().unwrap());
        out
    }

    #[test]
    fn chunked_output_equals_offline_bitwise() {
        let (cfg, params, bufs, noisy) = setup();
        for postproc in [false, true] {
            let offline = enhance_offline(&params, &bufs, &cfg, &noisy, postproc).unwrap();
            for chunk in [1usize, 7, 160, 900] {
                let streamed = run_chunked(&cfg, &params, &bufs, &noisy, postproc, chunk);
                assert_eq!(offline.len(), streamed.len(), "chunk {chunk}");
                assert_eq!(offline, streamed, "postproc {postproc}, chunk {chunk}");
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (cfg, params, bufs, _) = setup();
        let silence = vec![0.0f32; 640];
        let out = enhance_offline(&params, &bufs, &cfg, &silence, true).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let streamed = run_chunked(&cfg, &params, &bufs, &silence, true, 64);
        assert!(streamed.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gain_stage_changes_noisy_output() {
        let (cfg, params, bufs, noisy) = setup();
        let plain = enhance_offline(&params, &bufs, &cfg, &noisy, false).unwrap();
        let gained = enhance_offline(&params, &bufs, &cfg, &noisy, true).unwrap();
        assert_eq!(plain.len(), gained.len());
        assert!(plain != gained);
    }

    #[test]
    fn latency_matches_frame_hop_lookahead() {
        let (cfg, params, bufs, _) = setup();
        let s = StreamEnhancer::new(cfg.clone(), params, bufs, false).unwrap();
        let want = cfg.stft.frame + cfg.stft.hop + cfg.lookahead_frames * cfg.stft.hop;
        assert_eq!(s.latency_samples(), want);
    }

    #[test]
    fn lifecycle_misuse_is_rejected() {
        let (cfg, params, bufs, noisy) = setup();
        let mut s = StreamEnhancer::new(cfg, params, bufs, true).unwrap();
        s.push(&noisy).unwrap();
        s.finish().unwrap();
        assert!(s.push(&noisy).is_err());
        assert!(s.finish().is_err());
    }

    #[test]
    fn short_input_is_an_error_not_a_panic() {
        let (cfg, params, bufs, _) = setup();
        let err = enhance_offline(&params, &bufs, &cfg, &[0.1f32; 8], false).unwrap_err();
        assert!(err.to_string().contains("samples"));
    }
}
