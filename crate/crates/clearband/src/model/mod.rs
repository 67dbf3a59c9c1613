//! The enhancement network: band split, complex conv encoder, frequency/time
//! LSTM core, skip pathways into a complex deconv decoder, a multi-tap
//! spectral filter output, and an auxiliary per-frame SNR head.
//!
//! The network consumes [T, bins] complex spectra. The DC bin is dropped on
//! entry (the band structure needs a bin count divisible by the band count)
//! and reattached as zero on the way out. Every stage except the final
//! deconv layer is causal in time; that one layer reads one future frame,
//! which is the whole algorithmic look-ahead of the engine.
//!
//! [`forward`] builds the training tape. The streaming twin in [`stream`]
//! reproduces it frame by frame, bit for bit, from carried state.

pub mod checkpoint;
pub mod stream;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complex::conv::{cconv2d, ctconv2d, init_conv, init_tconv, ConvParams};
use crate::complex::lstm::{
    cblstm, clinear, clstm_scan, init_clstm, init_linear, init_lstm, lstm_scan, CLstmParams,
    LinearParams, LstmParams,
};
use crate::complex::{cadd, cmul, CTensor, CVar};
use crate::dsp::stft::StftConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::subband::{causal_instance_norm, init_subband, split_bands, SubbandConfig, SubbandParams};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{fmt_shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;
/// Band filters start as identity plus this much uniform noise.
pub const SPLIT_INIT_NOISE: f64 = 1e-3;

/// Architecture description. `channels` counts complex channels per encoder
/// layer; each complex channel is a (re, im) plane pair, so the plane count
/// seen by normalization is twice this figure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub net_bins: usize,
    pub channels: Vec<usize>,
    pub kernel_t: usize,
    pub kernel_f: usize,
    pub stride_f: usize,
    pub df_taps_time: usize,
    pub df_taps_freq: usize,
    pub lookahead_frames: usize,
    pub f_hidden: usize,
    pub t_hidden: usize,
    pub snr_hidden: usize,
    pub stft: StftConfig,
}

impl ModelConfig {
    /// Production size: 16 kHz, 4 bands of 64 bins, encoder widths
    /// 16/32/64/128 complex channels, 256-unit recurrent core.
    pub fn full() -> Self {
        ModelConfig {
            bands: 4,
            net_bins: 256,
            channels: vec![16, 32, 64, 128],
            kernel_t: 2,
            kernel_f: 5,
            stride_f: 2,
            df_taps_time: 2,
            df_taps_freq: 3,
            lookahead_frames: 1,
            f_hidden: 256,
            t_hidden: 256,
            snr_hidden: 64,
            stft: StftConfig::default(),
        }
    }

    /// Same architecture at half the encoder width with a 64-unit recurrent
    /// core; trains in minutes on a few CPU cores.
    pub fn toy() -> Self {
        ModelConfig {
            channels: vec![8, 16, 32, 64],
            f_hidden: 64,
            t_hidden: 64,
            snr_hidden: 16,
            ..ModelConfig::full()
        }
    }

    /// Two layers on 8 bins; small enough for finite-difference gradient
    /// checks over the whole network in 64-bit.
    pub fn tiny() -> Self {
        ModelConfig {
            bands: 2,
            net_bins: 8,
            channels: vec![4, 8],
            kernel_t: 2,
            kernel_f: 5,
            stride_f: 2,
            df_taps_time: 2,
            df_taps_freq: 3,
            lookahead_frames: 1,
            f_hidden: 8,
            t_hidden: 8,
            snr_hidden: 4,
            stft: StftConfig { frame: 16, hop: 8, fft_size: 16 },
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn band_width(&self) -> usize {
        self.net_bins / self.bands
    }

    pub fn taps(&self) -> usize {
        self.df_taps_time * self.df_taps_freq
    }

    /// Complex channel count entering each encoder layer (the band stack
    /// counts as one channel per band).
    pub fn enc_in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.bands
        } else {
            self.channels[layer - 1]
        }
    }

    /// Frequency width entering each layer: halves per stride-2 layer.
    pub fn enc_in_freq(&self, layer: usize) -> usize {
        self.band_width() >> layer
    }

    /// Real-valued feature count of one bottleneck frame: both planes of
    /// every channel at every remaining frequency position.
    pub fn bottleneck_features(&self) -> usize {
        2 * self.channels[self.depth() - 1] * self.enc_in_freq(self.depth())
    }

    pub fn subband(&self) -> SubbandConfig {
        SubbandConfig::new(self.bands, self.net_bins)
    }

    fn pad_f(&self) -> usize {
        (self.kernel_f - 1) / 2
    }

    fn enc_spec(&self) -> ConvSpec {
        ConvSpec {
            stride: (1, self.stride_f),
            pad_t: (1, 0),
            pad_f: (self.pad_f(), self.pad_f()),
        }
    }

    /// Decoder layers other than the last read the current and one previous
    /// frame; the last reads the current and one future frame.
    fn dec_spec(&self, last: bool) -> ConvSpec {
        ConvSpec {
            stride: (1, self.stride_f),
            pad_t: if last { (1, 0) } else { (0, 1) },
            pad_f: (self.pad_f(), self.pad_f()),
        }
    }

    fn path_spec(&self) -> ConvSpec {
        ConvSpec { stride: (1, 1), pad_t: (0, 0), pad_f: (0, 0) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.channels.is_empty()
            && self.bands > 0
            && self.net_bins % self.bands == 0
            && self.band_width() % (1 << self.depth()) == 0
            && self.band_width() >> self.depth() >= 1
            && self.kernel_t == 2
            && self.kernel_f % 2 == 1
            && self.stride_f == 2
            && self.df_taps_time >= 1
            && self.df_taps_freq % 2 == 1
            && self.lookahead_frames == 1
            && self.f_hidden > 0
            && self.t_hidden > 0
            && self.snr_hidden > 0
            && self.stft.bins() == self.net_bins + 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent model config: {self:?}")))
        }
    }
}

// ---------------------------------------------------------------------------
// parameter tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlaneBn<P> {
    pub gamma: P,
    pub beta: P,
}

impl<P> PlaneBn<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> PlaneBn<Q> {
        PlaneBn { gamma: f("gamma", &self.gamma), beta: f("beta", &self.beta) }
    }
}

/// Normalization over the real and the imaginary planes independently.
#[derive(Debug, Clone)]
pub struct CBn<P> {
    pub re: PlaneBn<P>,
    pub im: PlaneBn<P>,
}

impl<P> CBn<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> CBn<Q> {
        CBn {
            re: self.re.map(&mut |n, p| f(&format!("re.{n}"), p)),
            im: self.im.map(&mut |n, p| f(&format!("im.{n}"), p)),
        }
    }
}

/// Conv (or deconv) + norm + per-channel slope activation.
#[derive(Debug, Clone)]
pub struct ConvBlock<P> {
    pub conv: ConvParams<P>,
    pub bn: CBn<P>,
    pub slope_re: P,
    pub slope_im: P,
}

impl<P> ConvBlock<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ConvBlock<Q> {
        ConvBlock {
            conv: self.conv.map(&mut |n, p| f(&format!("conv.{n}"), p)),
            bn: self.bn.map(&mut |n, p| f(&format!("bn.{n}"), p)),
            slope_re: f("slope_re", &self.slope_re),
            slope_im: f("slope_im", &self.slope_im),
        }
    }
}

/// Skip-connection aggregation: 1x1 complex conv + norm, no activation.
#[derive(Debug, Clone)]
pub struct Pathway<P> {
    pub conv: ConvParams<P>,
    pub bn: CBn<P>,
}

impl<P> Pathway<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> Pathway<Q> {
        Pathway {
            conv: self.conv.map(&mut |n, p| f(&format!("conv.{n}"), p)),
            bn: self.bn.map(&mut |n, p| f(&format!("bn.{n}"), p)),
        }
    }
}

/// Recurrent core: bidirectional scan across frequency, projection,
/// unidirectional scan across time, projection.
#[derive(Debug, Clone)]
pub struct TfCore<P> {
    pub f_fwd: CLstmParams<P>,
    pub f_bwd: CLstmParams<P>,
    pub clp_f: LinearParams<P>,
    pub t_net: CLstmParams<P>,
    pub clp_t: LinearParams<P>,
}

impl<P> TfCore<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> TfCore<Q> {
        TfCore {
            f_fwd: self.f_fwd.map(&mut |n, p| f(&format!("f_fwd.{n}"), p)),
            f_bwd: self.f_bwd.map(&mut |n, p| f(&format!("f_bwd.{n}"), p)),
            clp_f: self.clp_f.map(&mut |n, p| f(&format!("clp_f.{n}"), p)),
            t_net: self.t_net.map(&mut |n, p| f(&format!("t_net.{n}"), p)),
            clp_t: self.clp_t.map(&mut |n, p| f(&format!("clp_t.{n}"), p)),
        }
    }
}

/// Auxiliary per-frame SNR predictor: LSTM over flattened bottleneck frames,
/// then a causal width-3 conv over time and a sigmoid.
#[derive(Debug, Clone)]
pub struct SnrHead<P> {
    pub lstm: LstmParams<P>,
    pub conv_w: P,
    pub conv_b: P,
}

impl<P> SnrHead<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> SnrHead<Q> {
        SnrHead {
            lstm: self.lstm.map(&mut |n, p| f(&format!("lstm.{n}"), p)),
            conv_w: f("conv_w", &self.conv_w),
            conv_b: f("conv_b", &self.conv_b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<P> {
    pub subband: SubbandParams<P>,
    pub enc: Vec<ConvBlock<P>>,
    pub path: Vec<Pathway<P>>,
    pub tf: TfCore<P>,
    pub dec: Vec<ConvBlock<P>>,
    pub out: ConvParams<P>,
    pub snr: SnrHead<P>,
}

impl<P> ModelParams<P> {
    /// Visit every tensor with its dotted path, rebuilding the tree with the
    /// closure's results. The traversal order is fixed and is the order
    /// checkpoints and optimizers see.
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            subband: self.subband.map(&mut |n, p| f(&format!("subband.{n}"), p)),
            enc: self
                .enc
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&mut |n, p| f(&format!("enc.{i}.{n}"), p)))
                .collect(),
            path: self
                .path
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&mut |n, p| f(&format!("path.{i}.{n}"), p)))
                .collect(),
            tf: self.tf.map(&mut |n, p| f(&format!("tf.{n}"), p)),
            dec: self
                .dec
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&mut |n, p| f(&format!("dec.{i}.{n}"), p)))
                .collect(),
            out: self.out.map(&mut |n, p| f(&format!("out.{n}"), p)),
            snr: self.snr.map(&mut |n, p| f(&format!("snr.{n}"), p)),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        self.map(&mut |n, p| f(n, p));
    }
}

/// Trainable scalars in a collection of tensors.
pub fn total_scalars<'a, S: Scalar + 'a>(ts: impl Iterator<Item = &'a Tensor<S>>) -> usize {
    ts.map(|t| t.len()).sum()
}

impl<S: Scalar> ModelParams<Tensor<S>> {
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }
}

/// All tensors as grad-tracked leaves on `g`, preserving tree structure.
pub fn leaf_params<S: Scalar>(g: &Graph<S>, p: &ModelParams<Tensor<S>>) -> ModelParams<Var> {
    p.map(&mut |_, t| g.leaf(t.clone(), true))
}

// ---------------------------------------------------------------------------
// normalization buffers
// ---------------------------------------------------------------------------

/// Running first/second moments for one conv block, one entry per channel
/// per plane. Not trained; carried next to the parameters and used verbatim
/// in eval mode.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean_re: Tensor<S>,
    pub var_re: Tensor<S>,
    pub mean_im: Tensor<S>,
    pub var_im: Tensor<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn fresh(channels: usize) -> Self {
        BnStats {
            mean_re: Tensor::zeros(&[channels]),
            var_re: Tensor::full(&[channels], S::one()),
            mean_im: Tensor::zeros(&[channels]),
            var_im: Tensor::full(&[channels], S::one()),
        }
    }

    pub fn fields(&self) -> [(&'static str, &Tensor<S>); 4] {
        [
            ("mean_re", &self.mean_re),
            ("var_re", &self.var_re),
            ("mean_im", &self.mean_im),
            ("var_im", &self.var_im),
        ]
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        match name {
            "mean_re" => Some(&mut self.mean_re),
            "var_re" => Some(&mut self.var_re),
            "mean_im" => Some(&mut self.mean_im),
            "var_im" => Some(&mut self.var_im),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelBuffers<S> {
    pub enc: Vec<BnStats<S>>,
    pub path: Vec<BnStats<S>>,
    pub dec: Vec<BnStats<S>>,
}

impl<S: Scalar> ModelBuffers<S> {
    pub fn fresh(cfg: &ModelConfig) -> Self {
        let depth = cfg.depth();
        ModelBuffers {
            enc: (0..depth).map(|i| BnStats::fresh(cfg.channels[i])).collect(),
            path: (0..depth).map(|i| BnStats::fresh(cfg.channels[i])).collect(),
            // decoder blocks mirror encoder widths in reverse, minus the
            // output layer which has no normalization
            dec: (0..depth - 1)
                .map(|i| BnStats::fresh(cfg.channels[depth - 2 - i]))
                .collect(),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &Tensor<S>)) {
        for (group, list) in [("enc", &self.enc), ("path", &self.path), ("dec", &self.dec)] {
            for (i, s) in list.iter().enumerate() {
                for (field, t) in s.fields() {
                    f(format!("{group}.{i}.{field}"), t);
                }
            }
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        for (group, list) in
            [("enc", &mut self.enc), ("path", &mut self.path), ("dec", &mut self.dec)]
        {
            for (i, s) in list.iter_mut().enumerate() {
                for field in ["mean_re", "var_re", "mean_im", "var_im"] {
                    f(format!("{group}.{i}.{field}"), s.field_mut(field).expect("known field"));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

fn init_bn<S: Scalar>(channels: usize) -> CBn<Tensor<S>> {
    let plane = || PlaneBn {
        gamma: Tensor::full(&[channels], S::one()),
        beta: Tensor::zeros(&[channels]),
    };
    CBn { re: plane(), im: plane() }
}

fn init_slopes<S: Scalar>(channels: usize) -> Tensor<S> {
    Tensor::full(&[channels], S::of_f64(PRELU_INIT))
}

pub fn init_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> (ModelParams<Tensor<S>>, ModelBuffers<S>) {
    cfg.validate().expect("config validated before init");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = cfg.depth();
    let (k_t, k_f) = (cfg.kernel_t, cfg.kernel_f);

    let subband = init_subband(&cfg.subband(), SPLIT_INIT_NOISE, &mut rng);

    let enc: Vec<ConvBlock<Tensor<S>>> = (0..depth)
        .map(|i| {
            let c_out = cfg.channels[i];
            ConvBlock {
                conv: init_conv(c_out, cfg.enc_in_channels(i), k_t, k_f, &mut rng),
                bn: init_bn(c_out),
                slope_re: init_slopes(c_out),
                slope_im: init_slopes(c_out),
            }
        })
        .collect();

    let path: Vec<Pathway<Tensor<S>>> = (0..depth)
        .map(|i| {
            let c = cfg.channels[i];
            Pathway { conv: init_conv(c, c, 1, 1, &mut rng), bn: init_bn(c) }
        })
        .collect();

    let c_top = cfg.channels[depth - 1];
    let tf = TfCore {
        f_fwd: init_clstm(c_top, cfg.f_hidden, &mut rng),
        f_bwd: init_clstm(c_top, cfg.f_hidden, &mut rng),
        clp_f: init_linear(2 * cfg.f_hidden, c_top, &mut rng),
        t_net: init_clstm(c_top, cfg.t_hidden, &mut rng),
        clp_t: init_linear(cfg.t_hidden, c_top, &mut rng),
    };

    let dec: Vec<ConvBlock<Tensor<S>>> = (0..depth - 1)
        .map(|i| {
            let c_in = 2 * cfg.channels[depth - 1 - i];
            let c_out = cfg.channels[depth - 2 - i];
            ConvBlock {
                conv: init_tconv(c_in, c_out, k_t, k_f, &mut rng),
                bn: init_bn(c_out),
                slope_re: init_slopes(c_out),
                slope_im: init_slopes(c_out),
            }
        })
        .collect();

    let mut out = init_tconv(2 * cfg.channels[0], cfg.bands * cfg.taps(), k_t, k_f, &mut rng);
    // Start as a pass-through filter: bias 1+0j on the tap that reads the
    // current frame's own bin, so an untrained model roughly preserves its
    // input instead of scrambling it.
    let centre = (cfg.df_taps_freq - 1) / 2;
    let mut b = out.b_re.data().to_vec();
    for k in 0..cfg.bands {
        b[k * cfg.taps() + centre] = S::one();
    }
    out.b_re = Tensor::new(vec![cfg.bands * cfg.taps()], b);

    let snr = SnrHead {
        lstm: init_lstm(cfg.bottleneck_features(), cfg.snr_hidden, &mut rng),
        conv_w: {
            let bound = 1.0 / ((cfg.snr_hidden * 3) as f64).sqrt();
            Tensor::from_fn(&[1, cfg.snr_hidden, 3, 1], |_| S::of_f64(rng.gen_range(-bound..bound)))
        },
        conv_b: Tensor::zeros(&[1]),
    };

    let params = ModelParams { subband, enc, path, tf, dec, out, snr };
    let buffers = ModelBuffers::fresh(cfg);
    (params, buffers)
}

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current utterance and push them
    /// into the running buffers.
    Train,
    /// Normalize with the running buffers; required for streaming, which
    /// cannot see utterance-level statistics.
    Eval,
}

fn bn_plane_train<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<(Var, Tensor<S>, Tensor<S>)> {
    let shape = g.shape(x);
    let (c, t, f) = (shape[0], shape[1], shape[2]);
    let inv_n = S::one() / S::of_usize(t * f);
    let mean = g.mul_scalar(g.sum_axis(g.sum_axis(x, 2, true), 1, true), inv_n);
    let xc = g.sub(x, mean)?;
    let var = g.mul_scalar(g.sum_axis(g.sum_axis(g.mul(xc, xc)?, 2, true), 1, true), inv_n);
    let denom = g.sqrt(g.add_scalar(var, S::of_f64(BN_EPS)));
    let ga = g.reshape(gamma, &[c, 1, 1])?;
    let be = g.reshape(beta, &[c, 1, 1])?;
    let y = g.add(g.mul(g.div(xc, denom)?, ga)?, be)?;
    let mean_v = g.value(mean).reshaped(&[c])?;
    let var_v = g.value(var).reshaped(&[c])?;
    Ok((y, mean_v, var_v))
}

fn bn_plane_eval<S: Scalar>(
    g: &Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &Tensor<S>,
    var: &Tensor<S>,
) -> Result<Var> {
    let c = g.shape(x)[0];
    let m = g.constant(mean.reshaped(&[c, 1, 1])?);
    let denom = g.constant(var.map(|v| (v + S::of_f64(BN_EPS)).sqrt()).reshaped(&[c, 1, 1])?);
    let ga = g.reshape(gamma, &[c, 1, 1])?;
    let be = g.reshape(beta, &[c, 1, 1])?;
    g.add(g.mul(g.div(g.sub(x, m)?, denom)?, ga)?, be)
}

fn ema<S: Scalar>(running: &Tensor<S>, batch: &Tensor<S>) -> Tensor<S> {
    let m = S::of_f64(BN_MOMENTUM);
    let keep = S::one() - m;
    Tensor::from_fn(running.shape(), |i| running.data()[i] * keep + batch.data()[i] * m)
}

/// Per-plane batch norm over a [C, T, F] map. Train mode normalizes with the
/// map's own statistics and advances the running buffers.
pub fn batch_norm<S: Scalar>(
    g: &Graph<S>,
    x: CVar,
    p: &CBn<Var>,
    stats: &mut BnStats<S>,
    mode: Mode,
) -> Result<CVar> {
    match mode {
        Mode::Train => {
            let (yr, m_re, v_re) = bn_plane_train(g, x.re, p.re.gamma, p.re.beta)?;
            let (yi, m_im, v_im) = bn_plane_train(g, x.im, p.im.gamma, p.im.beta)?;
            stats.mean_re = ema(&stats.mean_re, &m_re);
            stats.var_re = ema(&stats.var_re, &v_re);
            stats.mean_im = ema(&stats.mean_im, &m_im);
            stats.var_im = ema(&stats.var_im, &v_im);
            Ok(CVar::new(yr, yi))
        }
        Mode::Eval => Ok(CVar::new(
            bn_plane_eval(g, x.re, p.re.gamma, p.re.beta, &stats.mean_re, &stats.var_re)?,
            bn_plane_eval(g, x.im, p.im.gamma, p.im.beta, &stats.mean_im, &stats.var_im)?,
        )),
    }
}

fn cprelu<S: Scalar>(g: &Graph<S>, x: CVar, slope_re: Var, slope_im: Var) -> Result<CVar> {
    Ok(CVar::new(g.prelu(x.re, slope_re)?, g.prelu(x.im, slope_im)?))
}

fn ccat0<S: Scalar>(g: &Graph<S>, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar::new(g.concat(&[a.re, b.re], 0)?, g.concat(&[a.im, b.im], 0)?))
}

fn cpermute<S: Scalar>(g: &Graph<S>, x: CVar, perm: &[usize]) -> CVar {
    CVar::new(g.permute(x.re, perm), g.permute(x.im, perm))
}

/// Frequency-then-time recurrent core on a [C, T, F] map.
///
/// The frequency scan is bidirectional with the T frames as independent
/// batch rows, so it carries no state across time; the time scan is
/// unidirectional with the F positions as batch rows and is the only
/// stateful part when streaming.
pub fn tf_core_forward<S: Scalar>(
    g: &Graph<S>,
    e: CVar,
    p: &TfCore<Var>,
    cfg: &ModelConfig,
) -> Result<CVar> {
    // [C, T, F] -> [F, T, C]: scan frequency, batch over frames
    let u = cpermute(g, e, &[2, 1, 0]);
    let h = cblstm(g, u, &p.f_fwd, &p.f_bwd, cfg.f_hidden)?;
    let of = clinear(g, h, &p.clp_f)?;
    // [F, T, C] -> [T, F, C]: scan time, batch over frequency positions
    let tseq = cpermute(g, of, &[1, 0, 2]);
    let ht = clstm_scan(g, tseq, &p.t_net, cfg.t_hidden, false)?;
    let ot = clinear(g, ht, &p.clp_t)?;
    // [T, F, C] -> [C, T, F]
    Ok(cpermute(g, ot, &[2, 0, 1]))
}

/// Per-frame SNR estimate in (0, 1) from the recurrent core's output map.
pub fn snr_head_forward<S: Scalar>(
    g: &Graph<S>,
    core_out: CVar,
    p: &SnrHead<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = g.shape(core_out.re);
    let (c, t, f) = (shape[0], shape[1], shape[2]);
    let re_flat = g.reshape(g.permute(core_out.re, &[1, 0, 2]), &[t, c * f])?;
    let im_flat = g.reshape(g.permute(core_out.im, &[1, 0, 2]), &[t, c * f])?;
    let x = g.reshape(g.concat(&[re_flat, im_flat], 1)?, &[t, 1, 2 * c * f])?;
    let h = lstm_scan(g, x, &p.lstm, cfg.snr_hidden, false)?;
    let hm = g.reshape(g.permute(g.reshape(h, &[t, cfg.snr_hidden])?, &[1, 0]), &[cfg.snr_hidden, t, 1])?;
    let spec = ConvSpec { stride: (1, 1), pad_t: (2, 0), pad_f: (0, 0) };
    let y = g.conv2d(hm, p.conv_w, spec)?;
    let y = g.add(y, g.reshape(p.conv_b, &[1, 1, 1])?)?;
    Ok(g.sigmoid(g.reshape(y, &[t])?))
}

/// Multi-tap filtering of the raw band stack: each output bin is the sum of
/// the filter taps times the input bins of a small past-time x neighbor-
/// frequency patch. Frequency edges read zeros; time taps only reach
/// backwards.
pub fn apply_deep_filter<S: Scalar>(
    g: &Graph<S>,
    mask: CVar,
    bands: CVar,
    cfg: &ModelConfig,
) -> Result<CVar> {
    let taps = cfg.taps();
    let centre = (cfg.df_taps_freq - 1) as isize / 2;
    let mut parts_re = Vec::with_capacity(cfg.bands);
    let mut parts_im = Vec::with_capacity(cfg.bands);
    for k in 0..cfg.bands {
        let y_k = CVar::new(g.slice(bands.re, 0, k, 1)?, g.slice(bands.im, 0, k, 1)?);
        let mut acc: Option<CVar> = None;
        for i in 0..cfg.df_taps_time {
            for j in 0..cfg.df_taps_freq {
                let ch = k * taps + i * cfg.df_taps_freq + j;
                let m = CVar::new(g.slice(mask.re, 0, ch, 1)?, g.slice(mask.im, 0, ch, 1)?);
                let off_f = centre - j as isize;
                let sh = CVar::new(
                    g.shift(g.shift(y_k.re, 1, i as isize), 2, off_f),
                    g.shift(g.shift(y_k.im, 1, i as isize), 2, off_f),
                );
                let term = cmul(g, m, sh)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => cadd(g, a, term)?,
                });
            }
        }
        let done = acc.expect("at least one tap");
        parts_re.push(done.re);
        parts_im.push(done.im);
    }
    Ok(CVar::new(g.concat(&parts_re, 0)?, g.concat(&parts_im, 0)?))
}

/// Value twin of [`apply_deep_filter`] for one output frame.
///
/// `mask` holds this frame's taps as [bands*taps, W]; `bands` holds the raw
/// band frames, index 0 = this frame, index i = i frames back, each
/// [bands, W]; missing history reads zeros. Accumulation order matches the
/// tape op for op.
pub fn deep_filter_frame<S: Scalar>(
    mask: &CTensor<S>,
    bands: &[&CTensor<S>],
    cfg: &ModelConfig,
) -> CTensor<S> {
    let w = cfg.band_width();
    let taps = cfg.taps();
    let centre = (cfg.df_taps_freq - 1) as isize / 2;
    assert_eq!(mask.shape(), &[cfg.bands * taps, w]);
    let mut out_re = vec![S::zero(); cfg.bands * w];
    let mut out_im = vec![S::zero(); cfg.bands * w];
    for k in 0..cfg.bands {
        for i in 0..cfg.df_taps_time {
            for j in 0..cfg.df_taps_freq {
                let ch = k * taps + i * cfg.df_taps_freq + j;
                let m_re = &mask.re.data()[ch * w..(ch + 1) * w];
                let m_im = &mask.im.data()[ch * w..(ch + 1) * w];
                for f in 0..w {
                    let src = f as isize - (centre - j as isize);
                    let (y_re, y_im) = if src < 0 || src >= w as isize || i >= bands.len() {
                        (S::zero(), S::zero())
                    } else {
                        let b = bands[i];
                        debug_assert_eq!(b.shape(), &[cfg.bands, w]);
                        let idx = k * w + src as usize;
                        (b.re.data()[idx], b.im.data()[idx])
                    };
                    let t_re = m_re[f] * y_re - m_im[f] * y_im;
                    let t_im = m_re[f] * y_im + m_im[f] * y_re;
                    let o = k * w + f;
                    out_re[o] = out_re[o] + t_re;
                    out_im[o] = out_im[o] + t_im;
                }
            }
        }
    }
    CTensor::new(
        Tensor::new(vec![cfg.bands, w], out_re),
        Tensor::new(vec![cfg.bands, w], out_im),
    )
}

// ---------------------------------------------------------------------------
// full forward
// ---------------------------------------------------------------------------

/// Tape outputs of one utterance pass.
#[derive(Debug)]
pub struct NetOutput {
    /// [T, bins] enhanced spectrum, DC row zero.
    pub enhanced: CVar,
    /// [T] estimated per-frame SNR in (0, 1); training-time auxiliary.
    pub snr: Var,
    /// [bands, T, W] raw band stack before normalization (filter input).
    pub bands: CVar,
    /// [bands*taps, T, W] filter taps from the decoder.
    pub mask: CVar,
}

/// Whole-utterance pass over a [T, bins] complex spectrum, bins = net_bins+1
/// (the DC bin is dropped internally and restored as zero).
pub fn forward<S: Scalar>(
    g: &Graph<S>,
    spec: CVar,
    p: &ModelParams<Var>,
    bufs: &mut ModelBuffers<S>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<NetOutput> {
    let shape = g.shape(spec.re);
    if shape.len() != 2 || shape[1] != cfg.net_bins + 1 {
        return Err(Error::shape(
            "model input",
            format!("[T, {}]", cfg.net_bins + 1),
            fmt_shape(&shape),
        ));
    }
    let t = shape[0];
    let depth = cfg.depth();
    let sub_cfg = cfg.subband();

    let net_spec = CVar::new(
        g.slice(spec.re, 1, 1, cfg.net_bins)?,
        g.slice(spec.im, 1, 1, cfg.net_bins)?,
    );
    let bands = split_bands(g, net_spec, &p.subband, &sub_cfg)?;
    let normed = causal_instance_norm(g, bands, &p.subband, &sub_cfg)?;

    // encoder
    let mut x = normed;
    let mut enc_outs = Vec::with_capacity(depth);
    for (i, layer) in p.enc.iter().enumerate() {
        let y = cconv2d(g, x, &layer.conv, cfg.enc_spec())?;
        let y = batch_norm(g, y, &layer.bn, &mut bufs.enc[i], mode)?;
        x = cprelu(g, y, layer.slope_re, layer.slope_im)?;
        enc_outs.push(x);
    }

    let core = tf_core_forward(g, x, &p.tf, cfg)?;
    let snr = snr_head_forward(g, core, &p.snr, cfg)?;

    // skip pathways, deepest first to pair with decoder order
    let mut skips = Vec::with_capacity(depth);
    for i in (0..depth).rev() {
        let pw = &p.path[i];
        let y = cconv2d(g, enc_outs[i], &pw.conv, cfg.path_spec())?;
        skips.push(batch_norm(g, y, &pw.bn, &mut bufs.path[i], mode)?);
    }

    // decoder: each layer doubles frequency; all causal except the last
    let mut d = core;
    for (i, layer) in p.dec.iter().enumerate() {
        let cat = ccat0(g, d, skips[i])?;
        let out_f = cfg.enc_in_freq(depth - 1 - i);
        let y = ctconv2d(g, cat, &layer.conv, cfg.dec_spec(false), t, out_f)?;
        let y = batch_norm(g, y, &layer.bn, &mut bufs.dec[i], mode)?;
        d = cprelu(g, y, layer.slope_re, layer.slope_im)?;
    }
    let cat = ccat0(g, d, skips[depth - 1])?;
    let mask = ctconv2d(g, cat, &p.out, cfg.dec_spec(true), t, cfg.band_width())?;

    let filtered = apply_deep_filter(g, mask, bands, cfg)?;
    let merged = crate::subband::merge_bands(g, filtered, &p.subband, &sub_cfg)?;
    let dc = g.constant(Tensor::zeros(&[t, 1]));
    let enhanced = CVar::new(
        g.concat(&[dc, merged.re], 1)?,
        g.concat(&[dc, merged.im], 1)?,
    );
    Ok(NetOutput { enhanced, snr, bands, mask })
}
