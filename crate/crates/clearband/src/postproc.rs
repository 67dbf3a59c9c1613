//! Frame-level residual noise suppressor applied after the network.
//!
//! For every frame the filter tracks cumulative mean variances of the
//! enhanced spectrum, the residual (input minus enhanced), and the input,
//! forms priori and posterior SNR estimates from their ratios, and scales
//! the whole frame by an MMSE log-spectral-amplitude gain. A rate-of-change
//! watchdog restarts the cumulative window when the priori SNR more than
//! doubles between frames, so the tracker re-adapts after sudden scene
//! changes instead of dragging stale statistics along.
//!
//! Everything here is causal: the gain for frame `t` depends on frames
//! `0..=t` only, so offline and chunked application agree bit for bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

/// Lowest gain the filter will apply (-30 dB). Prevents musical noise and
/// the zero-SNR singularity.
pub const GAIN_FLOOR: f64 = 0.0316;

/// Floor for SNR ratios and their denominators.
pub const TRACK_FLOOR: f64 = 1e-8;

const EULER_GAMMA: f64 = 0.5772156649015329;

/// Exponential integral `E1(v) = ∫_v^∞ e^-t / t dt` for `v > 0`.
///
/// Power series below 1, modified Lentz continued fraction above; both
/// converge to well under 1e-10 absolute over the range the gain rule
/// produces.
pub fn exp_integral_e1(v: f64) -> f64 {
    assert!(v > 0.0, "E1 domain is v > 0, got {v}");
    if v < 1.0 {
        // -gamma - ln v + sum_k (-1)^(k+1) v^k / (k * k!)
        let mut acc = -EULER_GAMMA - v.ln();
        let mut pow = 1.0; // v^k / k!
        let mut sign = 1.0;
        for k in 1..=60 {
            pow *= v / k as f64;
            let add = sign * pow / k as f64;
            acc += add;
            if add.abs() < 1e-18 {
                break;
            }
            sign = -sign;
        }
        acc
    } else {
        let mut b = v + 1.0;
        let mut c = 1e308;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=200u32 {
            let a = -((i as f64) * (i as f64));
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        h * (-v).exp()
    }
}

/// MMSE-LSA gain from priori SNR `xi` and posterior SNR `gamma`, clamped
/// into `[GAIN_FLOOR, 1]`.
pub fn mmse_lsa_gain(xi: f64, gamma: f64) -> f64 {
    if xi <= 0.0 || gamma <= 0.0 {
        return GAIN_FLOOR;
    }
    let v = xi * gamma / (1.0 + xi);
    if v <= 0.0 {
        return GAIN_FLOOR;
    }
    let g = xi / (1.0 + xi) * (0.5 * exp_integral_e1(v)).exp();
    g.clamp(GAIN_FLOOR, 1.0)
}

/// Cumulative variance tracker behind the gain rule. One per stream.
#[derive(Debug, Clone, Default)]
pub struct SnrTrack {
    sum_xhat: f64,
    sum_resid: f64,
    sum_input: f64,
    frames: usize,
    // current frame's variances, kept so a reset can re-seed the window
    last: (f64, f64, f64),
    prev_xi: Option<f64>,
}

impl SnrTrack {
    pub fn new() -> Self {
        SnrTrack::default()
    }

    pub fn reset(&mut self) {
        *self = SnrTrack::default();
    }

    pub fn frames_since_reset(&self) -> usize {
        self.frames
    }

    /// Fold one frame's variances in and return `(xi, gamma)`: cumulative
    /// mean ratios with the residual in the denominator, floored so both
    /// stay positive and finite.
    pub fn update(&mut self, var_xhat: f64, var_resid: f64, var_input: f64) -> (f64, f64) {
        self.sum_xhat += var_xhat;
        self.sum_resid += var_resid;
        self.sum_input += var_input;
        self.frames += 1;
        self.last = (var_xhat, var_resid, var_input);
        let inv = 1.0 / self.frames as f64;
        let denom = (self.sum_resid * inv).max(TRACK_FLOOR);
        let xi = ((self.sum_xhat * inv) / denom).max(TRACK_FLOOR);
        let gamma = ((self.sum_input * inv) / denom).max(TRACK_FLOOR);
        (xi, gamma)
    }

    /// Rate-of-change watchdog. Once the relative jump of `xi` over the
    /// previous frame exceeds 1, the cumulative window restarts at the
    /// current frame. The previous-xi memory itself always moves forward,
    /// reset or not.
    pub fn maybe_reset(&mut self, xi: f64) -> bool {
        let fired = match self.prev_xi {
            Some(prev) => (xi - prev) / prev > 1.0,
            None => false,
        };
        if fired {
            self.sum_xhat = self.last.0;
            self.sum_resid = self.last.1;
            self.sum_input = self.last.2;
            self.frames = 1;
        }
        self.prev_xi = Some(xi);
        fired
    }
}

/// Streaming wrapper: owns the track and scales chunks frame by frame.
#[derive(Debug, Clone, Default)]
pub struct PostFilter {
    track: SnrTrack,
}

impl PostFilter {
    pub fn new() -> Self {
        PostFilter::default()
    }

    pub fn reset(&mut self) {
        self.track.reset();
    }

    /// Scale each frame of an enhanced chunk by its gain. `xhat` and
    /// `input` are aligned `[frames, bins]` complex pairs; any frame count
    /// (including zero) is fine, state carries across calls.
    pub fn push<S: Scalar>(
        &mut self,
        xhat_re: &Tensor<S>,
        xhat_im: &Tensor<S>,
        in_re: &Tensor<S>,
        in_im: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let shape = xhat_re.shape();
        if xhat_im.shape() != shape || in_re.shape() != shape || in_im.shape() != shape {
            return Err(Error::shape(
                "post filter",
                format!("four aligned [{}] planes", fmt_shape(shape)),
                fmt_shape(in_re.shape()),
            ));
        }
        if shape.len() != 2 {
            return Err(Error::shape(
                "post filter",
                "[frames, bins]".to_string(),
                fmt_shape(shape),
            ));
        }
        let (t, bins) = (shape[0], shape[1]);
        if bins == 0 {
            return Err(Error::shape("post filter", "nonzero bins".to_string(), "0".to_string()));
        }
        let mut out_re = xhat_re.data().to_vec();
        let mut out_im = xhat_im.data().to_vec();
        for ti in 0..t {
            let row = ti * bins;
            let mut vx = 0.0;
            let mut vn = 0.0;
            let mut vy = 0.0;
            for b in 0..bins {
                let xr = xhat_re.data()[row + b].into_f64();
                let xi_ = xhat_im.data()[row + b].into_f64();
                let yr = in_re.data()[row + b].into_f64();
                let yi = in_im.data()[row + b].into_f64();
                let (nr, ni) = (yr - xr, yi - xi_);
                vx += xr * xr + xi_ * xi_;
                vn += nr * nr + ni * ni;
                vy += yr * yr + yi * yi;
            }
            let nb = bins as f64;
            let (xi, gamma) = self.track.update(vx / nb, vn / nb, vy / nb);
            let g = S::of_f64(mmse_lsa_gain(xi, gamma));
            self.track.maybe_reset(xi);
            for b in 0..bins {
                out_re[row + b] = out_re[row + b] * g;
                out_im[row + b] = out_im[row + b] * g;
            }
        }
        Ok((Tensor::new(shape.to_vec(), out_re), Tensor::new(shape.to_vec(), out_im)))
    }
}

/// One-shot application over a whole spectrogram with a fresh tracker.
pub fn apply_postproc<S: Scalar>(
    xhat_re: &Tensor<S>,
    xhat_im: &Tensor<S>,
    in_re: &Tensor<S>,
    in_im: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    PostFilter::new().push(xhat_re, xhat_im, in_re, in_im)
}
