//! Training objectives and the frame-level SNR label pipeline.
//!
//! Two tape-built losses drive training: scale-invariant SNR on synthesized
//! waveforms and a mean-squared error between the auxiliary SNR track and
//! its label. Labels come from a small non-differentiable pipeline: raw
//! per-frame dB values from the clean/noise pair, a running normalization
//! over utterances, and an erf squash into (0,1).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Momentum of the running label statistics; one step per utterance.
pub const SNR_STAT_ALPHA: f64 = 0.99;

/// Weight of the SNR-track term in the combined objective.
pub const SNR_LOSS_WEIGHT: f64 = 30.0;

pub const SI_SNR_EPS: f64 = 1e-8;

/// Floor applied to per-frame mean energies before the dB ratio. Keeps
/// silent frames finite on both sides of the division.
pub const ENERGY_FLOOR: f64 = 1e-8;

/// Distance labels are kept away from the {0,1} rails after the erf squash;
/// extreme z-scores would otherwise saturate to exactly 1 in float math.
const LABEL_RAIL: f64 = 1e-7;

// ---------------------------------------------------------------------------
// label pipeline
// ---------------------------------------------------------------------------

/// Per-frame SNR in dB between aligned clean and noise spectrograms, both
/// `[T, bins]` complex pairs. Magnitudes reduce to one scalar per frame by
/// root-mean energy across bins; both energies are floored so silent frames
/// stay finite.
pub fn frame_snr_db<S: Scalar>(
    clean_re: &Tensor<S>,
    clean_im: &Tensor<S>,
    noise_re: &Tensor<S>,
    noise_im: &Tensor<S>,
) -> Result<Tensor<S>> {
    let shape = clean_re.shape();
    if clean_im.shape() != shape || noise_re.shape() != shape || noise_im.shape() != shape {
        return Err(Error::shape(
            "frame snr",
            format!("four aligned [{}] planes", crate::tensor::fmt_shape(shape)),
            crate::tensor::fmt_shape(noise_re.shape()),
        ));
    }
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape(
            "frame snr",
            "[frames, bins] with both nonzero".to_string(),
            crate::tensor::fmt_shape(shape),
        ));
    }
    let (t, bins) = (shape[0], shape[1]);
    let floor = S::of_f64(ENERGY_FLOOR);
    let ten = S::of_f64(10.0);
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let row = ti * bins;
        let mut ex = S::zero();
        let mut en = S::zero();
        for b in 0..bins {
            let (cr, ci) = (clean_re.data()[row + b], clean_im.data()[row + b]);
            let (nr, ni) = (noise_re.data()[row + b], noise_im.data()[row + b]);
            ex = ex + cr * cr + ci * ci;
            en = en + nr * nr + ni * ni;
        }
        let nb = S::of_usize(bins);
        // 20 log10 of the RMS ratio == 10 log10 of the mean-energy ratio
        out.push(ten * ((ex / nb).max(floor) / (en / nb).max(floor)).log10());
    }
    Ok(Tensor::new(vec![t], out))
}

/// Running mean and spread of per-utterance SNR statistics. Updated once per
/// utterance in data order; both moments start at the first utterance's own
/// values.
#[derive(Debug, Clone, Copy)]
pub struct SnrLabelState<S> {
    pub mu_hat: S,
    pub sigma_hat: S,
    pub alpha: S,
    pub initialized: bool,
}

impl<S: Scalar> SnrLabelState<S> {
    pub fn new() -> Self {
        SnrLabelState {
            mu_hat: S::zero(),
            sigma_hat: S::zero(),
            alpha: S::of_f64(SNR_STAT_ALPHA),
            initialized: false,
        }
    }

    /// Alpha 0 degenerates to per-utterance statistics; 1 would freeze the
    /// first utterance forever and is rejected.
    pub fn with_alpha(alpha: S) -> Result<Self> {
        if alpha < S::zero() || alpha >= S::one() {
            return Err(Error::Config(format!(
                "label momentum must be in [0,1), got {}",
                alpha.into_f64()
            )));
        }
        Ok(SnrLabelState { alpha, ..SnrLabelState::new() })
    }

    /// Fold one utterance's raw dB values into the running statistics.
    pub fn update(&mut self, xi: &Tensor<S>) -> Result<()> {
        if xi.len() == 0 {
            return Err(Error::Data("empty utterance in label statistics".into()));
        }
        let n = S::of_usize(xi.len());
        let mu = xi.data().iter().copied().sum::<S>() / n;
        let var = xi.data().iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
        let sigma = var.sqrt();
        if self.initialized {
            let keep = self.alpha;
            let mix = S::one() - self.alpha;
            self.mu_hat = self.mu_hat * keep + mu * mix;
            self.sigma_hat = self.sigma_hat * keep + sigma * mix;
        } else {
            self.mu_hat = mu;
            self.sigma_hat = sigma;
            self.initialized = true;
        }
        Ok(())
    }

    /// Z-score against the running statistics, then squash through
    /// `(erf(z) + 1) / 2` into the open unit interval.
    pub fn normalize_compress(&self, xi: &Tensor<S>) -> Result<Tensor<S>> {
        if !self.initialized {
            return Err(Error::Numerical(
                "label statistics have not seen any utterance".into(),
            ));
        }
        if self.sigma_hat <= S::zero() {
            return Err(Error::Numerical(format!(
                "degenerate label statistics: spread {}",
                self.sigma_hat.into_f64()
            )));
        }
        let half = S::of_f64(0.5);
        let lo = S::of_f64(LABEL_RAIL);
        let hi = S::one() - lo;
        Ok(xi.map(|v| {
            let z = (v - self.mu_hat) / self.sigma_hat;
            ((z.erf() + S::one()) * half).max(lo).min(hi)
        }))
    }

    /// Training entry point: statistics absorb the utterance first, then the
    /// same utterance is labeled against the updated state.
    pub fn labels(&mut self, xi: &Tensor<S>) -> Result<Tensor<S>> {
        self.update(xi)?;
        self.normalize_compress(xi)
    }
}

impl<S: Scalar> Default for SnrLabelState<S> {
    fn default() -> Self {
        SnrLabelState::new()
    }
}

// ---------------------------------------------------------------------------
// objectives
// ---------------------------------------------------------------------------

/// Negative scale-invariant SNR of a waveform against a reference, on the
/// tape. The estimate is projected onto the reference; the loss is
/// `-10 log10(|proj|^2 / (|est - proj|^2 + eps))`, so more negative is
/// better and any rescaling of the estimate cancels through the projection.
pub fn si_snr_loss<S: Scalar>(g: &Graph<S>, est: Var, reference: Var) -> Result<Var> {
    let (ev, rv) = (g.value(est), g.value(reference));
    if ev.shape() != rv.shape() || ev.ndim() != 1 || ev.len() == 0 {
        return Err(Error::shape(
            "si-snr",
            "two equal nonempty 1-d waveforms".to_string(),
            format!(
                "{} vs {}",
                crate::tensor::fmt_shape(ev.shape()),
                crate::tensor::fmt_shape(rv.shape())
            ),
        ));
    }
    let ref_energy: S = rv.data().iter().map(|&v| v * v).sum();
    if ref_energy == S::zero() {
        return Err(Error::Data("silent reference waveform".into()));
    }
    let dot = g.sum_all(g.mul(est, reference)?);
    let denom = g.sum_all(g.mul(reference, reference)?);
    let scale = g.div(dot, denom)?;
    let target = g.mul(reference, scale)?;
    let resid = g.sub(est, target)?;
    let num = g.sum_all(g.mul(target, target)?);
    let den = g.add_scalar(g.sum_all(g.mul(resid, resid)?), S::of_f64(SI_SNR_EPS));
    let ratio = g.div(num, den)?;
    Ok(g.mul_scalar(g.ln(ratio), S::of_f64(-10.0 / std::f64::consts::LN_10)))
}

/// Measurement twin of [`si_snr_loss`] with the sign of the metric: higher
/// is better. Runs in f64 regardless of the input width.
pub fn si_snr_db<S: Scalar>(est: &[S], reference: &[S]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::shape(
            "si-snr",
            "two equal nonempty waveforms".to_string(),
            format!("{} vs {}", est.len(), reference.len()),
        ));
    }
    let r: Vec<f64> = reference.iter().map(|&v| v.into_f64()).collect();
    let e: Vec<f64> = est.iter().map(|&v| v.into_f64()).collect();
    let ref_energy: f64 = r.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Data("silent reference waveform".into()));
    }
    let dot: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let scale = dot / ref_energy;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..e.len() {
        let t = r[i] * scale;
        num += t * t;
        let d = e[i] - t;
        den += d * d;
    }
    Ok(10.0 * (num / (den + SI_SNR_EPS)).log10())
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights<S> {
    pub delta: S,
}

impl<S: Scalar> LossWeights<S> {
    pub fn new(delta: S) -> Result<Self> {
        if delta < S::zero() {
            return Err(Error::Config(format!(
                "objective weight must be nonnegative, got {}",
                delta.into_f64()
            )));
        }
        Ok(LossWeights { delta })
    }
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        LossWeights { delta: S::of_f64(SNR_LOSS_WEIGHT) }
    }
}

/// Combined objective with its parts kept addressable for metrics.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub si_snr: Var,
    pub snr_mse: Var,
}

/// `total = si_snr + delta * mean((snr_est - snr_label)^2)`.
pub fn combined_loss<S: Scalar>(
    g: &Graph<S>,
    est_wave: Var,
    ref_wave: Var,
    snr_est: Var,
    snr_label: Var,
    weights: &LossWeights<S>,
) -> Result<Objective> {
    let (pv, lv) = (g.value(snr_est), g.value(snr_label));
    if pv.shape() != lv.shape() {
        return Err(Error::shape(
            "combined loss",
            format!("snr track shaped {}", crate::tensor::fmt_shape(lv.shape())),
            crate::tensor::fmt_shape(pv.shape()),
        ));
    }
    let si = si_snr_loss(g, est_wave, ref_wave)?;
    let diff = g.sub(snr_est, snr_label)?;
    let mse = g.mean_all(g.mul(diff, diff)?);
    let total = g.add(si, g.mul_scalar(mse, weights.delta))?;
    Ok(Objective { total, si_snr: si, snr_mse: mse })
}
