//! Desk-scale training loop: dynamic mixing, the combined waveform/SNR
//! objective, Adam with validation-triggered learning-rate halving, and
//! bit-exact checkpoint resume.

pub mod data;
pub mod toy;

use std::collections::BTreeMap;

use crate::complex::CVar;
use crate::dsp::stft::{analyze, synthesize};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, frame_snr_db, LossWeights, SnrLabelState};
use crate::model::checkpoint::Checkpoint;
use crate::model::{
    forward, init_model, leaf_params, Mode, ModelBuffers, ModelConfig, ModelParams, NetOutput,
};
use crate::scalar::Scalar;
use crate::tensor::adam::Adam;
use crate::tensor::graph::Graph;
use crate::tensor::Tensor;

pub use data::{dynamic_mix, parse_manifest, ManifestEntry, MixPools, MixedUtterance, Role};

/// Knobs for one training run. `steps` and `batch` size the run; everything
/// else shapes the data or the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied whenever the validation loss goes up.
    pub lr_decay: f64,
    /// Mixing SNR drawn uniformly from this half-open range, in dB.
    pub snr_range: (f64, f64),
    pub rir_prob: f64,
    pub biquad_prob: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Training crop length for dynamic mixing.
    pub crop_seconds: f64,
    /// Validate every this many steps; 0 disables validation.
    pub val_every: u64,
    /// Global gradient norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 0.5,
            snr_range: (-5.0, 20.0),
            rir_prob: 0.5,
            biquad_prob: 0.5,
            batch: 4,
            steps: 1000,
            seed: 0,
            crop_seconds: 4.0,
            val_every: 500,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay must be in (0,1], got {}", self.lr_decay)));
        }
        for (name, p) in [("rir_prob", self.rir_prob), ("biquad_prob", self.biquad_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.snr_range.0 < self.snr_range.1) {
            return Err(Error::Config(format!(
                "snr range must be ordered, got [{}, {}]",
                self.snr_range.0, self.snr_range.1
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config(format!(
                "crop length must be positive, got {}",
                self.crop_seconds
            )));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "gradient clip must be nonnegative, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// One training triple. What `dynamic_mix` produces, minus the metadata.
#[derive(Debug, Clone)]
pub struct Utterance<S> {
    pub noisy: Vec<S>,
    pub clean: Vec<S>,
    pub noise: Vec<S>,
}

impl<S> From<MixedUtterance<S>> for Utterance<S> {
    fn from(m: MixedUtterance<S>) -> Self {
        Utterance { noisy: m.noisy, clean: m.clean, noise: m.noise }
    }
}

/// Per-step scalars, all in f64 so logs round-trip exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub si_snr: f64,
    pub snr_mse: f64,
    pub grad_norm: f64,
    /// Learning rate the step was taken with.
    pub lr: f64,
    /// Validation loss, present on steps that ran validation.
    pub val: Option<f64>,
}

impl StepMetrics {
    /// One diffable `key=value` line.
    pub fn line(&self) -> String {
        let mut s = format!(
            "step={} total={} si_snr={} snr_mse={} grad_norm={} lr={}",
            self.step, self.total, self.si_snr, self.snr_mse, self.grad_norm, self.lr
        );
        if let Some(v) = self.val {
            s.push_str(&format!(" val={v}"));
        }
        s
    }
}

/// Replay the halving rule over a full validation history. Recomputing from
/// scratch keeps resume-from-checkpoint trivially consistent.
pub fn lr_schedule(initial: f64, decay: f64, history: &[f64]) -> f64 {
    let mut lr = initial;
    for w in history.windows(2) {
        if w[1] > w[0] {
            lr *= decay;
        }
    }
    lr
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixing seed for (step, item): a pure function, so resuming from a
/// checkpoint replays the exact data stream without serializing generator
/// state.
pub fn mix_seed(base: u64, step: u64, item: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ step) ^ item)
}

struct PreparedItem<S: Scalar> {
    noisy_re: Tensor<S>,
    noisy_im: Tensor<S>,
    label: Tensor<S>,
    reference: Vec<S>,
}

struct ItemPass<S: Scalar> {
    /// Parameter traversal order.
    grads: Vec<Tensor<S>>,
    /// Buffer traversal order.
    buffers: Vec<Tensor<S>>,
    total: f64,
    si_snr: f64,
    snr_mse: f64,
}

fn l2<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data()
        .iter()
        .map(|&v| {
            let x = v.into_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn cnorm<S: Scalar>(g: &Graph<S>, v: CVar) -> f64 {
    l2(&g.value(v.re)).hypot(l2(&g.value(v.im)))
}

/// The network is a black box once a loss goes non-finite, so report the
/// norm of every head output and of each parameter group; the first group
/// that blew up is usually obvious.
fn non_finite_report<S: Scalar>(
    g: &Graph<S>,
    out: &NetOutput,
    params: &ModelParams<Tensor<S>>,
    total: f64,
) -> Error {
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    params.for_each(&mut |name, t| {
        let head = name.split('.').next().unwrap_or(name).to_string();
        let e = groups.entry(head).or_insert(0.0);
        *e = e.hypot(l2(t));
    });
    let group_text = groups
        .iter()
        .map(|(k, v)| format!("{k}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(" ");
    Error::Numerical(format!(
        "non-finite loss {total}; output norms: enhanced={:.3e} taps={:.3e} bands={:.3e} snr={:.3e}; parameter norms: {group_text}",
        cnorm(g, out.enhanced),
        cnorm(g, out.mask),
        cnorm(g, out.bands),
        l2(&g.value(out.snr)),
    ))
}

/// Forward, objective and backward for one utterance on its own graph. The
/// normalization buffers advance on a private copy; the caller merges the
/// copies afterwards.
fn run_item<S: Scalar>(
    item: &PreparedItem<S>,
    params: &ModelParams<Tensor<S>>,
    base_bufs: &ModelBuffers<S>,
    cfg: &ModelConfig,
    weights: &LossWeights<S>,
) -> Result<ItemPass<S>> {
    let g: Graph<S> = Graph::new();
    let p = leaf_params(&g, params);
    let spec = CVar::new(g.constant(item.noisy_re.clone()), g.constant(item.noisy_im.clone()));
    let mut bufs = base_bufs.clone();
    let out = forward(&g, spec, &p, &mut bufs, cfg, Mode::Train)?;

    let est = g.istft(out.enhanced.re, out.enhanced.im, cfg.stft)?;
    let n = item.reference.len();
    let ref_wave = g.constant(Tensor::new(vec![n], item.reference.clone()));
    let label = g.constant(item.label.clone());
    let obj = combined_loss(&g, est, ref_wave, out.snr, label, weights)?;

    let total = g.value(obj.total).item().into_f64();
    if !total.is_finite() {
        return Err(non_finite_report(&g, &out, params, total));
    }
    let grads = g.backward(obj.total)?;

    let mut grad_list = Vec::new();
    p.for_each(&mut |_, &var| {
        grad_list.push(match grads.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&g.shape(var)),
        });
    });
    let mut buf_list = Vec::new();
    bufs.for_each(&mut |_, t| buf_list.push(t.clone()));

    Ok(ItemPass {
        grads: grad_list,
        buffers: buf_list,
        total,
        si_snr: g.value(obj.si_snr).item().into_f64(),
        snr_mse: g.value(obj.snr_mse).item().into_f64(),
    })
}

/// Elementwise mean over per-item tensors, accumulated in ascending item
/// order so the result does not depend on which worker finished first.
fn ordered_mean<S: Scalar>(lists: &[ItemPass<S>], pick: impl Fn(&ItemPass<S>) -> &[Tensor<S>]) -> Vec<Tensor<S>> {
    let inv = S::of_f64(1.0 / lists.len() as f64);
    let first = pick(&lists[0]);
    (0..first.len())
        .map(|j| {
            Tensor::from_fn(first[j].shape(), |e| {
                let mut acc = S::zero();
                for pass in lists {
                    acc = acc + pick(pass)[j].data()[e];
                }
                acc * inv
            })
        })
        .collect()
}

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub params: ModelParams<Tensor<S>>,
    pub buffers: ModelBuffers<S>,
    pub opt: Adam<S>,
    pub labels: SnrLabelState<S>,
    pub weights: LossWeights<S>,
    pub step: u64,
    pub val_history: Vec<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        let (params, buffers) = init_model(&model_cfg, cfg.seed);
        Ok(Trainer {
            opt: Adam::new(cfg.lr),
            labels: SnrLabelState::new(),
            weights: LossWeights::default(),
            step: 0,
            val_history: Vec::new(),
            params,
            buffers,
            model_cfg,
            cfg,
        })
    }

    /// One optimizer step over a batch.
    ///
    /// Label statistics advance utterance by utterance in batch order before
    /// any graph work, so the labels do not depend on how many workers run
    /// the forward passes. Each item sees the same starting buffers; the
    /// per-item EMA results are averaged, which equals one EMA step driven
    /// by the batch-mean statistics.
    pub fn train_step(&mut self, batch: &[Utterance<S>]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let stft = self.model_cfg.stft;

        let mut prepared = Vec::with_capacity(batch.len());
        for u in batch {
            let (nr, ni) = analyze(&u.noisy, &stft)?;
            let (cr, ci) = analyze(&u.clean, &stft)?;
            let (xr, xi) = analyze(&u.noise, &stft)?;
            let raw = frame_snr_db(&cr, &ci, &xr, &xi)?;
            let label = self.labels.labels(&raw)?;
            // Resynthesized clean, so a perfect mask can actually reach it.
            let reference = synthesize(&cr, &ci, &stft)?;
            prepared.push(PreparedItem { noisy_re: nr, noisy_im: ni, label, reference });
        }

        let params = &self.params;
        let bufs = &self.buffers;
        let model_cfg = &self.model_cfg;
        let weights = &self.weights;

        #[cfg(feature = "parallel")]
        let passes: Vec<ItemPass<S>> = {
            use rayon::prelude::*;
            prepared
                .par_iter()
                .map(|it| run_item(it, params, bufs, model_cfg, weights))
                .collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let passes: Vec<ItemPass<S>> = prepared
            .iter()
            .map(|it| run_item(it, params, bufs, model_cfg, weights))
            .collect::<Result<_>>()?;

        let mut grad_mean = ordered_mean(&passes, |p| &p.grads);
        let buf_mean = ordered_mean(&passes, |p| &p.buffers);

        let mut sq = 0.0f64;
        for t in &grad_mean {
            for &v in t.data() {
                let x = v.into_f64();
                sq += x * x;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm {grad_norm}")));
        }
        if self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm {
            let scale = S::of_f64(self.cfg.clip_norm / grad_norm);
            for t in &mut grad_mean {
                *t = t.map(|v| v * scale);
            }
        }

        let mut bi = 0;
        self.buffers.for_each_mut(&mut |_, t| {
            *t = buf_mean[bi].clone();
            bi += 1;
        });

        self.opt.begin_step();
        let opt = &mut self.opt;
        let mut gi = 0usize;
        let mut failed: Option<Error> = None;
        let new_params = self.params.map(&mut |name, t| {
            let idx = gi;
            gi += 1;
            if failed.is_some() {
                return t.clone();
            }
            match opt.update(name, t, &grad_mean[idx]) {
                Ok(p) => p,
                Err(e) => {
                    failed = Some(e);
                    t.clone()
                }
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        self.params = new_params;
        self.step += 1;

        let b = passes.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            total: passes.iter().map(|p| p.total).sum::<f64>() / b,
            si_snr: passes.iter().map(|p| p.si_snr).sum::<f64>() / b,
            snr_mse: passes.iter().map(|p| p.snr_mse).sum::<f64>() / b,
            grad_norm,
            lr: self.opt.lr,
            val: None,
        })
    }

    /// Combined loss on held-out data. Touches neither the label statistics
    /// nor the normalization buffers.
    pub fn validate(&mut self, val: &[Utterance<S>]) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Data("empty validation set".into()));
        }
        let stft = self.model_cfg.stft;
        let mut total = 0.0;
        for u in val {
            let (nr, ni) = analyze(&u.noisy, &stft)?;
            let (cr, ci) = analyze(&u.clean, &stft)?;
            let (xr, xi) = analyze(&u.noise, &stft)?;
            let raw = frame_snr_db(&cr, &ci, &xr, &xi)?;
            let label = self.labels.normalize_compress(&raw)?;
            let reference = synthesize(&cr, &ci, &stft)?;

            let g: Graph<S> = Graph::new();
            let p = self.params.map(&mut |_, t| g.constant(t.clone()));
            let spec = CVar::new(g.constant(nr), g.constant(ni));
            let out = forward(&g, spec, &p, &mut self.buffers, &self.model_cfg, Mode::Eval)?;
            let est = g.istft(out.enhanced.re, out.enhanced.im, stft)?;
            let obj = combined_loss(
                &g,
                est,
                g.constant(Tensor::new(vec![reference.len()], reference)),
                out.snr,
                g.constant(label),
                &self.weights,
            )?;
            total += g.value(obj.total).item().into_f64();
        }
        Ok(total / val.len() as f64)
    }

    /// Record a validation loss and apply the halving rule.
    pub fn record_validation(&mut self, loss: f64) {
        self.val_history.push(loss);
        self.opt.lr = lr_schedule(self.cfg.lr, self.cfg.lr_decay, &self.val_history);
    }

    /// Drive `steps` optimizer steps pulling batches from `next_batch`,
    /// validating every `val_every` steps when `val` is nonempty.
    pub fn run(
        &mut self,
        mut next_batch: impl FnMut(u64) -> Result<Vec<Utterance<S>>>,
        steps: u64,
        val: &[Utterance<S>],
        sink: &mut impl FnMut(&StepMetrics),
    ) -> Result<()> {
        for _ in 0..steps {
            let batch = next_batch(self.step)?;
            let mut m = self.train_step(&batch)?;
            if self.cfg.val_every > 0 && !val.is_empty() && self.step % self.cfg.val_every == 0 {
                let v = self.validate(val)?;
                self.record_validation(v);
                m.val = Some(v);
            }
            sink(&m);
        }
        Ok(())
    }

    /// `run` with batches freshly mixed from the pools; the per-item seed is
    /// a pure function of (config seed, step, item).
    pub fn run_dynamic(
        &mut self,
        pools: &MixPools<S>,
        steps: u64,
        val: &[Utterance<S>],
        sink: &mut impl FnMut(&StepMetrics),
    ) -> Result<()> {
        let cfg = self.cfg.clone();
        self.run(
            |step| {
                (0..cfg.batch)
                    .map(|i| {
                        dynamic_mix(pools, &cfg, mix_seed(cfg.seed, step, i as u64))
                            .map(Utterance::from)
                    })
                    .collect()
            },
            steps,
            val,
            sink,
        )
    }

    /// Snapshot everything a resumed run needs. Optimizer moments ride in
    /// the extras; scalar state rides in counters, with f64 values stored as
    /// raw bit patterns so nothing is lost to formatting.
    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ck = Checkpoint::new(
            self.model_cfg.clone(),
            self.params.clone(),
            self.buffers.clone(),
        );
        for (name, (m, v)) in self.opt.moments() {
            ck.extras.insert(format!("adam.m.{name}"), m.clone());
            ck.extras.insert(format!("adam.v.{name}"), v.clone());
        }
        ck.extras.insert(
            "labels.stats".into(),
            Tensor::new(vec![3], vec![self.labels.mu_hat, self.labels.sigma_hat, self.labels.alpha]),
        );
        ck.counters.insert("labels.initialized".into(), self.labels.initialized as u64);
        ck.counters.insert("trainer.step".into(), self.step);
        ck.counters.insert("adam.t".into(), self.opt.step_count());
        ck.counters.insert("trainer.lr_bits".into(), self.opt.lr.to_bits());
        ck.counters.insert("trainer.val_count".into(), self.val_history.len() as u64);
        for (i, &v) in self.val_history.iter().enumerate() {
            ck.counters.insert(format!("trainer.val.{i}_bits"), v.to_bits());
        }
        ck
    }

    /// Rebuild a trainer from a snapshot. A bare model checkpoint (no
    /// trainer fields) starts a fresh run around the stored weights.
    pub fn from_checkpoint(ck: Checkpoint<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let Checkpoint { config, params, buffers, extras, counters } = ck;

        let lr = counters.get("trainer.lr_bits").map(|&b| f64::from_bits(b)).unwrap_or(cfg.lr);
        let mut opt = Adam::new(lr);
        opt.set_step_count(counters.get("adam.t").copied().unwrap_or(0));
        for (key, m) in extras.iter() {
            if let Some(name) = key.strip_prefix("adam.m.") {
                let vkey = format!("adam.v.{name}");
                let v = extras.get(&vkey).ok_or_else(|| {
                    Error::CheckpointFormat(format!("optimizer moment {vkey} missing"))
                })?;
                opt.insert_moments(name.to_string(), m.clone(), v.clone());
            }
        }

        let mut labels = SnrLabelState::new();
        if let Some(t) = extras.get("labels.stats") {
            if t.len() != 3 {
                return Err(Error::CheckpointFormat(
                    "labels.stats must hold [mean, spread, momentum]".into(),
                ));
            }
            labels = SnrLabelState {
                mu_hat: t.data()[0],
                sigma_hat: t.data()[1],
                alpha: t.data()[2],
                initialized: counters.get("labels.initialized").copied().unwrap_or(0) != 0,
            };
        }

        let mut val_history = Vec::new();
        if let Some(&n) = counters.get("trainer.val_count") {
            for i in 0..n as usize {
                let bits = counters.get(&format!("trainer.val.{i}_bits")).ok_or_else(|| {
                    Error::CheckpointFormat(format!("validation history entry {i} missing"))
                })?;
                val_history.push(f64::from_bits(*bits));
            }
        }

        Ok(Trainer {
            step: counters.get("trainer.step").copied().unwrap_or(0),
            weights: LossWeights::default(),
            opt,
            labels,
            val_history,
            params,
            buffers,
            model_cfg: config,
            cfg,
        })
    }
}
