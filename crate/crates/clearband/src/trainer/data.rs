//! Corpus plumbing: manifest parsing, in-memory pools, and the per-step
//! dynamic mixing recipe.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::mix::{convolve_rir, draw_biquad, loop_to_len, mix_at_snr, power};
use crate::dsp::wav::{read_mono, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::TrainConfig;

/// Pool a manifest line feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Speech,
    Noise,
    Rir,
}

/// One `role path` line from a manifest file.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub role: Role,
    pub path: PathBuf,
}

/// Parse manifest text: one `role path` pair per line, `#` starts a comment,
/// blank lines are skipped, relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (word, rest) = line.split_once(char::is_whitespace).ok_or_else(|| {
            Error::Config(format!("manifest line {}: expected `role path`", idx + 1))
        })?;
        let role = match word {
            "speech" => Role::Speech,
            "noise" => Role::Noise,
            "rir" => Role::Rir,
            other => {
                return Err(Error::Config(format!(
                    "manifest line {}: unknown role {other:?} (want speech, noise or rir)",
                    idx + 1
                )))
            }
        };
        let p = Path::new(rest.trim());
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        out.push(ManifestEntry { role, path });
    }
    Ok(out)
}

/// Whole corpora held in memory. Desk-scale sets are a few minutes of audio,
/// so there is no point in streaming from disk.
#[derive(Debug, Clone)]
pub struct MixPools<S> {
    pub speech: Vec<Vec<S>>,
    pub noise: Vec<Vec<S>>,
    pub rir: Vec<Vec<S>>,
}

impl<S> Default for MixPools<S> {
    fn default() -> Self {
        MixPools { speech: Vec::new(), noise: Vec::new(), rir: Vec::new() }
    }
}

impl<S: Scalar> MixPools<S> {
    /// Load every file named by a manifest. Rejects anything that is not
    /// 16 kHz mono.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let entries = parse_manifest(&text, base)?;
        let mut pools = MixPools::default();
        for entry in entries {
            let (wave, rate) = read_mono::<S>(&entry.path)?;
            if rate != SAMPLE_RATE {
                return Err(Error::Data(format!(
                    "{}: expected {SAMPLE_RATE} Hz, got {rate}",
                    entry.path.display()
                )));
            }
            // Silence is screened once here; per-draw checks stay cheap.
            if entry.role != Role::Rir && (wave.is_empty() || power(&wave) == 0.0) {
                return Err(Error::Data(format!(
                    "{}: silent clip rejected",
                    entry.path.display()
                )));
            }
            match entry.role {
                Role::Speech => pools.speech.push(wave),
                Role::Noise => pools.noise.push(wave),
                Role::Rir => pools.rir.push(wave),
            }
        }
        Ok(pools)
    }

    /// Emptiness checks shared by every consumer. The room pool is only
    /// required when reverberation can actually be drawn.
    pub fn validate(&self, rir_prob: f64) -> Result<()> {
        if self.speech.is_empty() {
            return Err(Error::Data("speech pool is empty".into()));
        }
        if self.noise.is_empty() {
            return Err(Error::Data("noise pool is empty".into()));
        }
        if rir_prob > 0.0 && self.rir.is_empty() {
            return Err(Error::Data(
                "room response pool is empty but reverberation is enabled".into(),
            ));
        }
        Ok(())
    }
}

/// One training example plus the knobs that produced it.
#[derive(Debug, Clone)]
pub struct MixedUtterance<S> {
    pub noisy: Vec<S>,
    pub clean: Vec<S>,
    pub noise: Vec<S>,
    pub snr_db: f64,
    pub used_rir: bool,
    pub used_biquad: bool,
}

/// Cut or cycle `x` to exactly `len` samples, choosing the crop offset from
/// `rng`. Draws from the stream even when no offset is needed would shift
/// later draws, so the offset is only consumed for clips longer than `len`.
fn crop_to<S: Scalar>(x: &[S], len: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    if x.len() > len {
        let off = rng.gen_range(0..=x.len() - len);
        x[off..off + len].to_vec()
    } else {
        loop_to_len(x, len)
    }
}

/// Draw one training triple. The draw order is fixed so a seed pins the
/// example exactly: speech index, speech crop, noise index, noise crop, SNR,
/// spectral tilt flag (then coefficients), reverb flag (then room index).
/// Augmentations act on the speech before mixing, so reverberant speech is
/// also the learning target and the SNR is exact for the signal the network
/// actually sees.
pub fn dynamic_mix<S: Scalar>(
    pools: &MixPools<S>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<MixedUtterance<S>> {
    pools.validate(cfg.rir_prob)?;
    let crop = (cfg.crop_seconds * SAMPLE_RATE as f64).round() as usize;
    if crop == 0 {
        return Err(Error::Config("crop_seconds too short for one sample".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let s_idx = rng.gen_range(0..pools.speech.len());
    let mut speech = crop_to(&pools.speech[s_idx], crop, &mut rng);
    let n_idx = rng.gen_range(0..pools.noise.len());
    let noise = crop_to(&pools.noise[n_idx], crop, &mut rng);
    let snr_db = rng.gen_range(cfg.snr_range.0..cfg.snr_range.1);

    let used_biquad = cfg.biquad_prob > 0.0 && rng.gen_bool(cfg.biquad_prob);
    if used_biquad {
        speech = draw_biquad(&mut rng)?.apply(&speech);
    }
    let used_rir = cfg.rir_prob > 0.0 && rng.gen_bool(cfg.rir_prob);
    if used_rir {
        let r_idx = rng.gen_range(0..pools.rir.len());
        speech = convolve_rir(&speech, &pools.rir[r_idx])?;
    }

    let (noisy, clean, noise) = mix_at_snr(&speech, &noise, snr_db)?;
    Ok(MixedUtterance { noisy, clean, noise, snr_db, used_rir, used_biquad })
}
