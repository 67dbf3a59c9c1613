//! Mono WAV I/O normalized to [-1, 1].

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SAMPLE_RATE: u32 = 16_000;

fn wav_err(e: hound::Error) -> Error {
    Error::WavFormat(e.to_string())
}

/// Read a WAV file as one channel of scalars plus its sample rate.
/// Integer PCM divides by full scale; float samples pass through. Formats
/// other than mono are rejected here so callers get a typed error instead of
/// silently averaged channels.
pub fn read_mono<S: Scalar>(path: &Path) -> Result<(Vec<S>, u32)> {
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<S> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| S::of_f64(v as f64)).map_err(wav_err))
            .collect::<Result<_>>()?,
        (SampleFormat::Int, bits) if bits > 1 && bits <= 32 => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| S::of_f64(v as f64 * scale)).map_err(wav_err))
                .collect::<Result<_>>()?
        }
        (fmt, bits) => {
            return Err(Error::WavFormat(format!(
                "{}: unsupported format {fmt:?}/{bits}",
                path.display()
            )))
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Write 16-bit PCM; samples are clamped to [-1, 1] first.
pub fn write_mono<S: Scalar>(path: &Path, samples: &[S], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        // Same 2^15 scale as the reader, so the round trip only quantizes.
        let q = (s.into_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(())
}

/// Write 32-bit float samples unquantized.
pub fn write_mono_f32<S: Scalar>(path: &Path, samples: &[S], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        writer.write_sample(s.into_f64() as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let x: Vec<f32> =
            (0..800).map(|i| 0.7 * (i as f32 * 0.05).sin()).collect();
        write_mono(&path, &x, SAMPLE_RATE).unwrap();
        let (y, rate) = read_mono::<f32>(&path).unwrap();
        assert_eq!(rate, SAMPLE_RATE);
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let x: Vec<f32> = (0..100).map(|i| ((i * 2654435761u64 as usize) as f32).sin()).collect();
        write_mono_f32(&path, &x, SAMPLE_RATE).unwrap();
        let (y, _) = read_mono::<f32>(&path).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn clipping_is_saturating_not_wrapping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hot.wav");
        write_mono(&path, &[2.0f32, -2.0], SAMPLE_RATE).unwrap();
        let (y, _) = read_mono::<f32>(&path).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-3 && (y[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_mono::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("mono"), "{err}");
    }

    #[test]
    fn garbage_is_a_format_error_not_a_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::File::create(&path).unwrap().write_all(b"not a wav").unwrap();
        assert!(matches!(read_mono::<f32>(&path), Err(Error::WavFormat(_))));
    }
}
