//! RIFF WAV input/output (mono, 16 kHz, 16-bit PCM or 32-bit float).

use std::path::Path;

use crate::stft::Waveform;
use crate::{Error, Result};

/// Sample encoding for written files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

pub const SUPPORTED_RATE: u32 = 16_000;

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    let format_err = |reason: String| Error::WavFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(format_err(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SUPPORTED_RATE {
        return Err(format_err(format!(
            "sample rate {} Hz, expected {SUPPORTED_RATE} Hz (no resampling)",
            spec.sample_rate
        )));
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(format_err(format!(
                "{bits}-bit {fmt:?} samples, expected 16-bit PCM or 32-bit float"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    if wav.sample_rate != SUPPORTED_RATE {
        return Err(Error::SampleRateMismatch {
            expected: SUPPORTED_RATE,
            found: wav.sample_rate,
        });
    }
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: bits,
        sample_format: format,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wav.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..500).map(|i| ((i as f32) * 0.013).sin() as f64).collect();
        let wav = Waveform::new(samples, 16_000).unwrap();
        write_wav(&p, &wav, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), wav);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let samples: Vec<f64> = (0..500).map(|i| 0.9 * (i as f64 * 0.05).sin()).collect();
        let wav = Waveform::new(samples, 16_000).unwrap();
        write_wav(&p, &wav, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        for (a, b) in wav.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_other_rates_and_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::WavFormat { .. })));

        let p2 = dir.path().join("d.wav");
        let spec = hound::WavSpec {
            channels: 2,
            ..hound::WavSpec {
                channels: 1,
                sample_rate: 16_000,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            }
        };
        let mut w = hound::WavWriter::create(&p2, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p2), Err(Error::WavFormat { .. })));

        let wav = Waveform::zeros(10, 8_000);
        assert!(write_wav(dir.path().join("e.wav"), &wav, WavEncoding::Float32).is_err());
    }
}
