//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames are centered: frame `t` is centered on sample `t * hop`, so a
//! signal of `len` samples yields `ceil(len / hop)` frames. The signal is
//! reflection-padded at both edges (zero-padded when it is too short to
//! reflect). The analysis window is a periodic Hann window, which satisfies
//! the constant-overlap-add condition at 50% overlap.
//!
//! Synthesis is weighted overlap-add normalised by the summed squared
//! window, i.e. the least-squares inverse of the analysis operator.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::num_complex::Complex64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 320,
            hop: 160,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let cfg = StftConfig {
            window_len,
            hop,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return Err(Error::Config(format!(
                "window_len must be even and >= 2, got {}",
                self.window_len
            )));
        }
        if self.hop * 2 != self.window_len {
            return Err(Error::Config(format!(
                "hop must be window_len/2 (50% overlap), got hop={} window_len={}",
                self.hop, self.window_len
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Number of frequency bins, `window_len / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        hann(self.window_len)
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Complex `frames x bins` matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Spectrogram {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::Shape(format!(
                "spectrogram data has {} entries, expected {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Spectrogram { frames, bins, data })
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, f: usize) -> &mut Complex64 {
        &mut self.data[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub(crate) fn ensure_same_shape(&self, other: &Spectrogram, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Square-root compressed network input: channel 0 is `sqrt|x| cos(phase)`,
/// channel 1 is `sqrt|x| sin(phase)`. Stored as `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    #[inline]
    pub fn at(&self, channel: usize, t: usize, f: usize) -> f64 {
        self.data[(channel * self.frames + t) * self.bins + f]
    }
}

pub fn compress_features(spec: &Spectrogram) -> Result<FeatureTensor> {
    if !spec.is_finite() {
        return Err(Error::NonFinite("spectrogram"));
    }
    let plane = spec.frames * spec.bins;
    let mut data = vec![0.0; 2 * plane];
    for (i, z) in spec.data.iter().enumerate() {
        let mag = z.norm();
        if mag > 0.0 {
            // sqrt(mag) * (re/mag, im/mag)
            let s = mag.sqrt();
            data[i] = z.re / s;
            data[plane + i] = z.im / s;
        }
    }
    Ok(FeatureTensor {
        frames: spec.frames,
        bins: spec.bins,
        data,
    })
}

/// Reusable analysis/synthesis plan for one configuration.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Stft {
            cfg,
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.window_len),
            inverse: planner.plan_fft_inverse(cfg.window_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn analyze(&self, wav: &Waveform) -> Result<Spectrogram> {
        if wav.sample_rate != self.cfg.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.cfg.sample_rate,
                found: wav.sample_rate,
            });
        }
        if wav.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        let n = self.cfg.window_len;
        let half = n / 2;
        let frames = self.cfg.frames_for(wav.len());
        let bins = self.cfg.n_bins();
        let padded = pad_centered(&wav.samples, half, (frames - 1) * self.cfg.hop + n);

        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + k] * self.window[k], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram {
            frames,
            bins,
            data: out,
        })
    }

    /// Analysis of `wav` followed by one hop of zeros. With exactly
    /// `ceil(len / hop)` frames the last hop of samples is covered only by
    /// the tail of the final window, so synthesis divides by weights that
    /// fall towards zero; harmless for an unmodified spectrogram, but it
    /// amplifies any mask or filter applied there. The extra frame keeps
    /// every original sample under two windows. Truncate the synthesis to
    /// `wav.len()` afterwards.
    pub fn analyze_for_processing(&self, wav: &Waveform) -> Result<Spectrogram> {
        let mut padded = wav.samples.clone();
        padded.resize(wav.len() + self.cfg.hop, 0.0);
        self.analyze(&Waveform {
            samples: padded,
            sample_rate: wav.sample_rate,
        })
    }

    /// Overlap-add synthesis; returns `frames * hop` samples.
    pub fn synthesize(&self, spec: &Spectrogram) -> Result<Waveform> {
        let n = self.cfg.window_len;
        let hop = self.cfg.hop;
        let half = n / 2;
        if spec.bins != self.cfg.n_bins() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, config expects {}",
                spec.bins,
                self.cfg.n_bins()
            )));
        }
        if spec.frames == 0 {
            return Err(Error::Empty("spectrogram"));
        }
        if !spec.is_finite() {
            return Err(Error::NonFinite("spectrogram"));
        }
        let padded_len = (spec.frames - 1) * hop + n;
        let mut acc = vec![0.0; padded_len];
        let mut norm = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / n as f64;
        for t in 0..spec.frames {
            let row = spec.frame(t);
            buf[..spec.bins].copy_from_slice(row);
            // Hermitian completion; DC and Nyquist imaginary parts are dropped.
            buf[0].im = 0.0;
            buf[half].im = 0.0;
            for k in 1..half {
                buf[n - k] = row[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            for k in 0..n {
                let w = self.window[k];
                acc[start + k] += w * buf[k].re * scale;
                norm[start + k] += w * w;
            }
        }
        let len = spec.frames * hop;
        let samples = (0..len)
            .map(|i| {
                let p = i + half;
                if norm[p] > 0.0 {
                    acc[p] / norm[p]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Waveform {
            samples,
            sample_rate: self.cfg.sample_rate,
        })
    }
}

fn pad_centered(x: &[f64], left: usize, total: usize) -> Vec<f64> {
    let len = x.len() as isize;
    (0..total)
        .map(|p| {
            let mut i = p as isize - left as isize;
            if i < 0 {
                i = -i;
            } else if i >= len {
                i = 2 * (len - 1) - i;
            }
            if (0..len).contains(&i) {
                x[i as usize]
            } else {
                0.0
            }
        })
        .collect()
}

pub fn stft(wav: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*cfg)?.analyze(wav)
}

/// Inverse STFT returning `frames * hop` samples.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    Stft::new(*cfg)?.synthesize(spec)
}

/// Inverse STFT truncated to `len` samples, `len <= frames * hop`.
pub fn istft_len(spec: &Spectrogram, cfg: &StftConfig, len: usize) -> Result<Waveform> {
    let mut wav = istft(spec, cfg)?;
    if len > wav.len() {
        return Err(Error::Shape(format!(
            "requested {len} samples from {} frames of hop {}",
            spec.frames, cfg.hop
        )));
    }
    wav.samples.truncate(len);
    Ok(wav)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wav(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn processing_frame_keeps_masked_tail_bounded() {
        let cfg = StftConfig::default();
        let plan = Stft::new(cfg).unwrap();
        let x = random_wav(16_000, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut spec = plan.analyze_for_processing(&x).unwrap();
        assert_eq!(spec.frames, cfg.frames_for(x.len()) + 1);
        for z in spec.data.iter_mut() {
            *z *= rng.random_range(0.0..1.0);
        }
        let y = istft_len(&spec, &cfg, x.len()).unwrap();
        assert!(y.peak() <= 2.0 * x.peak(), "peak {}", y.peak());
    }

    #[test]
    fn default_config_shape() {
        let cfg = StftConfig::default();
        let spec = stft(&Waveform::zeros(16_000, 16_000), &cfg).unwrap();
        assert_eq!(spec.shape(), (100, 161));
        assert!(spec.data.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert_eq!(cfg.frames_per_second(), 100.0);
    }

    #[test]
    fn frame_count_is_ceil() {
        let cfg = StftConfig::default();
        for len in [1usize, 159, 160, 161, 1000, 16_001] {
            let spec = stft(&random_wav(len, 1), &cfg).unwrap();
            assert_eq!(spec.frames, len.div_ceil(160), "len {len}");
        }
    }

    #[test]
    fn rejects_rate_mismatch_and_bad_config() {
        let cfg = StftConfig::default();
        let wav = Waveform::zeros(100, 8_000);
        assert!(matches!(
            stft(&wav, &cfg),
            Err(Error::SampleRateMismatch { .. })
        ));
        assert!(StftConfig::new(320, 100, 16_000).is_err());
        assert!(StftConfig::new(320, 160, 0).is_err());
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16_000).is_err());
    }

    #[test]
    fn impulse_at_frame_center_is_flat() {
        // Only frame t sees the impulse with nonzero weight; its spectrum is
        // window[center] * exp(-j w center), i.e. flat magnitude 1.
        let cfg = StftConfig::default();
        let mut x = vec![0.0; 4000];
        x[10 * 160] = 1.0;
        let spec = stft(&Waveform::new(x, 16_000).unwrap(), &cfg).unwrap();
        for f in 0..spec.bins {
            assert!((spec.at(10, f).norm() - 1.0).abs() < 1e-12);
            assert!(spec.at(11, f).norm() < 1e-12);
            assert!(spec.at(9, f).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_signal_matches_direct_dft_of_window() {
        let cfg = StftConfig::default();
        let win = cfg.window();
        let spec = stft(&Waveform::new(vec![1.0; 3200], 16_000).unwrap(), &cfg).unwrap();
        for f in 0..spec.bins {
            let mut direct = Complex64::new(0.0, 0.0);
            for (k, w) in win.iter().enumerate() {
                let ang = -2.0 * PI * (f * k) as f64 / win.len() as f64;
                direct += Complex64::new(ang.cos(), ang.sin()) * *w;
            }
            assert!((spec.at(5, f) - direct).norm() < 1e-10, "bin {f}");
        }
    }

    #[test]
    fn round_trip_random() {
        let cfg = StftConfig::default();
        for seed in 0..5 {
            let x = random_wav(16_000, seed);
            let y = istft_len(&stft(&x, &cfg).unwrap(), &cfg, x.len()).unwrap();
            let err = x
                .samples
                .iter()
                .zip(&y.samples)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-10 * x.peak(), "err {err}");
        }
    }

    #[test]
    fn round_trip_short_signal_uses_zero_padding() {
        let cfg = StftConfig::default();
        let x = random_wav(100, 3);
        let y = istft_len(&stft(&x, &cfg).unwrap(), &cfg, 100).unwrap();
        for (a, b) in x.samples.iter().zip(&y.samples) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_spectrogram_synthesizes_zeros() {
        let cfg = StftConfig::default();
        let wav = istft(&Spectrogram::zeros(20, 161), &cfg).unwrap();
        assert_eq!(wav.len(), 3200);
        assert!(wav.samples.iter().all(|&s| s == 0.0));
        assert!(istft(&Spectrogram::zeros(20, 160), &cfg).is_err());
    }

    #[test]
    fn compressed_features() {
        let spec = Spectrogram::from_vec(
            1,
            3,
            vec![
                Complex64::new(4.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, -9.0),
            ],
        )
        .unwrap();
        let feat = compress_features(&spec).unwrap();
        assert_eq!((feat.at(0, 0, 0), feat.at(1, 0, 0)), (2.0, 0.0));
        assert_eq!((feat.at(0, 0, 1), feat.at(1, 0, 1)), (0.0, 0.0));
        assert_eq!(feat.at(0, 0, 2), 0.0);
        assert!((feat.at(1, 0, 2) + 3.0).abs() < 1e-15);

        let bad = Spectrogram::from_vec(1, 1, vec![Complex64::new(f64::NAN, 0.0)]).unwrap();
        assert!(compress_features(&bad).is_err());
    }
}
