//! Executable filtering models.
//!
//! * [`convolve_time`]: time-domain convolution `x_t = sum_tau w_tau s_{t-tau}`.
//! * [`apply_mask`]: per-bin multiplicative masking (narrowband model with a
//!   time-varying gain).
//! * [`apply_subband_filter`]: causal per-bin convolution over frames with a
//!   time-varying multi-frame filter.
//! * [`fit_static_filter`] / [`approximation_error`]: how well a static
//!   narrowband or subband model reproduces true time-domain filtering in
//!   the STFT domain. Cross-band terms are not modelled.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::linalg::lstsq_columns;
use crate::num_complex::Complex64;
use crate::seed;
use crate::stft::{stft, Spectrogram, StftConfig, Waveform};
use crate::{Error, Result};

/// Time-varying complex gain, one value per time-frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Mask {
    pub fn filled(frames: usize, bins: usize, value: Complex64) -> Self {
        Mask {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::Shape(format!(
                "mask data has {} entries, expected {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Mask { frames, bins, data })
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }
}

/// Time-varying causal filter; tap `tau` multiplies frame `t - tau`.
/// Stored as `[frame][tap][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFrameFilter {
    pub frames: usize,
    pub taps: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl MultiFrameFilter {
    pub fn zeros(frames: usize, taps: usize, bins: usize) -> Self {
        MultiFrameFilter {
            frames,
            taps,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * taps * bins],
        }
    }

    #[inline]
    pub fn index(&self, t: usize, tau: usize, f: usize) -> usize {
        (t * self.taps + tau) * self.bins + f
    }

    #[inline]
    pub fn at(&self, t: usize, tau: usize, f: usize) -> Complex64 {
        self.data[self.index(t, tau, f)]
    }

    /// The mask formed by tap `tau` at every frame.
    pub fn tap_mask(&self, tau: usize) -> Mask {
        let mut data = Vec::with_capacity(self.frames * self.bins);
        for t in 0..self.frames {
            let start = self.index(t, tau, 0);
            data.extend_from_slice(&self.data[start..start + self.bins]);
        }
        Mask {
            frames: self.frames,
            bins: self.bins,
            data,
        }
    }
}

/// Time-invariant subband filter, `[tap][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSubbandFilter {
    pub taps: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl StaticSubbandFilter {
    #[inline]
    pub fn at(&self, tau: usize, f: usize) -> Complex64 {
        self.data[tau * self.bins + f]
    }

    /// Energy of each tap summed over frequency.
    pub fn tap_energies(&self) -> Vec<f64> {
        (0..self.taps)
            .map(|tau| (0..self.bins).map(|f| self.at(tau, f).norm_sqr()).sum())
            .collect()
    }

    /// Applies the filter as a causal per-bin convolution over frames.
    pub fn apply(&self, spec: &Spectrogram) -> Result<Spectrogram> {
        if spec.bins != self.bins {
            return Err(Error::Shape(format!(
                "static filter has {} bins, spectrogram {}",
                self.bins, spec.bins
            )));
        }
        let mut out = Spectrogram::zeros(spec.frames, spec.bins);
        for t in 0..spec.frames {
            for f in 0..spec.bins {
                let mut acc = self.at(0, f) * spec.at(t, f);
                for tau in 1..self.taps.min(t + 1) {
                    acc += self.at(tau, f) * spec.at(t - tau, f);
                }
                *out.at_mut(t, f) = acc;
            }
        }
        Ok(out)
    }
}

// Below this many multiply-adds the direct sum is used.
const DIRECT_CONV_LIMIT: usize = 1 << 22;

/// Linear convolution of `s` with `w`, truncated to `len(s)` samples.
pub fn convolve_time(s: &Waveform, w: &Waveform) -> Result<Waveform> {
    if s.sample_rate != w.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: s.sample_rate,
            found: w.sample_rate,
        });
    }
    if w.is_empty() {
        return Err(Error::Empty("filter"));
    }
    let samples = if s.len() * w.len() <= DIRECT_CONV_LIMIT {
        convolve_direct(&s.samples, &w.samples)
    } else {
        convolve_fft(&s.samples, &w.samples)
    };
    Ok(Waveform {
        samples,
        sample_rate: s.sample_rate,
    })
}

fn convolve_direct(s: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for (tau, &wt) in w.iter().enumerate() {
        if wt == 0.0 || tau >= s.len() {
            continue;
        }
        for (o, &x) in out[tau..].iter_mut().zip(s) {
            *o += wt * x;
        }
    }
    out
}

fn convolve_fft(s: &[f64], w: &[f64]) -> Vec<f64> {
    let n = (s.len() + w.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let mut a = lift(s);
    let mut b = lift(w);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..s.len()].iter().map(|z| z.re * scale).collect()
}

/// Elementwise masking, `out[t,f] = m[t,f] * x[t,f]`.
pub fn apply_mask(spec: &Spectrogram, m: &Mask) -> Result<Spectrogram> {
    if spec.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrogram {:?}",
            m.shape(),
            spec.shape()
        )));
    }
    let data = spec.data.iter().zip(&m.data).map(|(x, g)| g * x).collect();
    Ok(Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        data,
    })
}

/// Causal subband filtering, `out[t,f] = sum_tau filt[t,tau,f] * x[t-tau,f]`,
/// with frames before the start read as zero.
pub fn apply_subband_filter(spec: &Spectrogram, filt: &MultiFrameFilter) -> Result<Spectrogram> {
    if filt.frames != spec.frames || filt.bins != spec.bins {
        return Err(Error::Shape(format!(
            "filter {}x{} (taps {}) vs spectrogram {:?}",
            filt.frames,
            filt.bins,
            filt.taps,
            spec.shape()
        )));
    }
    if filt.taps == 0 {
        return Err(Error::Shape("filter has no taps".into()));
    }
    let mut out = Spectrogram::zeros(spec.frames, spec.bins);
    for t in 0..spec.frames {
        let taps = filt.taps.min(t + 1);
        for f in 0..spec.bins {
            // Start from the tap-0 product so one tap reproduces masking bit for bit.
            let mut acc = filt.at(t, 0, f) * spec.at(t, f);
            for tau in 1..taps {
                acc += filt.at(t, tau, f) * spec.at(t - tau, f);
            }
            *out.at_mut(t, f) = acc;
        }
    }
    Ok(out)
}

/// Least-squares static subband filter mapping `input` to `output` per
/// frequency: minimises `sum_t |out[t,f] - sum_tau w[tau,f] in[t-tau,f]|^2`.
pub fn fit_static_filter(
    input: &Spectrogram,
    output: &Spectrogram,
    n_f: usize,
) -> Result<StaticSubbandFilter> {
    if n_f == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    input.ensure_same_shape(output, "fit_static_filter")?;
    let (frames, bins) = input.shape();
    let mut data = vec![Complex64::new(0.0, 0.0); n_f * bins];
    let zero = Complex64::new(0.0, 0.0);
    for f in 0..bins {
        let columns: Vec<Vec<Complex64>> = (0..n_f)
            .map(|tau| {
                (0..frames)
                    .map(|t| if t >= tau { input.at(t - tau, f) } else { zero })
                    .collect()
            })
            .collect();
        let target: Vec<Complex64> = (0..frames).map(|t| output.at(t, f)).collect();
        let taps = lstsq_columns(&columns, &target)?;
        for (tau, v) in taps.into_iter().enumerate() {
            data[tau * bins + f] = v;
        }
    }
    Ok(StaticSubbandFilter {
        taps: n_f,
        bins,
        data,
    })
}

/// Subband taps of a time-domain filter, fitted by least squares on a
/// seeded white-noise probe so that filtering in the STFT domain best
/// matches [`convolve_time`] followed by analysis.
pub fn static_filter_from_rir(
    w: &Waveform,
    cfg: &StftConfig,
    n_f: usize,
) -> Result<StaticSubbandFilter> {
    if n_f == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    let probe_len = (4 * w.len()).max(2 * cfg.sample_rate as usize);
    let mut rng = seed::rng(0, seed::STREAM_PROBE);
    let probe = Waveform::new(
        (0..probe_len).map(|_| StandardNormal.sample(&mut rng)).collect(),
        w.sample_rate,
    )?;
    let filtered = convolve_time(&probe, w)?;
    fit_static_filter(&stft(&probe, cfg)?, &stft(&filtered, cfg)?, n_f)
}

/// Subband taps read directly off the STFT of `w`: tap `tau` is the
/// windowed DFT of `w[tau*hop - N/2 .. tau*hop + N/2)` with the window
/// center taken as time zero and zeros outside `w`. A unit impulse gives
/// tap 0 equal to 1 at every bin. This ignores the synthesis window, so
/// it under-weights long filters relative to [`static_filter_from_rir`].
pub fn static_filter_direct(
    w: &Waveform,
    cfg: &StftConfig,
    n_f: usize,
) -> Result<StaticSubbandFilter> {
    if n_f == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    cfg.validate()?;
    let n = cfg.window_len;
    let half = n / 2;
    let bins = cfg.n_bins();
    let win = cfg.window();
    let mut data = vec![Complex64::new(0.0, 0.0); n_f * bins];
    for tau in 0..n_f {
        for f in 0..bins {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, wk) in win.iter().enumerate() {
                let idx = (tau * cfg.hop + k) as isize - half as isize;
                if idx < 0 || idx as usize >= w.len() {
                    continue;
                }
                let ang = -2.0 * PI * (f as f64) * (k as f64 - half as f64) / n as f64;
                acc += Complex64::new(ang.cos(), ang.sin()) * (wk * w.samples[idx as usize]);
            }
            data[tau * bins + f] = acc;
        }
    }
    Ok(StaticSubbandFilter {
        taps: n_f,
        bins,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproxMode {
    Narrowband,
    Subband(usize),
}

impl ApproxMode {
    pub fn taps(&self) -> usize {
        match *self {
            ApproxMode::Narrowband => 1,
            ApproxMode::Subband(n) => n,
        }
    }
}

/// Relative error in dB of the best static model of the chosen class:
/// `10 log10(|M(S) - Y|^2 / |Y|^2)` with `S = stft(s)`,
/// `Y = stft(convolve_time(s, w))` and `M` the least-squares filter.
pub fn approximation_error(
    s: &Waveform,
    w: &Waveform,
    cfg: &StftConfig,
    mode: ApproxMode,
) -> Result<f64> {
    if mode.taps() == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    let input = stft(s, cfg)?;
    let target = stft(&convolve_time(s, w)?, cfg)?;
    let reference = target.energy();
    if input.energy() == 0.0 || reference == 0.0 {
        return Err(Error::Degenerate(
            "approximation error needs nonzero signal and filtered signal".into(),
        ));
    }
    let filt = fit_static_filter(&input, &target, mode.taps())?;
    let est = filt.apply(&input)?;
    let err: f64 = est
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(10.0 * (err / reference).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Spectrogram {
        let data = (0..frames * bins)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        Spectrogram::from_vec(frames, bins, data).unwrap()
    }

    fn noise(rng: &mut ChaCha8Rng, len: usize) -> Waveform {
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    fn impulse(len: usize, at: usize) -> Waveform {
        let mut v = vec![0.0; len];
        v[at] = 1.0;
        Waveform::new(v, 16_000).unwrap()
    }

    fn naive_conv(s: &[f64], w: &[f64]) -> Vec<f64> {
        (0..s.len())
            .map(|t| {
                let mut acc = 0.0;
                for (tau, wt) in w.iter().enumerate() {
                    if tau <= t {
                        acc += wt * s[t - tau];
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn convolution_identity_and_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = noise(&mut rng, 300);
        assert_eq!(convolve_time(&s, &impulse(1, 0)).unwrap(), s);
        let y = convolve_time(&s, &impulse(10, 7)).unwrap();
        assert!(y.samples[..7].iter().all(|&v| v == 0.0));
        assert_eq!(&y.samples[7..], &s.samples[..293]);
    }

    #[test]
    fn convolution_matches_naive_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ls, lw) in [(1000, 50), (6000, 1000)] {
            let s = noise(&mut rng, ls);
            let w = noise(&mut rng, lw);
            let y = convolve_time(&s, &w).unwrap();
            let oracle = naive_conv(&s.samples, &w.samples);
            let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = y
                .samples
                .iter()
                .zip(&oracle)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-12 * scale, "({ls},{lw}) err {err}");
        }
    }

    #[test]
    fn convolution_rejects_rate_mismatch() {
        let s = Waveform::zeros(10, 16_000);
        let w = Waveform::zeros(2, 8_000);
        assert!(convolve_time(&s, &w).is_err());
    }

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_spec(&mut rng, 4, 3);
        assert_eq!(apply_mask(&x, &Mask::filled(4, 3, c(1.0, 0.0))).unwrap(), x);
        let z = apply_mask(&x, &Mask::filled(4, 3, c(0.0, 0.0))).unwrap();
        assert!(z.data.iter().all(|v| v.norm() == 0.0));

        let one = Spectrogram::from_vec(1, 1, vec![c(1.0, 1.0)]).unwrap();
        let out = apply_mask(&one, &Mask::filled(1, 1, c(0.0, 1.0))).unwrap();
        assert_eq!(out.at(0, 0), c(-1.0, 1.0));
        assert!(apply_mask(&one, &Mask::filled(2, 1, c(0.0, 1.0))).is_err());
    }

    #[test]
    fn subband_filter_identity_and_single_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_spec(&mut rng, 6, 5);
        let mut filt = MultiFrameFilter::zeros(6, 3, 5);
        for t in 0..6 {
            for f in 0..5 {
                let i = filt.index(t, 0, f);
                filt.data[i] = c(1.0, 0.0);
            }
        }
        assert_eq!(apply_subband_filter(&x, &filt).unwrap(), x);

        let mut one = MultiFrameFilter::zeros(6, 1, 5);
        for v in one.data.iter_mut() {
            *v = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let a = apply_subband_filter(&x, &one).unwrap();
        let b = apply_mask(&x, &one.tap_mask(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subband_filter_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (frames, bins, taps) = (8, 4, 3);
        let x = random_spec(&mut rng, frames, bins);
        let mut filt = MultiFrameFilter::zeros(frames, taps, bins);
        for v in filt.data.iter_mut() {
            *v = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let y = apply_subband_filter(&x, &filt).unwrap();
        for t in 0..frames {
            for f in 0..bins {
                let mut re = 0.0;
                let mut im = 0.0;
                for tau in 0..taps {
                    if tau > t {
                        continue;
                    }
                    let (a, b) = (filt.at(t, tau, f).re, filt.at(t, tau, f).im);
                    let (p, q) = (x.at(t - tau, f).re, x.at(t - tau, f).im);
                    re += a * p - b * q;
                    im += a * q + b * p;
                }
                assert!((y.at(t, f) - c(re, im)).norm() <= 1e-12 * c(re, im).norm().max(1.0));
            }
        }
    }

    #[test]
    fn subband_filter_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_spec(&mut rng, 10, 3);
        let mut filt = MultiFrameFilter::zeros(10, 4, 3);
        for v in filt.data.iter_mut() {
            *v = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let y = apply_subband_filter(&x, &filt).unwrap();
        let mut x2 = x.clone();
        for f in 0..3 {
            *x2.at_mut(6, f) += c(5.0, -3.0);
        }
        let y2 = apply_subband_filter(&x2, &filt).unwrap();
        for t in 0..6 {
            assert_eq!(y.frame(t), y2.frame(t));
        }
        assert_ne!(y.frame(6), y2.frame(6));
    }

    #[test]
    fn static_filter_impulse_cases() {
        let cfg = StftConfig::default();
        let delta = impulse(1, 0);
        for filt in [
            static_filter_from_rir(&delta, &cfg, 3).unwrap(),
            static_filter_direct(&delta, &cfg, 3).unwrap(),
        ] {
            for f in 0..filt.bins {
                assert!((filt.at(0, f) - c(1.0, 0.0)).norm() < 1e-6, "bin {f}");
                assert!(filt.at(1, f).norm() < 1e-6);
                assert!(filt.at(2, f).norm() < 1e-6);
            }
        }
        assert!(static_filter_from_rir(&delta, &cfg, 0).is_err());
    }

    #[test]
    fn short_filter_has_one_dominant_tap() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Waveform::new(
            (0..64)
                .map(|i| rng.random_range(-1.0..1.0) * (-(i as f64) / 16.0).exp())
                .collect(),
            16_000,
        )
        .unwrap();
        let e = static_filter_from_rir(&w, &cfg, 4).unwrap().tap_energies();
        let total: f64 = e.iter().sum();
        assert!(e[0] / total > 0.95, "tap energies {e:?}");
    }

    #[test]
    fn approximation_error_for_identity_filter() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = noise(&mut rng, 8000);
        let d = impulse(1, 0);
        assert!(approximation_error(&s, &d, &cfg, ApproxMode::Narrowband).unwrap() < -100.0);
        assert!(approximation_error(&s, &d, &cfg, ApproxMode::Subband(4)).unwrap() < -100.0);
        assert!(approximation_error(&s, &d, &cfg, ApproxMode::Subband(0)).is_err());
        let z = Waveform::zeros(8000, 16_000);
        assert!(approximation_error(&z, &d, &cfg, ApproxMode::Narrowband).is_err());
    }
}
