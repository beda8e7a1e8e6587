//! Synthetic corruption data.
//!
//! Two pipelines produce `(mixture, target)` pairs:
//!
//! * **denoise**: a speech-like source plus white, pink or babble-like noise
//!   at an SNR drawn from U[-6, 14] dB. The target is the clean source.
//! * **dereverb**: a speech-like source convolved with an exponentially
//!   decaying noise RIR (T60 ~ U[0.4, 1.0] s). The target is the same source
//!   convolved with the RIR shaped down to a 200 ms T60.
//!
//! Record `i` of a dataset draws all of its randomness from
//! `seed::derive_seed(seed, i)`, with records indexed train, then valid,
//! then test.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::filtering::convolve_time;
use crate::seed;
use crate::stft::Waveform;
use crate::wav::{write_wav, WavEncoding};
use crate::{Error, Result};

/// `3 ln 10`: an amplitude envelope `exp(-DECAY * t / T60)` loses 60 dB of
/// energy at `t = T60`.
pub const DECAY: f64 = 3.0 * std::f64::consts::LN_10;

pub const SNR_RANGE_DB: (f64, f64) = (-6.0, 14.0);
pub const T60_RANGE_S: (f64, f64) = (0.4, 1.0);
pub const TARGET_T60_S: f64 = 0.2;
pub const DRR_MEAN_DB: f64 = -5.3;
pub const DRR_HALF_WIDTH_DB: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Dereverb,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Dereverb => "dereverb",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "dereverb" => Ok(Task::Dereverb),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected denoise or dereverb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

// ---------------------------------------------------------------------------
// Sources

/// Harmonic source with a drifting pitch (80-300 Hz), shaped by three
/// slowly moving formant resonators and gated into syllables and pauses.
/// Peak-normalised to 1.
pub fn gen_speech_like(seed: u64, duration: f64, sample_rate: u32) -> Result<Waveform> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    let sr = sample_rate as f64;
    let n = (duration * sr).round().max(1.0) as usize;
    let mut rng = seed::rng(seed, 0x5EEC);

    // Pitch contour: base pitch with two slow sinusoidal drifts.
    let base = rng.random_range(100.0..220.0);
    let drifts: Vec<(f64, f64, f64)> = (0..2)
        .map(|i| {
            (
                rng.random_range(0.3..2.5),
                rng.random_range(0.0..2.0 * PI),
                if i == 0 { 0.2 } else { 0.08 },
            )
        })
        .collect();

    // Syllable envelope and per-syllable vowel targets.
    let mut envelope = vec![0.0; n];
    let mut formant_track: Vec<[f64; 3]> = vec![[500.0, 1500.0, 2700.0]; n];
    let mut pos = rng.random_range(0..(0.05 * sr) as usize + 1);
    let mut prev = random_vowel(&mut rng);
    while pos < n {
        let syl = (rng.random_range(0.12..0.35) * sr) as usize;
        let vowel = random_vowel(&mut rng);
        let level = rng.random_range(0.5..1.0);
        for k in 0..syl.min(n - pos) {
            let x = k as f64 / syl as f64;
            envelope[pos + k] = level * (PI * x).sin().powf(0.6);
            let glide = (x * 4.0).min(1.0);
            for j in 0..3 {
                formant_track[pos + k][j] = prev[j] + (vowel[j] - prev[j]) * glide;
            }
        }
        prev = vowel;
        pos += syl;
        let gap = if rng.random_bool(0.15) {
            rng.random_range(0.2..0.5)
        } else {
            rng.random_range(0.02..0.1)
        };
        pos += (gap * sr) as usize;
    }

    // Band-limited harmonic excitation.
    let max_freq = 0.45 * sr;
    let mut phase = 0.0f64;
    let mut excitation = vec![0.0; n];
    for (i, e) in excitation.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut f0 = base;
        for (rate, ph, depth) in &drifts {
            f0 *= 1.0 + depth * (2.0 * PI * rate * t + ph).sin();
        }
        let f0 = f0.clamp(80.0, 300.0);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let harmonics = (max_freq / f0) as usize;
        let mut acc = 0.0;
        for k in 1..=harmonics {
            acc += (k as f64 * phase).sin() / (k as f64).powf(0.8);
        }
        let breath: f64 = StandardNormal.sample(&mut rng);
        *e = acc + 0.05 * breath;
    }

    // Time-varying cascade of resonators.
    let bandwidths = [90.0, 130.0, 200.0];
    let mut state = [[0.0f64; 2]; 3];
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut x = excitation[i] * envelope[i];
        for j in 0..3 {
            let r = (-PI * bandwidths[j] / sr).exp();
            let theta = 2.0 * PI * formant_track[i][j] / sr;
            let y = (1.0 - r) * x + 2.0 * r * theta.cos() * state[j][0] - r * r * state[j][1];
            state[j][1] = state[j][0];
            state[j][0] = y;
            x = y;
        }
        out[i] = x;
    }
    normalize_peak(out, sample_rate)
}

fn random_vowel(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(300.0..850.0),
        rng.random_range(900.0..2300.0),
        rng.random_range(2400.0..3300.0),
    ]
}

fn normalize_peak(mut samples: Vec<f64>, sample_rate: u32) -> Result<Waveform> {
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        for s in samples.iter_mut() {
            *s /= peak;
        }
    }
    Waveform::new(samples, sample_rate)
}

pub fn gen_noise(kind: NoiseKind, seed: u64, len: usize, sample_rate: u32) -> Result<Waveform> {
    let mut rng = seed::rng(seed, 0x2015E);
    let samples: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let duration = len as f64 / sample_rate as f64;
            let mut acc = vec![0.0; len];
            for talker in 0..4u64 {
                let v = gen_speech_like(seed::derive_seed(seed, 0xBAB0 + talker), duration, sample_rate)?;
                for (a, b) in acc.iter_mut().zip(&v.samples) {
                    *a += b;
                }
            }
            acc
        }
    };
    normalize_peak(samples, sample_rate)
}

// ---------------------------------------------------------------------------
// Room impulse responses

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RirSpec {
    pub t60: f64,
    pub drr_db: f64,
    pub direct_delay: usize,
    pub length: usize,
    pub seed: u64,
}

impl RirSpec {
    /// Draws T60 ~ U[0.4, 1.0] s, DRR ~ U[-8.3, -2.3] dB (mean -5.3),
    /// direct delay 1-10 ms; the length covers 1.5 T60 after the direct path.
    pub fn sample(rng: &mut ChaCha8Rng, sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        let t60 = rng.random_range(T60_RANGE_S.0..=T60_RANGE_S.1);
        let drr_db = rng.random_range(
            DRR_MEAN_DB - DRR_HALF_WIDTH_DB..=DRR_MEAN_DB + DRR_HALF_WIDTH_DB,
        );
        let direct_delay = rng.random_range((0.001 * sr) as usize..=(0.01 * sr) as usize);
        let length = direct_delay + (1.5 * t60 * sr).ceil() as usize;
        RirSpec {
            t60,
            drr_db,
            direct_delay,
            length,
            seed: rng.random(),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.t60 > 0.0) || !self.t60.is_finite() {
            return Err(Error::Config(format!("t60 must be positive, got {}", self.t60)));
        }
        if !self.drr_db.is_finite() {
            return Err(Error::Config(format!(
                "infeasible DRR {} dB: the tail would need zero or negative energy",
                self.drr_db
            )));
        }
        let needed = (1.5 * self.t60 * sample_rate as f64).ceil() as usize;
        if self.length < needed {
            return Err(Error::Config(format!(
                "rir length {} shorter than 1.5*T60 = {needed} samples",
                self.length
            )));
        }
        if self.direct_delay + 1 >= self.length {
            return Err(Error::Config("direct delay leaves no room for a tail".into()));
        }
        Ok(())
    }
}

/// Direct impulse of amplitude 1 at `direct_delay` followed by Gaussian
/// noise with amplitude envelope `exp(-3 ln10 t / T60)` (t from sample 0),
/// scaled so that `10 log10(direct energy / tail energy) = drr_db`.
pub fn gen_rir(spec: &RirSpec, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = seed::rng(spec.seed, 0x0DEC);
    let mut h = vec![0.0; spec.length];
    let mut tail_energy = 0.0;
    for (n, v) in h.iter_mut().enumerate().skip(spec.direct_delay + 1) {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = g * (-DECAY * n as f64 / (spec.t60 * sr)).exp();
        tail_energy += *v * *v;
    }
    if !(tail_energy > 0.0) {
        return Err(Error::Degenerate("rir tail has no energy".into()));
    }
    let gain = (1.0 / (tail_energy * 10f64.powf(spec.drr_db / 10.0))).sqrt();
    for v in h.iter_mut().skip(spec.direct_delay + 1) {
        *v *= gain;
    }
    h[spec.direct_delay] = 1.0;
    Waveform::new(h, sample_rate)
}

/// `exp(-3 ln10 t (1/t60_target - 1/t60_src))` for `len` samples.
/// Equal T60s give the all-ones window.
pub fn decay_window(len: usize, sample_rate: u32, t60_src: f64, t60_target: f64) -> Vec<f64> {
    let rate = DECAY * (1.0 / t60_target - 1.0 / t60_src);
    (0..len)
        .map(|n| (-rate * n as f64 / sample_rate as f64).exp())
        .collect()
}

/// Reshapes an RIR of reverberation time `t60_src` so that its decay
/// matches `t60_target`.
pub fn shorten_rir(rir: &Waveform, t60_src: f64, t60_target: f64) -> Result<Waveform> {
    if !(t60_target > 0.0) || !(t60_target < t60_src) {
        return Err(Error::Config(format!(
            "target T60 {t60_target} s must be positive and below source T60 {t60_src} s"
        )));
    }
    let window = decay_window(rir.len(), rir.sample_rate, t60_src, t60_target);
    Waveform::new(
        rir.samples.iter().zip(&window).map(|(h, w)| h * w).collect(),
        rir.sample_rate,
    )
}

// ---------------------------------------------------------------------------
// Additive mixing

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub scaled_noise: Waveform,
    pub noise_gain: f64,
}

/// `x = s + a n` with `a` chosen so that `10 log10(|s|^2 / |a n|^2) = snr_db`.
pub fn mix_at_snr(s: &Waveform, n: &Waveform, snr_db: f64) -> Result<Mixture> {
    if s.sample_rate != n.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: s.sample_rate,
            found: n.sample_rate,
        });
    }
    if s.len() != n.len() {
        return Err(Error::Shape(format!("signal {} vs noise {} samples", s.len(), n.len())));
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr must be finite, got {snr_db}")));
    }
    let (es, en) = (s.energy(), n.energy());
    if es == 0.0 || en == 0.0 {
        return Err(Error::Degenerate("signal and noise must have nonzero energy".into()));
    }
    let gain = (es / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = n.samples.iter().map(|v| v * gain).collect();
    let mixture = s.samples.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok(Mixture {
        mixture: Waveform::new(mixture, s.sample_rate)?,
        scaled_noise: Waveform::new(scaled, s.sample_rate)?,
        noise_gain: gain,
    })
}

// ---------------------------------------------------------------------------
// Records and datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMetadata {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<NoiseKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub t60_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub drr_db: Option<f64>,
    pub seed: u64,
}

/// One generated example held in memory.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub task: Task,
    pub clean: Waveform,
    pub mixture: Waveform,
    pub target: Waveform,
    /// Scaled noise (denoise only).
    pub interference: Option<Waveform>,
    /// Full RIR (dereverb only).
    pub rir: Option<Waveform>,
    pub metadata: RecordMetadata,
}

// Grid for denoise sources: sums of two grid values are exact in f32, so
// `mixture - noise == clean` survives float WAV storage bit for bit.
const GRID: f64 = 32768.0;

fn to_grid(w: &Waveform) -> Waveform {
    Waveform {
        // `+ 0.0` turns -0.0 into +0.0, which is what `x - n` yields.
        samples: w.samples.iter().map(|v| (v * GRID).round() / GRID + 0.0).collect(),
        sample_rate: w.sample_rate,
    }
}

pub fn synthesize_record(task: Task, seed: u64, clip_seconds: f64, sample_rate: u32) -> Result<SynthRecord> {
    let mut rng = seed::rng(seed, 0xEC0);
    let clean = gen_speech_like(seed::derive_seed(seed, 1), clip_seconds, sample_rate)?;
    match task {
        Task::Denoise => {
            let clean = to_grid(&clean);
            let kind = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble][rng.random_range(0..3)];
            let snr_db = rng.random_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1);
            let noise = gen_noise(kind, seed::derive_seed(seed, 2), clean.len(), sample_rate)?;
            let mixed = mix_at_snr(&clean, &noise, snr_db)?;
            let scaled = to_grid(&mixed.scaled_noise);
            let mixture = Waveform::new(
                clean.samples.iter().zip(&scaled.samples).map(|(a, b)| a + b).collect(),
                sample_rate,
            )?;
            Ok(SynthRecord {
                task,
                target: clean.clone(),
                clean,
                mixture,
                interference: Some(scaled),
                rir: None,
                metadata: RecordMetadata {
                    snr_db: Some(snr_db),
                    noise: Some(kind),
                    t60_s: None,
                    drr_db: None,
                    seed,
                },
            })
        }
        Task::Dereverb => {
            let spec = RirSpec::sample(&mut rng, sample_rate);
            let rir = gen_rir(&spec, sample_rate)?;
            let short = shorten_rir(&rir, spec.t60, TARGET_T60_S)?;
            let mixture = convolve_time(&clean, &rir)?;
            let target = convolve_time(&clean, &short)?;
            Ok(SynthRecord {
                task,
                clean,
                mixture,
                target,
                interference: None,
                rir: Some(rir),
                metadata: RecordMetadata {
                    snr_db: None,
                    noise: None,
                    t60_s: Some(spec.t60),
                    drr_db: Some(spec.drr_db),
                    seed,
                },
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 40,
            valid: 8,
            test: 8,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.valid {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub task: Task,
    pub split: Split,
    pub mixture_path: String,
    pub target_path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub interference_path: Option<String>,
    pub metadata: RecordMetadata,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<()> {
        let m = &self.metadata;
        let ok = match self.task {
            Task::Denoise => m.snr_db.is_some() && m.t60_s.is_none() && self.interference_path.is_some(),
            Task::Dereverb => m.t60_s.is_some() && m.drr_db.is_some() && m.snr_db.is_none(),
        };
        if !ok {
            return Err(Error::Config(format!(
                "record {}: metadata does not match task {}",
                self.id,
                self.task.as_str()
            )));
        }
        Ok(())
    }
}

/// JSON-lines manifest; paths are relative to `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
            records.push(rec);
        }
        let manifest = DatasetManifest {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// The single task shared by all records.
    pub fn task(&self) -> Result<Task> {
        let first = self
            .records
            .first()
            .ok_or(Error::Empty("manifest"))?
            .task;
        if self.records.iter().any(|r| r.task != first) {
            return Err(Error::Config("manifest mixes denoise and dereverb records".into()));
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub counts: SplitCounts,
    pub clip_seconds: f64,
    pub seed: u64,
}

/// Generates every record, writes `{out_dir}/{split}/{id}_{mix|ref|int}.wav`
/// as 32-bit float WAV, and writes `{out_dir}/manifest.jsonl`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>, sample_rate: u32) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if !(spec.clip_seconds > 0.0) {
        return Err(Error::Config("clip_seconds must be positive".into()));
    }
    if spec.counts.total() == 0 {
        return Err(Error::Empty("dataset counts"));
    }
    for split in Split::ALL {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(spec.counts.total());
    for index in 0..spec.counts.total() {
        let split = spec.counts.split_of(index);
        let id = format!("{}_{index:04}", spec.task.as_str());
        let rec = synthesize_record(
            spec.task,
            seed::derive_seed(spec.seed, index as u64),
            spec.clip_seconds,
            sample_rate,
        )?;
        let rel = |kind: &str| format!("{}/{id}_{kind}.wav", split.as_str());
        write_wav(out_dir.join(rel("mix")), &rec.mixture, WavEncoding::Float32)?;
        write_wav(out_dir.join(rel("ref")), &rec.target, WavEncoding::Float32)?;
        let interference_path = match &rec.interference {
            Some(n) => {
                write_wav(out_dir.join(rel("int")), n, WavEncoding::Float32)?;
                Some(rel("int"))
            }
            None => None,
        };
        records.push(ManifestRecord {
            id: id.clone(),
            task: spec.task,
            split,
            mixture_path: rel("mix"),
            target_path: rel("ref"),
            interference_path,
            metadata: rec.metadata,
        });
    }
    let manifest = DatasetManifest {
        base_dir: out_dir.to_path_buf(),
        records,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
