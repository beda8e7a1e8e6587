//! Composite spectral loss, Adam, early stopping and the three training
//! strategies (join, pretrain + freeze, pretrain + finetune).
//!
//! Training is single-threaded and visits data in a seeded order, so the
//! same data, config and seed give bit-identical checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::dsfe::{DsfeInit, DsfeParams};
use crate::model::{backward, forward, ModelParams};
use crate::num_complex::Complex64;
use crate::seed;
use crate::stft::{compress_features, FeatureTensor, Spectrogram, Stft, StftConfig};
use crate::synth::{DatasetManifest, Split};
use crate::wav::read_wav;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Loss

/// Domain in which the loss compares spectrograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    /// Raw STFT coefficients.
    #[default]
    Uncompressed,
    /// Magnitude-compressed coefficients `z |z|^{-1/2}`.
    Compressed,
}

/// `MSE(Re) + MSE(Im) + MSE(|.|)`, each averaged over all bins, and its
/// gradient `dL/dRe + j dL/dIm` with respect to `est`. The magnitude term
/// contributes no gradient where `|est| = 0`.
pub fn spectral_loss(est: &Spectrogram, reference: &Spectrogram) -> Result<(f64, Spectrogram)> {
    est.ensure_same_shape(reference, "spectral_loss")?;
    let n = est.data.len();
    if n == 0 {
        return Err(Error::Empty("spectrogram"));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Spectrogram::zeros(est.frames, est.bins);
    for ((e, r), g) in est.data.iter().zip(&reference.data).zip(grad.data.iter_mut()) {
        let d = e - r;
        let (me, mr) = (e.norm(), r.norm());
        let dm = me - mr;
        loss += d.re * d.re + d.im * d.im + dm * dm;
        let radial = if me > 0.0 { dm / me } else { 0.0 };
        *g = Complex64::new(d.re + radial * e.re, d.im + radial * e.im) * (2.0 * scale);
    }
    Ok((loss * scale, grad))
}

fn compress(z: Complex64) -> Complex64 {
    let m = z.norm();
    if m > 0.0 {
        z / m.sqrt()
    } else {
        Complex64::new(0.0, 0.0)
    }
}

/// Loss in the chosen domain, with the gradient taken back to raw `est`.
pub fn loss_in_domain(
    est: &Spectrogram,
    reference: &Spectrogram,
    domain: LossDomain,
) -> Result<(f64, Spectrogram)> {
    match domain {
        LossDomain::Uncompressed => spectral_loss(est, reference),
        LossDomain::Compressed => {
            est.ensure_same_shape(reference, "spectral_loss")?;
            let map = |s: &Spectrogram| Spectrogram {
                frames: s.frames,
                bins: s.bins,
                data: s.data.iter().map(|&z| compress(z)).collect(),
            };
            let (loss, gc) = spectral_loss(&map(est), &map(reference))?;
            // c(z) = z |z|^{-1/2}: dc/dz = 3/4 |z|^{-1/2}, dc/dz* = -1/4 z^2 |z|^{-5/2}.
            let mut grad = gc;
            for (g, z) in grad.data.iter_mut().zip(&est.data) {
                let m = z.norm();
                *g = if m > 0.0 {
                    *g * (0.75 / m.sqrt()) - g.conj() * (z * z) * (0.25 * m.powf(-2.5))
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            Ok((loss, grad))
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_learning_rate(5e-4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place. Rejects non-finite gradients
/// before touching any state.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Degenerate(format!(
            "non-finite gradient at parameter {i} (step {})",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best validation loss; epochs are numbered from 1.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Backbone and extension trained together from scratch.
    #[default]
    Join,
    /// Extension trained on top of a frozen pretrained masking backbone.
    PretrainFreeze,
    /// Both trained, starting from a pretrained masking backbone.
    PretrainFinetune,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Join => "join",
            Strategy::PretrainFreeze => "pretrain_freeze",
            Strategy::PretrainFinetune => "pretrain_finetune",
        }
    }

    pub fn needs_init(&self) -> bool {
        !matches!(self, Strategy::Join)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "join" => Ok(Strategy::Join),
            "pretrain_freeze" => Ok(Strategy::PretrainFreeze),
            "pretrain_finetune" => Ok(Strategy::PretrainFinetune),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected join, pretrain_freeze or pretrain_finetune)"
            ))),
        }
    }
}

/// `n_f = 1` selects plain masking (no extension layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub n_f: usize,
    pub dsfe_bias: bool,
    pub dsfe_init: DsfeInit,
    pub context: usize,
    pub hidden: usize,
    pub loss_domain: LossDomain,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 8,
            patience_epochs: 50,
            max_epochs: 200,
            strategy: Strategy::Join,
            seed: 0,
            n_f: 4,
            dsfe_bias: true,
            dsfe_init: DsfeInit::Uniform,
            context: bb.context,
            hidden: bb.hidden,
            loss_domain: LossDomain::Uncompressed,
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return bad("batch_size, max_epochs and patience_epochs must be >= 1".into());
        }
        if self.patience_epochs > self.max_epochs {
            return bad(format!(
                "patience_epochs {} exceeds max_epochs {}",
                self.patience_epochs, self.max_epochs
            ));
        }
        if self.n_f == 0 {
            return bad("n_f must be >= 1".into());
        }
        if self.n_f == 1 && self.strategy != Strategy::Join {
            return bad(format!(
                "strategy {} needs an extension layer (n_f > 1)",
                self.strategy.as_str()
            ));
        }
        self.stft.validate()?;
        self.backbone_config().validate()
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            context: self.context,
            hidden: self.hidden,
            bins: self.stft.n_bins(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }

    fn new_dsfe(&self) -> Result<Option<DsfeParams>> {
        if self.n_f == 1 {
            return Ok(None);
        }
        DsfeParams::init(self.n_f, self.dsfe_bias, self.dsfe_init, self.seed).map(Some)
    }

    /// Initial model for this config's strategy.
    pub fn initial_model(&self, init: Option<&Checkpoint>) -> Result<ModelParams> {
        self.validate()?;
        match (self.strategy.needs_init(), init) {
            (false, None) => Ok(ModelParams {
                backbone: BackboneParams::init(self.backbone_config(), self.seed)?,
                dsfe: self.new_dsfe()?,
            }),
            (false, Some(_)) => Err(Error::Config(
                "an init checkpoint is only used by pretrain strategies".into(),
            )),
            (true, None) => Err(Error::Config(format!(
                "strategy {} requires an init checkpoint (--init)",
                self.strategy.as_str()
            ))),
            (true, Some(ck)) => {
                if ck.model.dsfe.is_some() {
                    return Err(Error::Config(
                        "init checkpoint must be a masking-mode model".into(),
                    ));
                }
                if ck.model.backbone.config != self.backbone_config() || ck.stft != self.stft {
                    return Err(Error::Config(format!(
                        "init checkpoint backbone {:?} / stft {:?} does not match config",
                        ck.model.backbone.config, ck.stft
                    )));
                }
                Ok(ModelParams {
                    backbone: ck.model.backbone.clone(),
                    dsfe: self.new_dsfe()?,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct History {
    pub initial_train_loss: f64,
    pub initial_valid_loss: f64,
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
}

/// Pretty JSON; floats are written in shortest round-trip decimal form, so
/// save/load is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelParams,
    pub stft: StftConfig,
    pub train_config: TrainConfig,
    pub history: History,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        self.stft.validate()?;
        self.model.validate()?;
        if self.model.backbone.config.bins != self.stft.n_bins() {
            return Err(Error::Shape("checkpoint backbone bins do not match its STFT".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

// ---------------------------------------------------------------------------
// Data

/// One training pair in the STFT domain.
#[derive(Debug, Clone)]
pub struct Example {
    pub mix: Spectrogram,
    pub feat: FeatureTensor,
    pub target: Spectrogram,
}

impl Example {
    pub fn new(mix: Spectrogram, target: Spectrogram) -> Result<Self> {
        mix.ensure_same_shape(&target, "example")?;
        let feat = compress_features(&mix)?;
        Ok(Example { mix, feat, target })
    }
}

pub fn load_examples(manifest: &DatasetManifest, split: Split, cfg: &StftConfig) -> Result<Vec<Example>> {
    let plan = Stft::new(*cfg)?;
    manifest
        .split(split)
        .map(|rec| {
            let mix = read_wav(manifest.resolve(&rec.mixture_path))?;
            let target = read_wav(manifest.resolve(&rec.target_path))?;
            if mix.len() != target.len() {
                return Err(Error::Shape(format!(
                    "record {}: mixture {} vs target {} samples",
                    rec.id,
                    mix.len(),
                    target.len()
                )));
            }
            Example::new(
                plan.analyze_for_processing(&mix)?,
                plan.analyze_for_processing(&target)?,
            )
        })
        .collect()
}

/// Mean per-example loss.
pub fn mean_loss(examples: &[Example], params: &ModelParams, domain: LossDomain) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        let pass = forward(&ex.feat, &ex.mix, params)?;
        total += loss_in_domain(&pass.estimate, &ex.target, domain)?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Mean loss over `batch` and its gradient with respect to the trainable
/// vector.
pub fn batch_gradient(
    batch: &[&Example],
    params: &ModelParams,
    domain: LossDomain,
    with_backbone: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut grad = vec![0.0; params.trainable(with_backbone).len()];
    let mut loss = 0.0;
    for ex in batch {
        let pass = forward(&ex.feat, &ex.mix, params)?;
        let (l, g_est) = loss_in_domain(&pass.estimate, &ex.target, domain)?;
        let g = backward(&ex.feat, &ex.mix, params, &pass, &g_est, with_backbone)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub improved: bool,
}

pub fn train_model(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    train_model_with(manifest, cfg, init, &mut |_| {})
}

pub fn train_model_with(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<Checkpoint> {
    cfg.validate()?;
    manifest.validate()?;
    let train = load_examples(manifest, Split::Train, &cfg.stft)?;
    let valid = load_examples(manifest, Split::Valid, &cfg.stft)?;
    train_examples(&train, &valid, cfg, init, progress)
}

/// Training on in-memory examples. Epoch `e` (from 1) shuffles the training
/// set with `derive_seed(seed, STREAM_SHUFFLE + e)`, takes one Adam step per
/// mini-batch, then scores the validation set. The returned checkpoint
/// holds the parameters of the best validation epoch.
pub fn train_examples(
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("valid split"));
    }
    let mut model = cfg.initial_model(init)?;
    let with_backbone = cfg.strategy != Strategy::PretrainFreeze;
    let adam = cfg.adam();
    let mut flat = model.trainable(with_backbone);
    let mut state = AdamState::new(flat.len());

    let mut history = History {
        initial_train_loss: mean_loss(train, &model, cfg.loss_domain)?,
        initial_valid_loss: mean_loss(valid, &model, cfg.loss_domain)?,
        ..History::default()
    };
    let mut stopper = EarlyStopping::new(cfg.patience_epochs);
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_epoch = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = seed::rng(cfg.seed, seed::STREAM_SHUFFLE + epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = batch_gradient(&batch, &model, cfg.loss_domain, with_backbone)?;
            adam_step(&mut flat, &grad, &mut state, &adam)?;
            model.set_trainable(&flat, with_backbone)?;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let valid_loss = mean_loss(valid, &model, cfg.loss_domain)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        history.train_loss.push(train_loss);
        history.valid_loss.push(valid_loss);
        let (improved, stop) = stopper.observe(epoch, valid_loss);
        if improved {
            best = model.clone();
        }
        progress(&EpochReport {
            epoch,
            train_loss,
            valid_loss,
            improved,
        });
        if stop {
            stopped_epoch = epoch;
            break;
        }
    }

    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: best,
        stft: cfg.stft,
        train_config: cfg.clone(),
        history,
        best_epoch: stopper.best_epoch(),
        stopped_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Spectrogram {
        let data = (0..frames * bins)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        Spectrogram::from_vec(frames, bins, data).unwrap()
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spec(&mut rng, 4, 5);
        let (l, g) = spectral_loss(&s, &s).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|z| z.norm() == 0.0));

        let zero = Spectrogram::zeros(4, 5);
        let mut one = zero.clone();
        *one.at_mut(2, 3) = Complex64::new(1.0, 0.0);
        let (l, _) = spectral_loss(&one, &zero).unwrap();
        assert!((l - 2.0 / 20.0).abs() < 1e-15);

        let (_, g) = spectral_loss(&zero, &one).unwrap();
        assert_eq!(g.at(2, 3), Complex64::new(-2.0 / 20.0, 0.0));

        assert!(spectral_loss(&zero, &Spectrogram::zeros(4, 6)).is_err());
    }

    fn fd_check(domain: LossDomain, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = random_spec(&mut rng, 3, 4);
        let reference = random_spec(&mut rng, 3, 4);
        let (_, g) = loss_in_domain(&est, &reference, domain).unwrap();
        let h = 1e-6;
        for i in 0..est.data.len() {
            for part in 0..2 {
                let bump = |d: f64| {
                    let mut e = est.clone();
                    if part == 0 {
                        e.data[i].re += d;
                    } else {
                        e.data[i].im += d;
                    }
                    loss_in_domain(&e, &reference, domain).unwrap().0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if part == 0 { g.data[i].re } else { g.data[i].im };
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3),
                    "{domain:?} bin {i} part {part}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            fd_check(LossDomain::Uncompressed, seed);
            fd_check(LossDomain::Compressed, seed);
        }
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
        assert_eq!(s.v, vec![0.0, 0.0]);

        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.5], &mut s, &cfg).unwrap();
        assert!((p[0] - (1.0 - 5e-4)).abs() < 1e-10);
        assert!((p[1] - (-2.0 + 5e-4)).abs() < 1e-10);

        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut s, &cfg).is_err());
        assert_eq!(s.step, 1);
        assert!(adam_step(&mut p, &[0.0], &mut s, &cfg).is_err());
    }

    #[test]
    fn early_stopping_contract() {
        let mut es = EarlyStopping::new(1);
        assert_eq!(es.observe(1, 1.0), (true, false));
        assert_eq!(es.observe(2, 1.0), (false, true));
        assert_eq!(es.best_epoch(), 1);

        let mut es = EarlyStopping::new(3);
        for (e, l) in [(1, 5.0), (2, 4.0), (3, 4.5), (4, 4.2)] {
            assert!(!es.observe(e, l).1);
        }
        assert_eq!(es.observe(5, 4.0), (false, true));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { patience_epochs: 10, max_epochs: 5, ..Default::default() },
            TrainConfig { n_f: 0, ..Default::default() },
            TrainConfig { n_f: 1, strategy: Strategy::PretrainFreeze, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let freeze = TrainConfig { strategy: Strategy::PretrainFreeze, ..Default::default() };
        let err = freeze.initial_model(None).unwrap_err().to_string();
        assert!(err.contains("--init"), "{err}");
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"n_f": 8}"#).unwrap();
        assert_eq!(partial.n_f, 8);
        assert_eq!(partial.learning_rate, 5e-4);
    }

    fn tiny_examples(seed: u64, n: usize, silent_mix: bool) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let target = random_spec(&mut rng, 6, 9);
                let mix = if silent_mix {
                    Spectrogram::zeros(6, 9)
                } else {
                    let noise = random_spec(&mut rng, 6, 9);
                    Spectrogram {
                        data: target.data.iter().zip(&noise.data).map(|(a, b)| a + b * 0.5).collect(),
                        ..target.clone()
                    }
                };
                Example::new(mix, target).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            patience_epochs: 1,
            max_epochs: 5,
            n_f: 2,
            context: 2,
            hidden: 4,
            stft: StftConfig::new(16, 8, 16_000).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn stops_at_epoch_two_on_flat_validation_loss() {
        let train = tiny_examples(1, 4, false);
        // A silent mixture makes the estimate, and so the loss, independent
        // of the parameters.
        let valid = tiny_examples(2, 2, true);
        let cfg = tiny_config();
        let ck = train_examples(&train, &valid, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(ck.stopped_epoch, 2);
        assert_eq!(ck.best_epoch, 1);
        assert_eq!(ck.history.valid_loss.len(), 2);

        let one = TrainConfig { max_epochs: 1, ..cfg };
        let ck1 = train_examples(&train, &valid, &one, None, &mut |_| {}).unwrap();
        assert_eq!(ck.model, ck1.model);
        let init = one.initial_model(None).unwrap();
        assert_ne!(ck.model, init);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let train = tiny_examples(3, 6, false);
        let valid = tiny_examples(4, 2, false);
        let cfg = TrainConfig {
            max_epochs: 20,
            patience_epochs: 20,
            ..tiny_config()
        };
        let a = train_examples(&train, &valid, &cfg, None, &mut |_| {}).unwrap();
        assert!(a.history.train_loss.last().unwrap() < &a.history.initial_train_loss);
        let b = train_examples(&train, &valid, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = Checkpoint::from_json(&a.to_json(), "test").unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn freeze_keeps_backbone_bits() {
        let train = tiny_examples(5, 4, false);
        let valid = tiny_examples(6, 2, false);
        let base = TrainConfig { n_f: 1, max_epochs: 3, patience_epochs: 3, ..tiny_config() };
        let pre = train_examples(&train, &valid, &base, None, &mut |_| {}).unwrap();
        let freeze = TrainConfig {
            n_f: 3,
            strategy: Strategy::PretrainFreeze,
            ..base.clone()
        };
        let ck = train_examples(&train, &valid, &freeze, Some(&pre), &mut |_| {}).unwrap();
        let bits = |b: &BackboneParams| b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ck.model.backbone), bits(&pre.model.backbone));
        assert_ne!(ck.model.dsfe, DsfeParams::init(3, true, DsfeInit::Uniform, 0).ok());

        let finetune = TrainConfig { strategy: Strategy::PretrainFinetune, ..freeze.clone() };
        let ck = train_examples(&train, &valid, &finetune, Some(&pre), &mut |_| {}).unwrap();
        assert_ne!(bits(&ck.model.backbone), bits(&pre.model.backbone));

        // A DSFE checkpoint cannot seed a pretrain strategy.
        assert!(train_examples(&train, &valid, &freeze, Some(&ck), &mut |_| {}).is_err());
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let train = tiny_examples(7, 2, false);
        let cfg = TrainConfig { max_epochs: 1, ..tiny_config() };
        let mut ck = train_examples(&train, &train, &cfg, None, &mut |_| {}).unwrap();
        ck.format_version = 99;
        assert!(Checkpoint::from_json(&ck.to_json(), "test").is_err());
    }
}
