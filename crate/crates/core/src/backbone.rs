//! Small causal mask estimator.
//!
//! Each time-frequency bin `(t, f)` sees the compressed features of its own
//! bin over the last `context` frames (`2 * context` inputs, zero before the
//! start), rotated into the phase reference of the current frame: with
//! `c_t` the complex feature at `(t, f)`, the inputs are
//! `c_{t-k} conj(c_t) / |c_t|` for `k = 0..context` (no rotation when
//! `c_t = 0`). The mask multiplies `x_t`, whose phase is that reference, so
//! it does not depend on the absolute phase of the bin.
//!
//! A hidden tanh layer shared across frequency is followed by a
//! shared linear output layer with 2 channels, a learned per-frequency
//! scale and offset, and a final tanh:
//!
//! ```text
//! h    = tanh(W1 u + b1)
//! z    = W2 h + b2
//! mask = tanh(scale_f * z + offset_f)      (real, imag)
//! ```
//!
//! Mask components therefore lie in (-1, 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::filtering::Mask;
use crate::num_complex::Complex64;
use crate::seed;
use crate::stft::FeatureTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub context: usize,
    pub hidden: usize,
    pub bins: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            context: 8,
            hidden: 32,
            bins: 161,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.hidden == 0 || self.bins == 0 {
            return Err(Error::Config(format!(
                "backbone context, hidden and bins must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn inputs(&self) -> usize {
        2 * self.context
    }

    pub fn layout(&self) -> Layout {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.inputs();
        let w2 = b1 + self.hidden;
        let b2 = w2 + 2 * self.hidden;
        let scale = b2 + 2;
        let offset = scale + 2 * self.bins;
        Layout {
            w1,
            b1,
            w2,
            b2,
            scale,
            offset,
            len: offset + 2 * self.bins,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Offsets of each parameter block in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub scale: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub values: Vec<f64>,
}

impl BackboneParams {
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(BackboneParams {
            config,
            values: vec![0.0; config.param_count()],
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit per-frequency scale.
    pub fn init(config: BackboneConfig, root_seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let l = config.layout();
        let mut rng = seed::rng(root_seed, seed::STREAM_BACKBONE_INIT);
        let b1 = 1.0 / (config.inputs() as f64).sqrt();
        for w in &mut p.values[l.w1..l.b1] {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = 1.0 / (config.hidden as f64).sqrt();
        for w in &mut p.values[l.w2..l.b2] {
            *w = rng.random_range(-b2..b2);
        }
        for s in &mut p.values[l.scale..l.offset] {
            *s = 1.0;
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.values.len() != self.config.param_count() {
            return Err(Error::Shape(format!(
                "backbone has {} values, config needs {}",
                self.values.len(),
                self.config.param_count()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone parameters"));
        }
        Ok(())
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Hidden activations, `[t][f][hidden]`.
    hidden: Vec<f64>,
    /// Pre-scale outputs `z`, `[t][f][2]`.
    z: Vec<f64>,
}

fn check_features(feat: &FeatureTensor, p: &BackboneParams) -> Result<()> {
    p.validate()?;
    if feat.bins != p.config.bins {
        return Err(Error::Shape(format!(
            "features have {} bins, backbone expects {}",
            feat.bins, p.config.bins
        )));
    }
    if feat.data.len() != 2 * feat.frames * feat.bins {
        return Err(Error::Shape("feature tensor size".into()));
    }
    Ok(())
}

#[inline]
fn gather_context(feat: &FeatureTensor, t: usize, f: usize, u: &mut [f64]) {
    let context = u.len() / 2;
    let (re, im) = (feat.at(0, t, f), feat.at(1, t, f));
    let norm = re.hypot(im);
    let rot = if norm > 0.0 {
        Complex64::new(re / norm, -im / norm)
    } else {
        Complex64::new(1.0, 0.0)
    };
    for c in 0..context {
        if c <= t {
            let z = Complex64::new(feat.at(0, t - c, f), feat.at(1, t - c, f)) * rot;
            u[2 * c] = z.re;
            u[2 * c + 1] = z.im;
        } else {
            u[2 * c] = 0.0;
            u[2 * c + 1] = 0.0;
        }
    }
}

pub fn backbone_forward(feat: &FeatureTensor, p: &BackboneParams) -> Result<Mask> {
    backbone_forward_cached(feat, p).map(|(m, _)| m)
}

pub fn backbone_forward_cached(
    feat: &FeatureTensor,
    p: &BackboneParams,
) -> Result<(Mask, BackboneCache)> {
    check_features(feat, p)?;
    let cfg = p.config;
    let l = cfg.layout();
    let v = &p.values;
    let (hd, ni) = (cfg.hidden, cfg.inputs());
    let n = feat.frames * feat.bins;
    let mut hidden = vec![0.0; n * hd];
    let mut zs = vec![0.0; n * 2];
    let mut mask = Vec::with_capacity(n);
    let mut u = vec![0.0; ni];
    // W1 transposed to `[input][hidden]` so the inner loop runs over
    // independent hidden units.
    let mut w1t = vec![0.0; ni * hd];
    for j in 0..hd {
        for i in 0..ni {
            w1t[i * hd + j] = v[l.w1 + j * ni + i];
        }
    }
    for t in 0..feat.frames {
        for f in 0..feat.bins {
            let idx = t * feat.bins + f;
            gather_context(feat, t, f, &mut u);
            let h = &mut hidden[idx * hd..(idx + 1) * hd];
            h.copy_from_slice(&v[l.b1..l.b1 + hd]);
            for (i, ui) in u.iter().enumerate() {
                for (hj, w) in h.iter_mut().zip(&w1t[i * hd..(i + 1) * hd]) {
                    *hj += w * ui;
                }
            }
            for hj in h.iter_mut() {
                *hj = hj.tanh();
            }
            let mut out = [0.0; 2];
            for k in 0..2 {
                let row = &v[l.w2 + k * hd..l.w2 + (k + 1) * hd];
                let z = row.iter().zip(h.iter()).map(|(a, b)| a * b).sum::<f64>() + v[l.b2 + k];
                zs[idx * 2 + k] = z;
                out[k] = (v[l.scale + 2 * f + k] * z + v[l.offset + 2 * f + k]).tanh();
            }
            mask.push(Complex64::new(out[0], out[1]));
        }
    }
    Ok((
        Mask {
            frames: feat.frames,
            bins: feat.bins,
            data: mask,
        },
        BackboneCache { hidden, z: zs },
    ))
}

/// Gradient of the loss with respect to the flat backbone parameters,
/// given `grad_mask = dL/dRe m + j dL/dIm m` per bin.
pub fn backbone_backward(
    feat: &FeatureTensor,
    p: &BackboneParams,
    mask: &Mask,
    cache: &BackboneCache,
    grad_mask: &Mask,
) -> Result<Vec<f64>> {
    check_features(feat, p)?;
    if grad_mask.shape() != (feat.frames, feat.bins) || mask.shape() != grad_mask.shape() {
        return Err(Error::Shape("backbone backward: mask gradient shape".into()));
    }
    let cfg = p.config;
    let l = cfg.layout();
    let v = &p.values;
    let (hd, ni) = (cfg.hidden, cfg.inputs());
    let mut g = vec![0.0; l.len];
    let mut u = vec![0.0; ni];
    let mut gh = vec![0.0; hd];
    for t in 0..feat.frames {
        for f in 0..feat.bins {
            let idx = t * feat.bins + f;
            let gm = grad_mask.data[idx];
            if gm.re == 0.0 && gm.im == 0.0 {
                continue;
            }
            let m = mask.data[idx];
            let h = &cache.hidden[idx * hd..(idx + 1) * hd];
            gh.iter_mut().for_each(|x| *x = 0.0);
            for (k, (go, out)) in [(gm.re, m.re), (gm.im, m.im)].into_iter().enumerate() {
                let gpre = go * (1.0 - out * out);
                let z = cache.z[idx * 2 + k];
                g[l.scale + 2 * f + k] += gpre * z;
                g[l.offset + 2 * f + k] += gpre;
                let gz = gpre * v[l.scale + 2 * f + k];
                g[l.b2 + k] += gz;
                for j in 0..hd {
                    g[l.w2 + k * hd + j] += gz * h[j];
                    gh[j] += gz * v[l.w2 + k * hd + j];
                }
            }
            gather_context(feat, t, f, &mut u);
            for j in 0..hd {
                let gpre = gh[j] * (1.0 - h[j] * h[j]);
                if gpre == 0.0 {
                    continue;
                }
                g[l.b1 + j] += gpre;
                let row = &mut g[l.w1 + j * ni..l.w1 + (j + 1) * ni];
                for (r, ui) in row.iter_mut().zip(&u) {
                    *r += gpre * ui;
                }
            }
        }
    }
    Ok(g)
}
