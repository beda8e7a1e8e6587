//! End-to-end restoration model: features -> backbone mask -> optional
//! subband extension -> filtering of the uncompressed mixture spectrogram.
//!
//! The backbone always receives the single-frame features; past frames
//! enter only through the filtering stage.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    backbone_backward, backbone_forward, backbone_forward_cached, BackboneCache, BackboneParams,
};
use crate::dsfe::{dsfe_backward, dsfe_forward, DsfeParams};
use crate::filtering::{apply_mask, apply_subband_filter, Mask, MultiFrameFilter};
use crate::num_complex::Complex64;
use crate::stft::{compress_features, istft_len, FeatureTensor, Spectrogram, Stft, StftConfig, Waveform};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Masking,
    Dsfe(usize),
}

/// Backbone plus optional extension; the extension's presence selects the
/// mode, so a DSFE model always carries matching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub dsfe: Option<DsfeParams>,
}

impl ModelParams {
    pub fn mode(&self) -> Mode {
        match &self.dsfe {
            None => Mode::Masking,
            Some(d) => Mode::Dsfe(d.n_f),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(d) = &self.dsfe {
            d.validate()?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.backbone.values.len() + self.dsfe.as_ref().map_or(0, DsfeParams::param_count)
    }

    /// Flat trainable vector: backbone values (if `with_backbone`) followed
    /// by the extension's weights and bias.
    pub fn trainable(&self, with_backbone: bool) -> Vec<f64> {
        let mut v = Vec::new();
        if with_backbone {
            v.extend_from_slice(&self.backbone.values);
        }
        if let Some(d) = &self.dsfe {
            v.extend(d.to_flat());
        }
        v
    }

    pub fn set_trainable(&mut self, flat: &[f64], with_backbone: bool) -> Result<()> {
        let nb = if with_backbone {
            self.backbone.values.len()
        } else {
            0
        };
        let nd = self.dsfe.as_ref().map_or(0, DsfeParams::param_count);
        if flat.len() != nb + nd {
            return Err(Error::Shape(format!(
                "trainable vector has {} values, model needs {}",
                flat.len(),
                nb + nd
            )));
        }
        if with_backbone {
            self.backbone.values.copy_from_slice(&flat[..nb]);
        }
        if let Some(d) = &mut self.dsfe {
            d.set_flat(&flat[nb..])?;
        }
        Ok(())
    }
}

/// Mask (masking mode) or multi-frame filter (DSFE mode) for a mixture.
pub fn estimate_filter(
    feat: &FeatureTensor,
    params: &ModelParams,
) -> Result<(Mask, Option<MultiFrameFilter>)> {
    let mask = backbone_forward(feat, &params.backbone)?;
    let filt = match &params.dsfe {
        Some(d) => Some(dsfe_forward(&mask, d)?),
        None => None,
    };
    Ok((mask, filt))
}

/// Spectrogram-domain restoration of `mix`.
pub fn enhance_spectrogram(mix: &Spectrogram, params: &ModelParams) -> Result<Spectrogram> {
    let feat = compress_features(mix)?;
    match estimate_filter(&feat, params)? {
        (mask, None) => apply_mask(mix, &mask),
        (_, Some(filt)) => apply_subband_filter(mix, &filt),
    }
}

/// Waveform in, waveform out, same length.
pub fn restore(x: &Waveform, params: &ModelParams, cfg: &StftConfig) -> Result<Waveform> {
    params.validate()?;
    if params.backbone.config.bins != cfg.n_bins() {
        return Err(Error::Config(format!(
            "model expects {} bins, STFT config gives {}",
            params.backbone.config.bins,
            cfg.n_bins()
        )));
    }
    let plan = Stft::new(*cfg)?;
    let mix = plan.analyze_for_processing(x)?;
    let est = enhance_spectrogram(&mix, params)?;
    istft_len(&est, cfg, x.len())
}

/// Activations of one forward pass, kept for [`backward`].
pub struct ForwardPass {
    pub mask: Mask,
    pub filter: Option<MultiFrameFilter>,
    pub estimate: Spectrogram,
    cache: BackboneCache,
}

pub fn forward(feat: &FeatureTensor, mix: &Spectrogram, params: &ModelParams) -> Result<ForwardPass> {
    let (mask, cache) = backbone_forward_cached(feat, &params.backbone)?;
    let (filter, estimate) = match &params.dsfe {
        Some(d) => {
            let filt = dsfe_forward(&mask, d)?;
            let est = apply_subband_filter(mix, &filt)?;
            (Some(filt), est)
        }
        None => {
            let est = apply_mask(mix, &mask)?;
            (None, est)
        }
    };
    Ok(ForwardPass {
        mask,
        filter,
        estimate,
        cache,
    })
}

/// Gradient of the loss with respect to the trainable vector (layout of
/// [`ModelParams::trainable`]) given `grad_est = dL/dRe + j dL/dIm` of the
/// estimate.
pub fn backward(
    feat: &FeatureTensor,
    mix: &Spectrogram,
    params: &ModelParams,
    pass: &ForwardPass,
    grad_est: &Spectrogram,
    with_backbone: bool,
) -> Result<Vec<f64>> {
    mix.ensure_same_shape(grad_est, "backward")?;
    let (frames, bins) = mix.shape();
    let (grad_mask, grad_dsfe) = match (&params.dsfe, &pass.filter) {
        (Some(d), Some(filt)) => {
            let mut up = MultiFrameFilter::zeros(frames, filt.taps, bins);
            for t in 0..frames {
                for tau in 0..filt.taps.min(t + 1) {
                    for f in 0..bins {
                        let i = up.index(t, tau, f);
                        up.data[i] = grad_est.at(t, f) * mix.at(t - tau, f).conj();
                    }
                }
            }
            let g = dsfe_backward(&pass.mask, d, &up)?;
            let flat = g.to_flat();
            (g.mask, flat)
        }
        (None, None) => {
            let data: Vec<Complex64> = grad_est
                .data
                .iter()
                .zip(&mix.data)
                .map(|(g, x)| g * x.conj())
                .collect();
            (Mask { frames, bins, data }, Vec::new())
        }
        _ => return Err(Error::Shape("forward pass does not match model mode".into())),
    };
    let mut out = if with_backbone {
        backbone_backward(feat, &params.backbone, &pass.mask, &pass.cache, &grad_mask)?
    } else {
        Vec::new()
    };
    out.extend(grad_dsfe);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::dsfe::DsfeInit;

    fn small_model(dsfe: Option<usize>) -> ModelParams {
        let cfg = BackboneConfig {
            context: 2,
            hidden: 3,
            bins: 161,
        };
        ModelParams {
            backbone: BackboneParams::init(cfg, 1).unwrap(),
            dsfe: dsfe.map(|n| DsfeParams::init(n, true, DsfeInit::Uniform, 2).unwrap()),
        }
    }

    #[test]
    fn zero_input_restores_to_zero() {
        let cfg = StftConfig::default();
        let x = Waveform::zeros(1600, 16_000);
        for m in [small_model(None), small_model(Some(3))] {
            let y = restore(&x, &m, &cfg).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(y.samples.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn trainable_round_trip() {
        let mut m = small_model(Some(2));
        let flat = m.trainable(true);
        assert_eq!(flat.len(), m.param_count());
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        m.set_trainable(&doubled, true).unwrap();
        assert_eq!(m.trainable(true), doubled);
        let only_dsfe = m.trainable(false);
        assert_eq!(only_dsfe.len(), 12);
        assert!(m.set_trainable(&only_dsfe[1..], false).is_err());
    }

    #[test]
    fn rejects_bin_mismatch() {
        let cfg = StftConfig::new(64, 32, 16_000).unwrap();
        let x = Waveform::zeros(640, 16_000);
        assert!(restore(&x, &small_model(None), &cfg).is_err());
    }
}
