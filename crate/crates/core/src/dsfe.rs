//! Deep subband filtering extension: a pointwise layer that expands a
//! single-frame complex mask into a causal `N_f`-tap subband filter.
//!
//! For every time-frequency bin the mask value `m = a + jb` is stacked into
//! `v = [a, b]` and mapped through a 1x1 convolution with `2 N_f` output
//! channels followed by `tanh`, scaled by `1 / N_f`:
//!
//! ```text
//! o = tanh(W v + b) / N_f,   W: (2 N_f) x 2
//! ```
//!
//! Output channel `r` is tap `r / 2`; even channels are real parts, odd
//! channels imaginary parts. Every tap component is therefore bounded by
//! `1 / N_f` in magnitude.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::filtering::{Mask, MultiFrameFilter};
use crate::num_complex::Complex64;
use crate::seed;
use crate::stft::StftConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsfeParams {
    pub n_f: usize,
    /// `(2 n_f) x 2`, row-major.
    pub weights: Vec<f64>,
    /// Length `2 n_f` when present.
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsfeInit {
    /// Uniform weights in `±1/sqrt(2)` (fan-in 2), zero bias.
    #[default]
    Uniform,
    /// Tap 0 approximately passes the mask through (`W_0 = N_f I`, so
    /// `tanh(N_f m) / N_f ≈ m` for small masks); other taps start at zero.
    WarmIdentity,
}

impl DsfeParams {
    pub fn zeros(n_f: usize, with_bias: bool) -> Self {
        DsfeParams {
            n_f,
            weights: vec![0.0; 4 * n_f],
            bias: with_bias.then(|| vec![0.0; 2 * n_f]),
        }
    }

    pub fn init(n_f: usize, with_bias: bool, mode: DsfeInit, root_seed: u64) -> Result<Self> {
        if n_f == 0 {
            return Err(Error::Config("n_f must be >= 1".into()));
        }
        let mut p = DsfeParams::zeros(n_f, with_bias);
        match mode {
            DsfeInit::Uniform => {
                let mut rng = seed::rng(root_seed, seed::STREAM_DSFE_INIT);
                let bound = std::f64::consts::FRAC_1_SQRT_2;
                for w in p.weights.iter_mut() {
                    *w = rng.random_range(-bound..bound);
                }
            }
            DsfeInit::WarmIdentity => {
                p.weights[0] = n_f as f64;
                p.weights[3] = n_f as f64;
            }
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 {
            return Err(Error::Config("n_f must be >= 1".into()));
        }
        if self.weights.len() != 4 * self.n_f {
            return Err(Error::Shape(format!(
                "dsfe weights: {} values for n_f={}",
                self.weights.len(),
                self.n_f
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != 2 * self.n_f {
                return Err(Error::Shape(format!(
                    "dsfe bias: {} values for n_f={}",
                    b.len(),
                    self.n_f
                )));
            }
        }
        let finite = self.weights.iter().chain(self.bias.iter().flatten());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dsfe parameters"));
        }
        Ok(())
    }

    /// Flat view: weights followed by bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        if let Some(b) = &self.bias {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "dsfe flat parameters: {} for {}",
                flat.len(),
                self.param_count()
            )));
        }
        let nw = self.weights.len();
        self.weights.copy_from_slice(&flat[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&flat[nw..]);
        }
        Ok(())
    }

    #[inline]
    fn preactivation(&self, r: usize, v: [f64; 2]) -> f64 {
        let b = self.bias.as_ref().map_or(0.0, |b| b[r]);
        self.weights[2 * r] * v[0] + self.weights[2 * r + 1] * v[1] + b
    }
}

pub fn dsfe_forward(m: &Mask, p: &DsfeParams) -> Result<MultiFrameFilter> {
    p.validate()?;
    if m.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("mask"));
    }
    let n_f = p.n_f;
    let scale = 1.0 / n_f as f64;
    let mut out = MultiFrameFilter::zeros(m.frames, n_f, m.bins);
    for t in 0..m.frames {
        for f in 0..m.bins {
            let z = m.at(t, f);
            let v = [z.re, z.im];
            for tau in 0..n_f {
                let re = scale * p.preactivation(2 * tau, v).tanh();
                let im = scale * p.preactivation(2 * tau + 1, v).tanh();
                let i = out.index(t, tau, f);
                out.data[i] = Complex64::new(re, im);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsfeGrads {
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    /// `dL/dRe m + j dL/dIm m` per bin.
    pub mask: Mask,
}

impl DsfeGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        if let Some(b) = &self.bias {
            v.extend_from_slice(b);
        }
        v
    }
}

/// Reverse-mode gradients of [`dsfe_forward`]. `upstream` holds
/// `dL/dRe + j dL/dIm` for every filter tap. Accumulation runs over frames,
/// then bins, in a fixed order.
pub fn dsfe_backward(m: &Mask, p: &DsfeParams, upstream: &MultiFrameFilter) -> Result<DsfeGrads> {
    p.validate()?;
    if upstream.frames != m.frames || upstream.bins != m.bins || upstream.taps != p.n_f {
        return Err(Error::Shape(format!(
            "upstream {}x{}x{} vs mask {:?} with n_f={}",
            upstream.frames,
            upstream.taps,
            upstream.bins,
            m.shape(),
            p.n_f
        )));
    }
    let n_f = p.n_f;
    let scale = 1.0 / n_f as f64;
    let mut gw = vec![0.0; 4 * n_f];
    let mut gb = vec![0.0; 2 * n_f];
    let mut gm = Vec::with_capacity(m.data.len());
    for t in 0..m.frames {
        for f in 0..m.bins {
            let z = m.at(t, f);
            let v = [z.re, z.im];
            let mut gv = [0.0; 2];
            for tau in 0..n_f {
                let g = upstream.at(t, tau, f);
                for (part, go) in [(0, g.re), (1, g.im)] {
                    let r = 2 * tau + part;
                    let th = p.preactivation(r, v).tanh();
                    let dpre = go * scale * (1.0 - th * th);
                    gw[2 * r] += dpre * v[0];
                    gw[2 * r + 1] += dpre * v[1];
                    gb[r] += dpre;
                    gv[0] += dpre * p.weights[2 * r];
                    gv[1] += dpre * p.weights[2 * r + 1];
                }
            }
            gm.push(Complex64::new(gv[0], gv[1]));
        }
    }
    Ok(DsfeGrads {
        weights: gw,
        bias: p.bias.as_ref().map(|_| gb),
        mask: Mask {
            frames: m.frames,
            bins: m.bins,
            data: gm,
        },
    })
}

/// FLOP counting convention: one multiply-accumulate is 2 FLOPs; an add,
/// a multiply and a `tanh` each count as 1 FLOP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_f: usize,
    pub with_bias: bool,
    pub trainable_param_count: usize,
    /// FLOPs per time-frequency bin added on top of plain masking.
    pub flops_per_bin: f64,
    /// FLOPs per second of processed audio.
    pub flops_per_second: f64,
}

impl CostReport {
    pub fn mflops_per_second(&self) -> f64 {
        self.flops_per_second / 1e6
    }
}

/// Parameter count and compute overhead of the extension relative to
/// masking, per bin:
///
/// * 1x1 convolution: `2 n_f` outputs x 2 inputs = `4 n_f` MACs
/// * bias adds: `2 n_f` (when enabled)
/// * `tanh`: `2 n_f`, and the `1/n_f` scaling: `2 n_f` multiplies
/// * filtering: `n_f` complex MACs (8 FLOPs each) replace masking's single
///   complex multiply, an extra `8 (n_f - 1)`
pub fn dsfe_cost(cfg: &StftConfig, n_f: usize, with_bias: bool) -> Result<CostReport> {
    cfg.validate()?;
    if n_f == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    let nf = n_f as f64;
    let params = 4 * n_f + if with_bias { 2 * n_f } else { 0 };
    let conv = 2.0 * 4.0 * nf;
    let bias = if with_bias { 2.0 * nf } else { 0.0 };
    let tanh = 2.0 * nf;
    let scale = 2.0 * nf;
    let filtering = 8.0 * (nf - 1.0);
    let per_bin = conv + bias + tanh + scale + filtering;
    let bins_per_second = cfg.frames_per_second() * cfg.n_bins() as f64;
    Ok(CostReport {
        n_f,
        with_bias,
        trainable_param_count: params,
        flops_per_bin: per_bin,
        flops_per_second: per_bin * bins_per_second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Mask {
        let data = (0..frames * bins)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        Mask::from_vec(frames, bins, data).unwrap()
    }

    #[test]
    fn zero_params_give_zero_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 3, 4);
        let out = dsfe_forward(&m, &DsfeParams::zeros(5, true)).unwrap();
        assert!(out.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn hand_evaluated_taps() {
        let mut p = DsfeParams::zeros(2, true);
        p.weights[0] = 1.0;
        let m = Mask::filled(1, 1, Complex64::new(0.5, 0.0));
        let out = dsfe_forward(&m, &p).unwrap();
        // tanh(0.5) = 0.46211715726000974
        assert!((out.at(0, 0, 0).re - 0.231_058_578_630_004_87).abs() < 1e-15);
        assert_eq!(out.at(0, 0, 0).im, 0.0);
        assert_eq!(out.at(0, 1, 0), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn output_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n_f in [1, 3, 8] {
            let mut p = DsfeParams::init(n_f, true, DsfeInit::Uniform, 5).unwrap();
            for b in p.bias.as_mut().unwrap() {
                *b = rng.random_range(-50.0..50.0);
            }
            for w in p.weights.iter_mut() {
                *w *= 100.0;
            }
            let out = dsfe_forward(&random_mask(&mut rng, 4, 6), &p).unwrap();
            let bound = 1.0 / n_f as f64;
            assert!(out
                .data
                .iter()
                .all(|z| z.re.abs() <= bound && z.im.abs() <= bound));
        }
    }

    #[test]
    fn rejects_bad_params() {
        let m = Mask::filled(1, 1, Complex64::new(0.1, 0.1));
        let mut p = DsfeParams::zeros(2, false);
        p.weights[1] = f64::INFINITY;
        assert!(matches!(dsfe_forward(&m, &p), Err(Error::NonFinite(_))));
        let short = DsfeParams {
            n_f: 2,
            weights: vec![0.0; 3],
            bias: None,
        };
        assert!(dsfe_forward(&m, &short).is_err());
        assert!(DsfeParams::init(0, true, DsfeInit::Uniform, 0).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, 3, 2);
        let p = DsfeParams::init(2, true, DsfeInit::Uniform, 1).unwrap();
        let g = dsfe_backward(&m, &p, &MultiFrameFilter::zeros(3, 2, 2)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.mask.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn bias_grad_at_zero_params_sums_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mask(&mut rng, 3, 2);
        let p = DsfeParams::zeros(2, true);
        let mut up = MultiFrameFilter::zeros(3, 2, 2);
        for z in up.data.iter_mut() {
            *z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let g = dsfe_backward(&m, &p, &up).unwrap();
        let gb = g.bias.unwrap();
        for tau in 0..2 {
            let (mut sr, mut si) = (0.0, 0.0);
            for t in 0..3 {
                for f in 0..2 {
                    sr += up.at(t, tau, f).re;
                    si += up.at(t, tau, f).im;
                }
            }
            assert!((gb[2 * tau] - sr / 2.0).abs() < 1e-14);
            assert!((gb[2 * tau + 1] - si / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mask(&mut rng, 3, 2);
        let p = DsfeParams::init(2, true, DsfeInit::Uniform, 9).unwrap();
        let mut up = MultiFrameFilter::zeros(3, 2, 2);
        for z in up.data.iter_mut() {
            *z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        // L = <upstream, filter> is linear in the filter, so its gradient is `up`.
        let loss = |m: &Mask, p: &DsfeParams| -> f64 {
            let out = dsfe_forward(m, p).unwrap();
            out.data
                .iter()
                .zip(&up.data)
                .map(|(a, g)| a.re * g.re + a.im * g.im)
                .sum()
        };
        let g = dsfe_backward(&m, &p, &up).unwrap();
        let h = 1e-6;
        let flat = p.to_flat();
        for (i, &an) in g.to_flat().iter().enumerate() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            pp.set_flat(&fp).unwrap();
            pm.set_flat(&fm).unwrap();
            let fd = (loss(&m, &pp) - loss(&m, &pm)) / (2.0 * h);
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "param {i}");
        }
        for i in 0..m.data.len() {
            for part in 0..2 {
                let mut mp = m.clone();
                let mut mm = m.clone();
                if part == 0 {
                    mp.data[i].re += h;
                    mm.data[i].re -= h;
                } else {
                    mp.data[i].im += h;
                    mm.data[i].im -= h;
                }
                let fd = (loss(&mp, &p) - loss(&mm, &p)) / (2.0 * h);
                let an = if part == 0 { g.mask.data[i].re } else { g.mask.data[i].im };
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn cost_counts() {
        let cfg = StftConfig::default();
        assert_eq!(dsfe_cost(&cfg, 1, false).unwrap().trainable_param_count, 4);
        assert_eq!(dsfe_cost(&cfg, 20, true).unwrap().trainable_param_count, 120);
        assert_eq!(dsfe_cost(&cfg, 20, false).unwrap().trainable_param_count, 80);
        let c = dsfe_cost(&cfg, 20, true).unwrap();
        // 160 + 40 + 40 + 40 + 152 FLOPs per bin, 16100 bins per second.
        assert_eq!(c.flops_per_bin, 432.0);
        assert!((c.mflops_per_second() - 6.9552).abs() < 1e-9);
        assert!(dsfe_cost(&cfg, 0, true).is_err());
    }

    #[test]
    fn warm_identity_single_tap() {
        let p = DsfeParams::init(1, true, DsfeInit::WarmIdentity, 0).unwrap();
        let m = Mask::filled(1, 1, Complex64::new(0.3, -0.2));
        let out = dsfe_forward(&m, &p).unwrap();
        assert_eq!(out.at(0, 0, 0), Complex64::new(0.3f64.tanh(), (-0.2f64).tanh()));
    }
}
