//! Numerical self-checks run by `dsfe check`: reconstruction, naive-sum
//! oracles, the masking/filtering degeneration, metric identities, the
//! extension bound and finite-difference gradients of every trainable
//! stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_backward, backbone_forward_cached, BackboneConfig, BackboneParams};
use crate::dsfe::{dsfe_backward, dsfe_forward, DsfeInit, DsfeParams};
use crate::filtering::{apply_mask, apply_subband_filter, convolve_time, Mask, MultiFrameFilter};
use crate::metrics::{decompose, si_bss_eval};
use crate::model::{backward, forward, ModelParams};
use crate::num_complex::Complex64;
use crate::stft::{compress_features, istft_len, FeatureTensor, Spectrogram, Stft, StftConfig, Waveform};
use crate::training::{spectral_loss, LossDomain};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured worst-case value.
    pub value: f64,
    pub tolerance: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

fn check(name: &'static str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name,
        passed: value <= tolerance,
        value,
        tolerance,
    }
}

fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn random_wav(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
    Waveform {
        samples: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        sample_rate: 16_000,
    }
}

/// Largest componentwise relative error between analytic and central
/// finite-difference gradients. The denominator is floored at
/// `1e-3 * max|analytic|`: below that, central differences are dominated
/// by rounding, so such entries are judged relative to the gradient scale.
pub fn gradient_error(analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Real loss `<G, est>` (sum of Re/Im products) used to probe linear maps.
fn probe_loss(est: &[Complex64], weights: &[Complex64]) -> f64 {
    est.iter().zip(weights).map(|(e, w)| e.re * w.re + e.im * w.im).sum()
}

pub fn stft_round_trip(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = StftConfig::default();
    let plan = Stft::new(cfg)?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = random_wav(&mut rng, 16_000);
        let y = istft_len(&plan.analyze(&x)?, &cfg, x.len())?;
        let err = x.samples.iter().zip(&y.samples).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / x.peak());
    }
    Ok(check("stft_round_trip", worst, 1e-9))
}

pub fn single_tap_equals_mask(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..10 {
        let (t, f) = (rng.random_range(1..20), rng.random_range(1..20));
        let x = Spectrogram::from_vec(t, f, random_complex(&mut rng, t * f))?;
        let m = Mask::from_vec(t, f, random_complex(&mut rng, t * f))?;
        let filt = MultiFrameFilter {
            frames: t,
            taps: 1,
            bins: f,
            data: m.data.clone(),
        };
        let a = apply_mask(&x, &m)?;
        let b = apply_subband_filter(&x, &filt)?;
        mismatches += a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(p, q)| p.re.to_bits() != q.re.to_bits() || p.im.to_bits() != q.im.to_bits())
            .count();
    }
    Ok(check("single_tap_equals_mask", mismatches as f64, 0.0))
}

pub fn naive_oracles(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (ns, nw) = (rng.random_range(1..200), rng.random_range(1..50));
        let s = random_wav(&mut rng, ns);
        let w = random_wav(&mut rng, nw);
        let y = convolve_time(&s, &w)?;
        let mut naive = vec![0.0; s.len() + w.len() - 1];
        for (i, a) in s.samples.iter().enumerate() {
            for (j, b) in w.samples.iter().enumerate() {
                naive[i + j] += a * b;
            }
        }
        let scale = naive.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (a, b) in y.samples.iter().zip(&naive) {
            worst = worst.max((a - b).abs() / scale);
        }

        let (t, f, n) = (rng.random_range(1..12), rng.random_range(1..8), rng.random_range(1..5));
        let x = Spectrogram::from_vec(t, f, random_complex(&mut rng, t * f))?;
        let filt = MultiFrameFilter {
            frames: t,
            taps: n,
            bins: f,
            data: random_complex(&mut rng, t * n * f),
        };
        let out = apply_subband_filter(&x, &filt)?;
        for ti in 0..t {
            for fi in 0..f {
                let mut acc = Complex64::new(0.0, 0.0);
                for tau in 0..n.min(ti + 1) {
                    acc += filt.at(ti, tau, fi) * x.at(ti - tau, fi);
                }
                let scale = acc.norm().max(1.0);
                worst = worst.max((out.at(ti, fi) - acc).norm() / scale);
            }
        }
    }
    Ok(check("naive_sum_oracles", worst, 1e-12))
}

pub fn dsfe_bound(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n_f = rng.random_range(1..25);
        let mut p = DsfeParams::init(n_f, true, DsfeInit::Uniform, rng.random())?;
        for w in p.weights.iter_mut() {
            *w *= 50.0;
        }
        let m = Mask::from_vec(4, 5, random_complex(&mut rng, 20))?;
        let filt = dsfe_forward(&m, &p)?;
        for z in &filt.data {
            worst = worst.max(z.re.abs().max(z.im.abs()) * n_f as f64);
        }
    }
    // Exceeding 1 would mean a tap component at or beyond 1/N_f.
    Ok(CheckResult {
        name: "dsfe_tap_bound",
        passed: worst <= 1.0,
        value: worst,
        tolerance: 1.0,
    })
}

pub fn metric_identities(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let r = random_wav(&mut rng, 800);
        let n = random_wav(&mut rng, 800);
        let est = random_wav(&mut rng, 800);
        let base = si_bss_eval(&est, &r, None)?.si_sdr.finite().unwrap_or(f64::NAN);
        let alpha = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let scaled = Waveform {
            samples: est.samples.iter().map(|v| v * alpha).collect(),
            sample_rate: est.sample_rate,
        };
        let other = si_bss_eval(&scaled, &r, None)?.si_sdr.finite().unwrap_or(f64::NAN);
        worst = worst.max((base - other).abs());
        let d = decompose(&est, &r, Some(&n))?;
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let total = e(&d.e_target) + e(d.e_interf.as_deref().unwrap_or(&[])) + e(&d.e_artif);
        worst = worst.max((total - est.energy()).abs() / est.energy());
    }
    Ok(check("si_sdr_identities", worst, 1e-9))
}

fn tiny_problem(rng: &mut ChaCha8Rng) -> (FeatureTensor, Spectrogram, Spectrogram) {
    let (t, f) = (5, 3);
    let mix = Spectrogram {
        frames: t,
        bins: f,
        data: random_complex(rng, t * f),
    };
    let target = Spectrogram {
        frames: t,
        bins: f,
        data: random_complex(rng, t * f),
    };
    let feat = compress_features(&mix).expect("finite mix");
    (feat, mix, target)
}

fn tiny_backbone(rng: &mut ChaCha8Rng) -> Result<BackboneParams> {
    let cfg = BackboneConfig {
        context: 2,
        hidden: 3,
        bins: 3,
    };
    let mut p = BackboneParams::init(cfg, rng.random())?;
    for v in p.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    Ok(p)
}

pub fn gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (feat, mix, target) = tiny_problem(&mut rng);

    // Extension layer, parameters and mask input.
    let n_f = 3;
    let mut dp = DsfeParams::init(n_f, true, DsfeInit::Uniform, rng.random())?;
    for b in dp.bias.as_mut().expect("bias").iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let m = Mask::from_vec(4, 2, random_complex(&mut rng, 8))?;
    let up = MultiFrameFilter {
        frames: 4,
        taps: n_f,
        bins: 2,
        data: random_complex(&mut rng, 4 * n_f * 2),
    };
    let g = dsfe_backward(&m, &dp, &up)?;
    let x0 = dp.to_flat();
    let e_params = gradient_error(
        &g.to_flat(),
        |x| {
            let mut q = dp.clone();
            q.set_flat(x).expect("layout");
            probe_loss(&dsfe_forward(&m, &q).expect("forward").data, &up.data)
        },
        &x0,
        h,
    );
    let mflat: Vec<f64> = m.data.iter().flat_map(|z| [z.re, z.im]).collect();
    let gm: Vec<f64> = g.mask.data.iter().flat_map(|z| [z.re, z.im]).collect();
    let e_mask = gradient_error(
        &gm,
        |x| {
            let data = x.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
            let mm = Mask::from_vec(4, 2, data).expect("shape");
            probe_loss(&dsfe_forward(&mm, &dp).expect("forward").data, &up.data)
        },
        &mflat,
        h,
    );

    // Backbone.
    let bp = tiny_backbone(&mut rng)?;
    let (mask, cache) = backbone_forward_cached(&feat, &bp)?;
    let gmask = Mask::from_vec(mask.frames, mask.bins, random_complex(&mut rng, mask.data.len()))?;
    let gb = backbone_backward(&feat, &bp, &mask, &cache, &gmask)?;
    let e_backbone = gradient_error(
        &gb,
        |x| {
            let q = BackboneParams {
                config: bp.config,
                values: x.to_vec(),
            };
            probe_loss(&backbone_forward_cached(&feat, &q).expect("forward").0.data, &gmask.data)
        },
        &bp.values,
        h,
    );

    // Loss.
    let (_, gl) = spectral_loss(&mix, &target)?;
    let flat_mix: Vec<f64> = mix.data.iter().flat_map(|z| [z.re, z.im]).collect();
    let gl_flat: Vec<f64> = gl.data.iter().flat_map(|z| [z.re, z.im]).collect();
    let e_loss = gradient_error(
        &gl_flat,
        |x| {
            let est = Spectrogram {
                frames: mix.frames,
                bins: mix.bins,
                data: x.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
            };
            spectral_loss(&est, &target).expect("shape").0
        },
        &flat_mix,
        h,
    );

    // Full pipeline: features -> backbone -> extension -> filtering -> loss.
    let model = ModelParams {
        backbone: bp.clone(),
        dsfe: Some(dp.clone()),
    };
    let pass = forward(&feat, &mix, &model)?;
    let (_, g_est) = crate::training::loss_in_domain(&pass.estimate, &target, LossDomain::Uncompressed)?;
    let analytic = backward(&feat, &mix, &model, &pass, &g_est, true)?;
    let x0 = model.trainable(true);
    let e_full = gradient_error(
        &analytic,
        |x| {
            let mut q = model.clone();
            q.set_trainable(x, true).expect("layout");
            let est = forward(&feat, &mix, &q).expect("forward").estimate;
            spectral_loss(&est, &target).expect("shape").0
        },
        &x0,
        h,
    );

    Ok(vec![
        check("grad_dsfe_params", e_params, 1e-6),
        check("grad_dsfe_mask", e_mask, 1e-6),
        check("grad_backbone", e_backbone, 1e-4),
        check("grad_loss", e_loss, 1e-6),
        check("grad_full_pipeline", e_full, 1e-4),
    ])
}

/// Runs every check with seeds derived from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let s = |k: u64| crate::seed::derive_seed(seed, k);
    let mut out = vec![
        stft_round_trip(s(1))?,
        single_tap_equals_mask(s(2))?,
        naive_oracles(s(3))?,
        dsfe_bound(s(4))?,
        metric_identities(s(5))?,
    ];
    out.extend(gradients(s(6))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(7).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn gradient_error_detects_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        assert!(gradient_error(&[2.0, 3.0], f, &[1.0, 0.5], 1e-6) < 1e-8);
        assert!(gradient_error(&[2.0, 3.3], f, &[1.0, 0.5], 1e-6) > 0.05);
    }
}
