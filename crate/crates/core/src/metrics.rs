//! Scale-invariant BSS metrics and evaluation reports.
//!
//! The estimate is split into orthogonal parts:
//!
//! ```text
//! est = e_target + e_interf + e_artif
//! e_target = (<est, ref> / |ref|^2) ref
//! e_interf = projection of est onto span{ref, interf}, minus e_target
//! e_artif  = the rest
//! ```
//!
//! SI-SDR compares `e_target` with everything else, SI-SIR with `e_interf`
//! and SI-SAR with `e_artif`. A component with (numerically) zero energy
//! gives an infinite score, carried as [`Db::Infinite`] rather than a
//! sentinel value; aggregates exclude such entries and count them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsfe::{dsfe_cost, CostReport};
use crate::model::{restore, Mode};
use crate::stft::{Stft, StftConfig, Waveform};
use crate::synth::{DatasetManifest, Split, Task};
use crate::training::{spectral_loss, Checkpoint};
use crate::wav::read_wav;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Db {
    Finite(f64),
    Infinite,
}

impl Db {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Db::Finite(v) => Some(*v),
            Db::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Db::Infinite)
    }

    fn ratio(num: f64, den: f64, floor: f64) -> Db {
        if den <= floor {
            Db::Infinite
        } else {
            Db::Finite(10.0 * (num / den).log10())
        }
    }
}

/// Orthogonal decomposition of an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub e_target: Vec<f64>,
    pub e_interf: Option<Vec<f64>>,
    pub e_artif: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    pub si_sdr: Db,
    pub si_sir: Option<Db>,
    pub si_sar: Option<Db>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_pair(a: &Waveform, b: &Waveform, what: &str) -> Result<()> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: a.sample_rate,
            found: b.sample_rate,
        });
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

pub fn decompose(est: &Waveform, reference: &Waveform, interf: Option<&Waveform>) -> Result<Decomposition> {
    check_pair(est, reference, "estimate vs reference")?;
    let (e, r) = (&est.samples, &reference.samples);
    let rr = energy(r);
    if rr == 0.0 {
        return Err(Error::Degenerate("reference has zero energy".into()));
    }
    let alpha = dot(e, r) / rr;
    let e_target: Vec<f64> = r.iter().map(|v| alpha * v).collect();
    if energy(&e_target) == 0.0 {
        return Err(Error::Degenerate("estimate is orthogonal to the reference".into()));
    }
    let e_interf = match interf {
        None => None,
        Some(n) => {
            check_pair(est, n, "estimate vs interference")?;
            // Gram-Schmidt: the part of `interf` orthogonal to `ref`.
            let c = dot(&n.samples, r) / rr;
            let u: Vec<f64> = n.samples.iter().zip(r).map(|(a, b)| a - c * b).collect();
            let uu = energy(&u);
            if !(uu > 1e-24 * energy(&n.samples)) {
                return Err(Error::Degenerate(
                    "interference reference is (nearly) collinear with the target".into(),
                ));
            }
            let beta = dot(e, &u) / uu;
            Some(u.iter().map(|v| beta * v).collect::<Vec<f64>>())
        }
    };
    let e_artif = match &e_interf {
        None => e.iter().zip(&e_target).map(|(a, b)| a - b).collect(),
        Some(ei) => e
            .iter()
            .zip(&e_target)
            .zip(ei)
            .map(|((a, b), c)| a - b - c)
            .collect(),
    };
    Ok(Decomposition {
        e_target,
        e_interf,
        e_artif,
    })
}

/// Energies at or below `16 n eps^2 |est|^2` count as zero (round-off level).
pub fn si_bss_eval(est: &Waveform, reference: &Waveform, interf: Option<&Waveform>) -> Result<BssScores> {
    let d = decompose(est, reference, interf)?;
    let floor = 16.0 * est.len() as f64 * f64::EPSILON * f64::EPSILON * est.energy();
    let et = energy(&d.e_target);
    let ea = energy(&d.e_artif);
    let residual: f64 = match &d.e_interf {
        None => ea,
        Some(ei) => d
            .e_artif
            .iter()
            .zip(ei)
            .map(|(a, b)| (a + b) * (a + b))
            .sum(),
    };
    Ok(BssScores {
        si_sdr: Db::ratio(et, residual, floor),
        si_sir: d.e_interf.as_ref().map(|ei| Db::ratio(et, energy(ei), floor)),
        si_sar: d.e_interf.as_ref().map(|_| Db::ratio(et, ea, floor)),
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub id: String,
    pub scores: BssScores,
    /// Spectral loss of the restored spectrogram against the target.
    pub loss: f64,
}

/// Mean and population standard deviation over finite entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub infinite: usize,
}

impl Aggregate {
    pub fn from_values(values: impl IntoIterator<Item = Db>) -> Self {
        let mut finite = Vec::new();
        let mut infinite = 0;
        for v in values {
            match v {
                Db::Finite(x) => finite.push(x),
                Db::Infinite => infinite += 1,
            }
        }
        let n = finite.len();
        if n == 0 {
            return Aggregate {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                infinite,
            };
        }
        let mean = finite.iter().sum::<f64>() / n as f64;
        let var = finite.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Aggregate {
            mean,
            std: var.sqrt(),
            count: n,
            infinite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub si_sdr: Aggregate,
    pub si_sir: Option<Aggregate>,
    pub si_sar: Option<Aggregate>,
    pub loss: Aggregate,
}

impl Summary {
    pub fn from_rows(rows: &[UtteranceRow]) -> Self {
        let has_sir = rows.iter().all(|r| r.scores.si_sir.is_some()) && !rows.is_empty();
        Summary {
            si_sdr: Aggregate::from_values(rows.iter().map(|r| r.scores.si_sdr)),
            si_sir: has_sir.then(|| Aggregate::from_values(rows.iter().filter_map(|r| r.scores.si_sir))),
            si_sar: has_sir.then(|| Aggregate::from_values(rows.iter().filter_map(|r| r.scores.si_sar))),
            loss: Aggregate::from_values(rows.iter().map(|r| Db::Finite(r.loss))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub label: String,
    pub rows: Vec<UtteranceRow>,
    pub summary: Summary,
}

impl SystemResult {
    pub fn new(label: impl Into<String>, rows: Vec<UtteranceRow>) -> Self {
        SystemResult {
            label: label.into(),
            summary: Summary::from_rows(&rows),
            rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: Split,
    /// Unprocessed mixtures scored against the targets.
    pub mixture: SystemResult,
    pub model: SystemResult,
    /// Extension overhead; absent for a masking model.
    pub cost: Option<CostReport>,
}

fn fmt_agg(a: Option<&Aggregate>) -> String {
    match a {
        None => "-".into(),
        Some(a) if a.count == 0 => "inf".into(),
        Some(a) => {
            let mut s = format!("{:.2} ± {:.2}", a.mean, a.std);
            if a.infinite > 0 {
                s.push_str(&format!(" (+{} inf)", a.infinite));
            }
            s
        }
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned table: one row per system, `mean ± std` per metric.
    pub fn to_table(&self) -> String {
        let header = ["System", "SI-SDR", "SI-SIR", "SI-SAR", "Loss", "Params", "MFLOPS/s"];
        let mut rows = vec![header.map(String::from).to_vec()];
        for (sys, cost) in [(&self.mixture, None), (&self.model, Some(self.cost))] {
            let s = &sys.summary;
            let (params, flops) = match cost {
                None => ("-".into(), "-".into()),
                Some(None) => ("0".into(), "0.00".into()),
                Some(Some(c)) => (
                    c.trainable_param_count.to_string(),
                    format!("{:.2}", c.mflops_per_second()),
                ),
            };
            rows.push(vec![
                sys.label.clone(),
                fmt_agg(Some(&s.si_sdr)),
                fmt_agg(s.si_sir.as_ref()),
                fmt_agg(s.si_sar.as_ref()),
                format!("{:.4} ± {:.4}", s.loss.mean, s.loss.std),
                params,
                flops,
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{} / {}\n", self.task.as_str(), self.split.as_str());
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

/// Mixture, target and interference waveforms of one record. For
/// dereverberation the interference is `mixture - target`.
pub struct LoadedRecord {
    pub id: String,
    pub mixture: Waveform,
    pub target: Waveform,
    pub interference: Waveform,
}

pub fn load_records(manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedRecord>> {
    manifest
        .split(split)
        .map(|rec| {
            let mixture = read_wav(manifest.resolve(&rec.mixture_path))?;
            let target = read_wav(manifest.resolve(&rec.target_path))?;
            check_pair(&mixture, &target, &rec.id)?;
            let interference = match &rec.interference_path {
                Some(p) => read_wav(manifest.resolve(p))?,
                None => Waveform::new(
                    mixture.samples.iter().zip(&target.samples).map(|(x, s)| x - s).collect(),
                    mixture.sample_rate,
                )?,
            };
            check_pair(&mixture, &interference, &rec.id)?;
            Ok(LoadedRecord {
                id: rec.id.clone(),
                mixture,
                target,
                interference,
            })
        })
        .collect()
}

fn score(rec: &LoadedRecord, est: &Waveform, plan: &Stft) -> Result<UtteranceRow> {
    let scores = si_bss_eval(est, &rec.target, Some(&rec.interference))?;
    let (loss, _) = spectral_loss(
        &plan.analyze_for_processing(est)?,
        &plan.analyze_for_processing(&rec.target)?,
    )?;
    Ok(UtteranceRow {
        id: rec.id.clone(),
        scores,
        loss,
    })
}

/// Scores `restorer` on a split, next to the unprocessed mixtures.
pub fn evaluate_with(
    manifest: &DatasetManifest,
    split: Split,
    cfg: &StftConfig,
    label: &str,
    cost: Option<CostReport>,
    restorer: &mut dyn FnMut(&Waveform) -> Result<Waveform>,
) -> Result<EvalReport> {
    let task = manifest.task()?;
    let records = load_records(manifest, split)?;
    if records.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let plan = Stft::new(*cfg)?;
    let mut mix_rows = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len());
    for rec in &records {
        mix_rows.push(score(rec, &rec.mixture, &plan)?);
        let est = restorer(&rec.mixture)?;
        rows.push(score(rec, &est, &plan)?);
    }
    Ok(EvalReport {
        task,
        split,
        mixture: SystemResult::new("mixture", mix_rows),
        model: SystemResult::new(label, rows),
        cost,
    })
}

pub fn evaluate_manifest(manifest: &DatasetManifest, checkpoint: &Checkpoint, split: Split) -> Result<EvalReport> {
    checkpoint.validate()?;
    let (label, cost) = match checkpoint.model.mode() {
        Mode::Masking => ("masking".to_string(), None),
        Mode::Dsfe(n) => {
            let with_bias = checkpoint.model.dsfe.as_ref().is_some_and(|d| d.bias.is_some());
            (format!("dsfe n_f={n}"), Some(dsfe_cost(&checkpoint.stft, n, with_bias)?))
        }
    };
    let cfg = checkpoint.stft;
    evaluate_with(manifest, split, &cfg, &label, cost, &mut |x| {
        restore(x, &checkpoint.model, &cfg)
    })
}
