//! Command-line surface: `synth`, `train`, `enhance`, `eval`, `cost` and
//! `check`.
//!
//! Every subcommand takes an optional JSON config (`--config`) whose keys
//! mirror [`CliConfig`]; flags override keys. The effective config is
//! written to `config.json` in the output directory, and passing that file
//! back with `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 file-system or file-format failure, 4 failed self-check.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dsfe::dsfe_cost;
use crate::metrics::evaluate_manifest;
use crate::model::restore;
use crate::synth::{gen_dataset, DatasetManifest, DatasetSpec, Split, SplitCounts, Task};
use crate::training::{train_model_with, Checkpoint, Strategy, TrainConfig};
use crate::wav::{read_wav, write_wav, WavEncoding, SUPPORTED_RATE};

pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const COST_JSON: &str = "cost.json";
pub const COST_TABLE: &str = "cost.txt";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Everything a run can be configured with. Paths are relative to the
/// working directory. `seed` seeds both dataset synthesis and training;
/// `train.seed` must be left unset or equal to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub task: Option<Task>,
    pub counts: SplitCounts,
    pub clip_seconds: f64,
    pub train: TrainConfig,
    /// Dataset manifest (`manifest.jsonl`).
    pub data: Option<PathBuf>,
    /// Pretrained masking checkpoint for the pretrain strategies.
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Single WAV file for `enhance`.
    pub input: Option<PathBuf>,
    pub split: Split,
    pub cost_nf: Vec<usize>,
    pub out: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            task: None,
            counts: SplitCounts::default(),
            clip_seconds: 2.0,
            train: TrainConfig::default(),
            data: None,
            init: None,
            checkpoint: None,
            input: None,
            split: Split::Test,
            cost_nf: vec![1, 4, 8, 12, 16, 20, 24],
            out: None,
        }
    }
}

/// Invalid arguments or configuration (exit 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// At least one self-check failed (exit 4).
#[derive(Debug, thiserror::Error)]
#[error("{0} self-check(s) failed")]
pub struct CheckFailed(pub usize);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "dsfe", version, about = "Speech restoration with masking and deep subband filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// denoise or dereverb.
    #[arg(long, global = true)]
    task: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of filter taps; 1 trains plain masking.
    #[arg(long)]
    nf: Option<usize>,
    /// join, pretrain_freeze or pretrain_finetune.
    #[arg(long)]
    strategy: Option<String>,
    /// Pretrained masking checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corruption dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        valid_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        clip_seconds: Option<f64>,
    },
    /// Train a masking or extension model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Restore a WAV file, or every record of a dataset split.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Parameter and compute overhead of the extension layer.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Comma-separated tap counts.
        #[arg(long, value_delimiter = ',')]
        nf: Option<Vec<usize>>,
        #[arg(long)]
        no_bias: bool,
    },
    /// Run the numerical self-checks.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Maps an error chain to its exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<CheckFailed>() {
            return EXIT_CHECK;
        }
        if let Some(err) = cause.downcast_ref::<crate::Error>() {
            return match err {
                _ if err.is_io() => EXIT_IO,
                crate::Error::Config(_) | crate::Error::SampleRateMismatch { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_RUNTIME
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth {
            common,
            train_count,
            valid_count,
            test_count,
            clip_seconds,
        } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.counts.train, train_count);
            set(&mut cfg.counts.valid, valid_count);
            set(&mut cfg.counts.test, test_count);
            set(&mut cfg.clip_seconds, clip_seconds);
            cmd_synth(&cfg)
        }
        Command::Train { common, flags } => {
            let mut cfg = base_config(&common)?;
            apply_train_flags(&mut cfg, flags)?;
            cmd_train(&cfg)
        }
        Command::Enhance {
            common,
            checkpoint,
            input,
            data,
            split,
        } => {
            let mut cfg = base_config(&common)?;
            set_opt(&mut cfg.checkpoint, checkpoint);
            set_opt(&mut cfg.input, input);
            set_opt(&mut cfg.data, data);
            apply_split(&mut cfg, split)?;
            cmd_enhance(&cfg)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => {
            let mut cfg = base_config(&common)?;
            set_opt(&mut cfg.checkpoint, checkpoint);
            set_opt(&mut cfg.data, data);
            apply_split(&mut cfg, split)?;
            cmd_eval(&cfg)
        }
        Command::Cost { common, nf, no_bias } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.cost_nf, nf);
            if no_bias {
                cfg.train.dsfe_bias = false;
            }
            cmd_cost(&cfg)
        }
        Command::Check { common } => {
            let cfg = base_config(&common)?;
            cmd_check(&cfg)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Reads a config file. Missing keys take their defaults; unknown keys are
/// rejected.
pub fn load_config(path: &Path) -> anyhow::Result<CliConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: CliConfig = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("config {}: {e}", path.display())))?;
    if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
        return Err(config_err(format!(
            "config {}: train.seed {} conflicts with seed {}; set only seed",
            path.display(),
            cfg.train.seed,
            cfg.seed
        )));
    }
    Ok(cfg)
}

fn base_config(common: &Common) -> anyhow::Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => CliConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set_opt(&mut cfg.out, common.out.clone());
    if let Some(t) = &common.task {
        cfg.task = Some(t.parse::<Task>()?);
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut CliConfig, f: TrainFlags) -> anyhow::Result<()> {
    set_opt(&mut cfg.data, f.data);
    set_opt(&mut cfg.init, f.init);
    set(&mut cfg.train.n_f, f.nf);
    set(&mut cfg.train.learning_rate, f.lr);
    set(&mut cfg.train.batch_size, f.batch_size);
    set(&mut cfg.train.max_epochs, f.epochs);
    set(&mut cfg.train.patience_epochs, f.patience);
    if let Some(s) = f.strategy {
        cfg.train.strategy = s.parse::<Strategy>()?;
    }
    Ok(())
}

fn apply_split(cfg: &mut CliConfig, split: Option<String>) -> anyhow::Result<()> {
    if let Some(s) = split {
        cfg.split = match s.as_str() {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(config_err(format!("unknown split {other:?} (expected train, valid or test)"))),
        };
    }
    Ok(())
}

fn require<'a, T>(value: &'a Option<T>, flag: &str, what: &str) -> anyhow::Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| config_err(format!("{what} requires {flag}")))
}

fn prepare_out(cfg: &CliConfig, what: &str) -> anyhow::Result<PathBuf> {
    let out = require(&cfg.out, "--out", what)?.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let echo = serde_json::to_string_pretty(cfg).context("serializing config")? + "\n";
    let path = out.join(CONFIG_ECHO);
    fs::write(&path, echo).with_context(|| format!("writing {}", path.display()))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(cfg: &CliConfig, what: &str) -> anyhow::Result<DatasetManifest> {
    let path = require(&cfg.data, "--data", what)?;
    let manifest = DatasetManifest::load(path)?;
    if let Some(task) = cfg.task {
        let found = manifest.task()?;
        if found != task {
            return Err(config_err(format!(
                "--task {} does not match dataset task {}",
                task.as_str(),
                found.as_str()
            )));
        }
    }
    Ok(manifest)
}

fn check_rate(cfg: &crate::StftConfig) -> anyhow::Result<()> {
    if cfg.sample_rate != SUPPORTED_RATE {
        return Err(config_err(format!(
            "stft.sample_rate must be {SUPPORTED_RATE} Hz, got {}",
            cfg.sample_rate
        )));
    }
    Ok(())
}

fn cmd_synth(cfg: &CliConfig) -> anyhow::Result<()> {
    let task = *require(&cfg.task, "--task", "synth")?;
    if !(cfg.clip_seconds > 0.0) || !cfg.clip_seconds.is_finite() {
        return Err(config_err(format!("clip_seconds must be positive, got {}", cfg.clip_seconds)));
    }
    if cfg.counts.total() == 0 {
        return Err(config_err("counts must contain at least one record"));
    }
    let out = prepare_out(cfg, "synth")?;
    let spec = DatasetSpec {
        task,
        counts: cfg.counts,
        clip_seconds: cfg.clip_seconds,
        seed: cfg.seed,
    };
    let manifest = gen_dataset(&spec, &out, SUPPORTED_RATE)?;
    println!(
        "wrote {} {} records to {}",
        manifest.records.len(),
        task.as_str(),
        out.join(crate::synth::MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_train(cfg: &CliConfig) -> anyhow::Result<()> {
    let tc = &cfg.train;
    tc.validate()?;
    check_rate(&tc.stft)?;
    if tc.strategy.needs_init() && cfg.init.is_none() {
        return Err(config_err(format!(
            "strategy {} requires a pretrained masking checkpoint (--init)",
            tc.strategy.as_str()
        )));
    }
    if !tc.strategy.needs_init() && cfg.init.is_some() {
        return Err(config_err("--init is only used by the pretrain_freeze and pretrain_finetune strategies"));
    }
    let manifest = load_manifest(cfg, "train")?;
    let init = cfg.init.as_ref().map(Checkpoint::load).transpose()?;
    // Catches an incompatible init before any data is loaded.
    tc.initial_model(init.as_ref())?;
    let out = prepare_out(cfg, "train")?;
    let ckpt = train_model_with(&manifest, tc, init.as_ref(), &mut |r| {
        eprintln!(
            "epoch {:>4}  train {:.6}  valid {:.6}{}",
            r.epoch,
            r.train_loss,
            r.valid_loss,
            if r.improved { "  *" } else { "" }
        );
    })?;
    let path = out.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    println!(
        "best epoch {} (valid {:.6}), stopped at {}; wrote {}",
        ckpt.best_epoch,
        ckpt.history.valid_loss.get(ckpt.best_epoch.saturating_sub(1)).copied().unwrap_or(f64::NAN),
        ckpt.stopped_epoch,
        path.display()
    );
    Ok(())
}

fn cmd_enhance(cfg: &CliConfig) -> anyhow::Result<()> {
    let ckpt_path = require(&cfg.checkpoint, "--checkpoint", "enhance")?;
    let jobs: Vec<(String, PathBuf)> = match (&cfg.input, &cfg.data) {
        (Some(_), Some(_)) => return Err(config_err("enhance takes either --input or --data, not both")),
        (None, None) => return Err(config_err("enhance requires --input or --data")),
        (Some(input), None) => {
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| config_err(format!("input {} has no file name", input.display())))?;
            vec![(stem, input.clone())]
        }
        (None, Some(_)) => {
            let manifest = load_manifest(cfg, "enhance")?;
            manifest
                .split(cfg.split)
                .map(|r| (r.id.clone(), manifest.resolve(&r.mixture_path)))
                .collect()
        }
    };
    let ckpt = Checkpoint::load(ckpt_path)?;
    ckpt.validate()?;
    let out = prepare_out(cfg, "enhance")?;
    for (name, path) in &jobs {
        let x = read_wav(path)?;
        let y = restore(&x, &ckpt.model, &ckpt.stft)?;
        write_wav(out.join(format!("{name}_enhanced.wav")), &y, WavEncoding::Float32)?;
    }
    println!("enhanced {} file(s) into {}", jobs.len(), out.display());
    Ok(())
}

fn cmd_eval(cfg: &CliConfig) -> anyhow::Result<()> {
    let ckpt_path = require(&cfg.checkpoint, "--checkpoint", "eval")?;
    let manifest = load_manifest(cfg, "eval")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let out = prepare_out(cfg, "eval")?;
    let report = evaluate_manifest(&manifest, &ckpt, cfg.split)?;
    write_text(&out.join(REPORT_JSON), &(report.to_json() + "\n"))?;
    let table = report.to_table();
    write_text(&out.join(REPORT_TABLE), &table)?;
    print!("{table}");
    Ok(())
}

/// Text table of [`dsfe_cost`] rows.
pub fn cost_table(cfg: &crate::StftConfig, nfs: &[usize], with_bias: bool) -> crate::Result<(String, Vec<crate::dsfe::CostReport>)> {
    let rows = nfs
        .iter()
        .map(|&n| dsfe_cost(cfg, n, with_bias))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut s = format!(
        "extension overhead ({} bias, {} Hz, window {}, hop {})\n{:>4}  {:>7}  {:>10}  {:>9}\n",
        if with_bias { "with" } else { "no" },
        cfg.sample_rate,
        cfg.window_len,
        cfg.hop,
        "N_f",
        "params",
        "FLOPs/bin",
        "MFLOPS/s"
    );
    for r in &rows {
        s += &format!(
            "{:>4}  {:>7}  {:>10.0}  {:>9.3}\n",
            r.n_f,
            r.trainable_param_count,
            r.flops_per_bin,
            r.mflops_per_second()
        );
    }
    Ok((s, rows))
}

fn cmd_cost(cfg: &CliConfig) -> anyhow::Result<()> {
    if cfg.cost_nf.is_empty() {
        return Err(config_err("cost_nf must list at least one tap count"));
    }
    let (table, rows) = cost_table(&cfg.train.stft, &cfg.cost_nf, cfg.train.dsfe_bias)?;
    if cfg.out.is_some() {
        let out = prepare_out(cfg, "cost")?;
        let json = serde_json::to_string_pretty(&rows).context("serializing cost rows")? + "\n";
        write_text(&out.join(COST_JSON), &json)?;
        write_text(&out.join(COST_TABLE), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_check(cfg: &CliConfig) -> anyhow::Result<()> {
    let results = crate::selftest::run_all(cfg.seed).map_err(|e| anyhow!(e).context("self-check aborted"))?;
    let mut text = String::new();
    for r in &results {
        text += &format!("{r}\n");
    }
    if cfg.out.is_some() {
        let out = prepare_out(cfg, "check")?;
        write_text(&out.join("check.txt"), &text)?;
    }
    print!("{text}");
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CheckFailed(failed).into());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = CliConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: CliConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<CliConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<CliConfig>(r#"{"train": {"lr": 0.1}}"#).is_err());
        let partial: CliConfig = serde_json::from_str(r#"{"seed": 3, "train": {"n_f": 8}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.train.n_f, 8);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&config_err("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&CheckFailed(1).into()), EXIT_CHECK);
        assert_eq!(exit_code(&crate::Error::Config("x".into()).into()), EXIT_CONFIG);
        let io = crate::Error::io("a", std::io::Error::other("b"));
        assert_eq!(exit_code(&anyhow::Error::from(io).context("outer")), EXIT_IO);
        assert_eq!(exit_code(&crate::Error::NonFinite("x").into()), EXIT_RUNTIME);
    }

    #[test]
    fn pretrain_without_init_names_the_flag() {
        let code = run(["dsfe", "train", "--strategy", "pretrain_freeze", "--data", "nowhere.jsonl"]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn bad_arguments_exit_2() {
        assert_eq!(run(["dsfe", "train", "--nf", "zero"]), EXIT_CONFIG);
        assert_eq!(run(["dsfe", "synth", "--task", "unmix", "--out", "x"]), EXIT_CONFIG);
        assert_eq!(run(["dsfe", "frobnicate"]), EXIT_CONFIG);
    }

    #[test]
    fn cost_table_has_one_row_per_nf() {
        let (t, rows) = cost_table(&crate::StftConfig::default(), &[1, 4, 8, 12, 16, 20, 24], true).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(t.lines().count(), 9);
    }
}
