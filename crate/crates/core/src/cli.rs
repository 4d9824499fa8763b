//! Command-line front end: `synth`, `train`, `separate`, `eval`, `dump-kernels`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_scene, load_wav, read_manifest, resample_scene, save_wav, scene_dir, write_dataset, write_resampled_test,
    DatasetSpec, ManifestRecord, Scene, Split, WavFormat,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, summarize, write_errors, write_report, write_summary, EvalSet, Method, ReportRow};
use crate::filter_design::write_kernel_dump;
use crate::loss_metrics::EvalOptions;
use crate::network::SeparationModel;
use crate::resampler::ResampleQuality;
use crate::train::{train, write_train_log, EpochLog, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_UNSUPPORTED_FS: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sfisep", version, about = "Sampling-frequency-independent sound separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Separate one WAV file.
    Separate(SeparateArgs),
    /// Score methods across sampling frequencies.
    Eval(EvalArgs),
    /// Write the encoder kernels generated at one sampling frequency.
    DumpKernels(DumpArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?}")))
        .collect()
}

fn parse_counts(s: &str) -> std::result::Result<[usize; 4], String> {
    let v: Vec<usize> = parse_list(s)?;
    v.try_into().map_err(|_| "expected four comma-separated counts (N = 1..4)".to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON dataset spec; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training scenes per source count, e.g. `4,4,4,4`.
    #[arg(long, value_parser = parse_counts)]
    pub counts: Option<[usize; 4]>,
    #[arg(long, value_parser = parse_counts)]
    pub val_counts: Option<[usize; 4]>,
    #[arg(long, value_parser = parse_counts)]
    pub test_counts: Option<[usize; 4]>,
    #[arg(long)]
    pub fs: Option<u32>,
    #[arg(long)]
    pub duration: Option<f64>,
    /// Also write the test split resampled to these rates.
    #[arg(long, value_delimiter = ',')]
    pub test_sf: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train one model per seed into `<out>/seed_<s>`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sfi")]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One or more checkpoints (comma separated), e.g. one per training seed.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',')]
    pub sf: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', default_value = "sfi,resample-best,resample-fast")]
    pub methods: Vec<Method>,
    #[arg(long, default_value = "report.csv")]
    pub report: PathBuf,
    /// Sources quieter than this fraction of the mixture energy are not scored.
    #[arg(long, default_value_t = 1e-3)]
    pub activity_floor: f64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sf: u32,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnsupportedSamplingFrequency { .. } => EXIT_UNSUPPORTED_FS,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_IO,
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Separate(a) => cmd_separate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::DumpKernels(a) => cmd_dump_kernels(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(c) = a.counts {
        spec.train = c;
    }
    if let Some(c) = a.val_counts {
        spec.val = c;
    }
    if let Some(c) = a.test_counts {
        spec.test = c;
    }
    if let Some(fs) = a.fs {
        spec.fs = fs;
    }
    if let Some(d) = a.duration {
        spec.duration = d;
    }
    let records = write_dataset(&a.out, &spec)?;
    for split in Split::ALL {
        let n = records.iter().filter(|r| r.split == split).count();
        println!("{}: {n} scenes", split.as_str());
    }
    println!("total: {} scenes", records.len());
    if let Some(rates) = &a.test_sf {
        let written = write_resampled_test(&a.out, rates)?;
        println!("resampled test variants: {written}");
    }
    Ok(())
}

fn load_split(root: &Path, records: &[ManifestRecord], split: Split) -> Result<Vec<Scene>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_scene(root, r, None))
        .collect()
}

fn train_one(cfg: &TrainConfig, train_set: &[Scene], val_set: &[Scene], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let ckpt = out.join("model.ckpt");
    let log_path = out.join("train_log.csv");
    let mut log: Vec<EpochLog> = Vec::new();
    let outcome = train(cfg, train_set, val_set, |entry, model, improved| {
        log.push(entry.clone());
        write_train_log(&log_path, &log)?;
        if improved {
            let mut snapshot = model.clone();
            snapshot.quantize_like_checkpoint();
            snapshot.save(&ckpt)?;
        }
        println!(
            "epoch {:>3}  lr {:.3e}  train {:>9.4}  val {:>9.4}{}",
            entry.epoch,
            entry.lr,
            entry.train_loss,
            entry.val_loss,
            if improved { "  *" } else { "" }
        );
        Ok(())
    })?;
    println!("best epoch {} -> {}", outcome.best_epoch, ckpt.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    let records = read_manifest(&a.data)?;
    let train_set = load_split(&a.data, &records, Split::Train)?;
    let val_set = load_split(&a.data, &records, Split::Val)?;
    match &a.seeds {
        Some(seeds) => {
            for &s in seeds {
                let mut c = cfg.clone();
                c.seed = s;
                c.model.seed = s;
                train_one(&c, &train_set, &val_set, &a.out.join(format!("seed_{s}")))?;
            }
            Ok(())
        }
        None => train_one(&cfg, &train_set, &val_set, &a.out),
    }
}

pub fn cmd_separate(a: &SeparateArgs) -> Result<()> {
    let model = SeparationModel::load(&a.checkpoint)?;
    let (x, fs) = load_wav(&a.input)?;
    let outputs = a.method.separate(&model, &x, fs)?;
    fs::create_dir_all(&a.out)?;
    for (i, y) in outputs.iter().enumerate() {
        let path = a.out.join(format!("output_{}.wav", i + 1));
        save_wav(&path, y, fs, WavFormat::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
}

/// Scenes of `split` at `fs`: stored resampled variants when present,
/// otherwise resampled (best quality) on the fly.
fn scenes_at(root: &Path, records: &[ManifestRecord], split: Split, fs: u32) -> Result<Vec<Scene>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            if r.fs == fs {
                return load_scene(root, r, None);
            }
            if scene_dir(root, split, &r.id).join(format!("mixture_{fs}.wav")).exists() {
                return load_scene(root, r, Some(fs));
            }
            resample_scene(&load_scene(root, r, None)?, fs, ResampleQuality::BEST)
        })
        .collect()
}

fn companion(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_{tag}.csv"))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.checkpoint.is_empty() {
        return invalid("at least one checkpoint is required");
    }
    let split = parse_split(&a.split)?;
    let records = read_manifest(&a.data)?;
    let models = a
        .checkpoint
        .iter()
        .map(|p| SeparationModel::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rates = match &a.sf {
        Some(r) => r.clone(),
        None => vec![models[0].config().fs_train],
    };
    let sets = rates
        .iter()
        .map(|&fs| {
            Ok(EvalSet {
                fs,
                scenes: scenes_at(&a.data, &records, split, fs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = EvalOptions {
        activity_floor: (a.activity_floor > 0.0).then_some(a.activity_floor),
        ..Default::default()
    };
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut errors = Vec::new();
    for model in &models {
        let report = evaluate(model, &sets, &a.methods, opts);
        rows.extend(report.rows);
        errors.extend(report.errors);
    }
    write_report(&a.report, &rows)?;
    let summary = summarize(&rows);
    write_summary(&companion(&a.report, "summary"), &summary)?;
    if !errors.is_empty() {
        write_errors(&companion(&a.report, "errors"), &errors)?;
        for e in &errors {
            eprintln!("{} @ {} Hz [{}]: {}", e.scene_id, e.fs, e.method, e.message);
        }
    }
    println!("{:>3} {:>6} {:<14} {:<13} {:>9} {:>8} {:>5}", "N", "fs", "method", "metric", "mean", "stderr", "count");
    for s in &summary {
        println!(
            "{:>3} {:>6} {:<14} {:<13} {:>9.3} {:>8.3} {:>5}",
            s.n_sources,
            s.fs,
            s.method.as_str(),
            s.metric.as_str(),
            s.mean,
            s.stderr,
            s.count
        );
    }
    println!("{} rows, {} errors -> {}", rows.len(), errors.len(), a.report.display());
    Ok(())
}

pub fn cmd_dump_kernels(a: &DumpArgs) -> Result<()> {
    let model = SeparationModel::load(&a.checkpoint)?;
    let kernels = model.encoder_kernels(a.sf)?;
    let meta = write_kernel_dump(&a.out, &kernels.kernels, kernels.geometry.stride)?;
    println!(
        "{} channels x {} taps (stride {}) at {} Hz -> {}",
        kernels.kernels.kernels.len(),
        meta.kernel_size,
        meta.stride,
        meta.fs,
        a.out.display()
    );
    Ok(())
}
