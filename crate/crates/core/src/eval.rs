//! Evaluation of separation methods across sampling frequencies.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{invalid, Error, Result};
use crate::loss_metrics::{eval_scene, EvalOptions, MetricKind};
use crate::network::SeparationModel;
use crate::resampler::{baseline_separate, ResampleQuality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sfi")]
    Sfi,
    #[serde(rename = "resample-best")]
    ResampleBest,
    #[serde(rename = "resample-fast")]
    ResampleFast,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sfi, Method::ResampleBest, Method::ResampleFast];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sfi => "sfi",
            Method::ResampleBest => "resample-best",
            Method::ResampleFast => "resample-fast",
        }
    }

    /// Runs this method on a mixture sampled at `fs`.
    pub fn separate(&self, model: &SeparationModel, x: &[f64], fs: u32) -> Result<Vec<Vec<f64>>> {
        match self {
            Method::Sfi => model.separate(x, fs),
            Method::ResampleBest => baseline_separate(model, x, fs, ResampleQuality::BEST),
            Method::ResampleFast => baseline_separate(model, x, fs, ResampleQuality::FAST),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// One scene scored by one method at one sampling frequency (mean over its
/// scored sources). `n_sources` counts the sources audible at `fs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene_id: String,
    pub n_sources: usize,
    pub fs: u32,
    pub method: Method,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub scene_id: String,
    pub fs: u32,
    pub method: Method,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n_sources: usize,
    pub fs: u32,
    pub method: Method,
    pub metric: MetricKind,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub errors: Vec<ErrorRecord>,
}

/// Scenes of one sampling frequency.
pub struct EvalSet {
    pub fs: u32,
    pub scenes: Vec<Scene>,
}

enum Outcome {
    Row(ReportRow),
    Skipped,
    Failed(ErrorRecord),
}

fn score_one(model: &SeparationModel, scene: &Scene, method: Method, opts: EvalOptions) -> Outcome {
    let run = || -> Result<Option<ReportRow>> {
        let outputs = method.separate(model, &scene.mixture, scene.fs)?;
        let score = eval_scene(&outputs, &scene.sources, &scene.mixture, opts)?;
        Ok(score.mean().map(|value| ReportRow {
            scene_id: scene.id.clone(),
            n_sources: score.per_source.len(),
            fs: scene.fs,
            method,
            metric: score.metric,
            value,
        }))
    };
    match run() {
        Ok(Some(row)) => Outcome::Row(row),
        Ok(None) => Outcome::Skipped,
        Err(e) => Outcome::Failed(ErrorRecord {
            scene_id: scene.id.clone(),
            fs: scene.fs,
            method,
            message: e.to_string(),
        }),
    }
}

/// Scores every scene × method; failures become error records and the run
/// continues. Scenes are processed in parallel; rows come back sorted.
pub fn evaluate(model: &SeparationModel, sets: &[EvalSet], methods: &[Method], opts: EvalOptions) -> EvalReport {
    let jobs: Vec<(&Scene, Method)> = sets
        .iter()
        .flat_map(|set| set.scenes.iter())
        .flat_map(|s| methods.iter().map(move |&m| (s, m)))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    let outcomes: Vec<Outcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&(s, m)| score_one(model, s, m, opts)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut report = EvalReport::default();
    for o in outcomes {
        match o {
            Outcome::Row(r) => report.rows.push(r),
            Outcome::Failed(e) => report.errors.push(e),
            Outcome::Skipped => {}
        }
    }
    report
        .rows
        .sort_by(|a, b| (&a.scene_id, a.fs, a.method).cmp(&(&b.scene_id, b.fs, b.method)));
    report
        .errors
        .sort_by(|a, b| (&a.scene_id, a.fs, a.method).cmp(&(&b.scene_id, b.fs, b.method)));
    report
}

/// Mean and standard error per `(N, fs, method)`.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, u32, Method), (MetricKind, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.n_sources, r.fs, r.method))
            .or_insert_with(|| (r.metric, Vec::new()))
            .1
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((n_sources, fs, method), (metric, values))| {
            let count = values.len();
            let mean = values.iter().sum::<f64>() / count as f64;
            let stderr = if count > 1 {
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64;
                (var / count as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                n_sources,
                fs,
                method,
                metric,
                mean,
                stderr,
                count,
            }
        })
        .collect()
}

/// Mean of the rows matching `method` and `fs` (optionally one source count).
pub fn mean_of(rows: &[ReportRow], method: Method, fs: u32, n_sources: Option<usize>) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.fs == fs && n_sources.is_none_or(|n| r.n_sources == n))
        .map(|r| r.value)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const REPORT_HEADER: [&str; 6] = ["scene_id", "n_sources", "fs", "method", "metric", "value"];

/// Writes the per-scene report (with header even when empty).
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_HEADER)?;
        w.flush()?;
        return Ok(());
    }
    write_csv(path, rows)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != REPORT_HEADER {
        return invalid(format!("unexpected report header {header:?}"));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_errors(path: &Path, rows: &[ErrorRecord]) -> Result<()> {
    write_csv(path, rows)
}
