//! Synthetic sound scenes, WAV I/O and minibatch augmentation.
//!
//! A scene holds 1–4 band-limited events, each confined to its own octave
//! band (edges relative to the sampling frequency), so a small model can
//! learn to separate them. Source 1 spans the whole clip as a background.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::resampler::{resample, ResampleQuality};

pub const MAX_SOURCES: usize = 4;
/// Band edges as fractions of the sampling frequency.
pub const BAND_EDGES: [f64; MAX_SOURCES + 1] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 0.45];
/// Peak amplitude of every source before mixing; four sources never clip.
pub const SOURCE_PEAK: f64 = 0.25;
const RAMP_SECONDS: f64 = 0.01;
const NOISE_PARTIALS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub sources: Vec<Vec<f64>>,
    pub mixture: Vec<f64>,
    pub fs: u32,
    pub seed: u64,
    /// Octave band index of each source, when known.
    pub bands: Option<Vec<usize>>,
}

impl Scene {
    /// Builds a scene whose mixture is the sum of `sources`.
    pub fn from_sources(id: String, sources: Vec<Vec<f64>>, fs: u32, seed: u64, bands: Option<Vec<usize>>) -> Result<Self> {
        if sources.is_empty() || sources.len() > MAX_SOURCES {
            return invalid(format!("a scene holds 1..={MAX_SOURCES} sources, got {}", sources.len()));
        }
        let len = sources[0].len();
        if sources.iter().any(|s| s.len() != len) {
            return invalid("scene sources must share one length");
        }
        if bands.as_ref().is_some_and(|b| b.len() != sources.len()) {
            return invalid("one band label per source");
        }
        let mixture = mix(&sources);
        Ok(Self {
            id,
            sources,
            mixture,
            fs,
            seed,
            bands,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

/// Elementwise sum, accumulated in source order.
pub fn mix(sources: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; sources.first().map_or(0, Vec::len)];
    for s in sources {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Tone,
    Noise,
    Chirp,
}

/// Frequency range `[lo, hi)` in Hz of octave band `band` at `fs`.
pub fn band_range(band: usize, fs: u32) -> (f64, f64) {
    (BAND_EDGES[band] * fs as f64, BAND_EDGES[band + 1] * fs as f64)
}

fn raised_cosine_envelope(len: usize, onset: usize, active: usize, ramp: usize) -> Vec<f64> {
    let mut env = vec![0.0; len];
    let ramp = ramp.min(active / 2).max(1);
    for i in 0..active {
        let edge = i.min(active - 1 - i);
        env[onset + i] = if edge < ramp {
            0.5 - 0.5 * (PI * (edge as f64 + 0.5) / ramp as f64).cos()
        } else {
            1.0
        };
    }
    env
}

fn synthesize_source(rng: &mut ChaCha8Rng, kind: SourceKind, band: usize, fs: u32, len: usize, background: bool) -> Vec<f64> {
    let (lo, hi) = band_range(band, fs);
    let fs_f = fs as f64;
    let mut wave = vec![0.0; len];
    match kind {
        SourceKind::Tone => {
            let f0 = rng.gen_range(lo..hi);
            let mut k = 1.0;
            while f0 * k < hi {
                let phase = rng.gen_range(0.0..2.0 * PI);
                let (freq, amp) = (f0 * k, 1.0 / k);
                for (n, w) in wave.iter_mut().enumerate() {
                    *w += amp * (2.0 * PI * freq * n as f64 / fs_f + phase).sin();
                }
                k += 1.0;
            }
        }
        SourceKind::Noise => {
            for _ in 0..NOISE_PARTIALS {
                let freq = rng.gen_range(lo..hi);
                let phase = rng.gen_range(0.0..2.0 * PI);
                for (n, w) in wave.iter_mut().enumerate() {
                    *w += (2.0 * PI * freq * n as f64 / fs_f + phase).sin();
                }
            }
        }
        SourceKind::Chirp => {
            let (mut fa, mut fb) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut fa, &mut fb);
            }
            let phase = rng.gen_range(0.0..2.0 * PI);
            let dur = len as f64 / fs_f;
            for (n, w) in wave.iter_mut().enumerate() {
                let t = n as f64 / fs_f;
                *w = (2.0 * PI * (fa * t + (fb - fa) * t * t / (2.0 * dur)) + phase).sin();
            }
        }
    }
    let (onset, active) = if background {
        (0, len)
    } else {
        let active = rng.gen_range(len * 3 / 10..=len * 8 / 10).max(1);
        (rng.gen_range(0..=len - active), active)
    };
    let ramp = (RAMP_SECONDS * fs_f).round() as usize;
    let env = raised_cosine_envelope(len, onset, active, ramp);
    wave.iter_mut().zip(&env).for_each(|(w, e)| *w *= e);
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        wave.iter_mut().for_each(|w| *w *= SOURCE_PEAK / peak);
    }
    wave
}

/// Deterministically synthesizes an `n`-source scene of `duration` seconds.
pub fn synthesize_scene(seed: u64, n: usize, fs: u32, duration: f64) -> Result<Scene> {
    if !(1..=MAX_SOURCES).contains(&n) {
        return invalid(format!("number of sources must be in 1..={MAX_SOURCES}, got {n}"));
    }
    if !(duration > 0.0 && duration.is_finite()) || fs == 0 {
        return invalid("duration and sampling frequency must be positive");
    }
    let len = (duration * fs as f64).round() as usize;
    if len < 16 {
        return invalid("scene shorter than 16 samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bands: Vec<usize> = (0..MAX_SOURCES).collect();
    bands.shuffle(&mut rng);
    bands.truncate(n);
    let kinds = [SourceKind::Tone, SourceKind::Noise, SourceKind::Chirp];
    let sources = bands
        .iter()
        .enumerate()
        .map(|(i, &band)| {
            let kind = kinds[rng.gen_range(0..kinds.len())];
            synthesize_source(&mut rng, kind, band, fs, len, i == 0)
        })
        .collect();
    Scene::from_sources(format!("scene_{seed:016x}"), sources, fs, seed, Some(bands))
}

/// Gains (dB) drawn for every `(item, source)` slot by [`augment_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentLog {
    pub gains_db: Vec<Vec<f64>>,
}

/// Shuffles sources between batch items and applies random gains.
///
/// When every scene carries band labels, sources only move between slots of
/// the same band, so each item keeps band-disjoint sources; otherwise all
/// source slots are permuted freely. Each source is then scaled by a gain
/// uniform in `±max_gain_db`, and mixtures are recomputed.
pub fn augment_batch(batch: &[Scene], seed: u64, max_gain_db: f64) -> Result<(Vec<Scene>, AugmentLog)> {
    let Some(first) = batch.first() else {
        return invalid("cannot augment an empty batch");
    };
    if batch.iter().any(|s| s.fs != first.fs) {
        return invalid("batch mixes sampling frequencies");
    }
    if batch.iter().any(|s| s.len() != first.len()) {
        return invalid("batch mixes scene lengths");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.n_sources()).map(move |j| (i, j)))
        .collect();
    let mut out: Vec<Vec<Vec<f64>>> = batch.iter().map(|s| s.sources.clone()).collect();
    let banded = batch.iter().all(|s| s.bands.is_some());
    let groups: Vec<Vec<(usize, usize)>> = if banded {
        (0..MAX_SOURCES)
            .map(|band| {
                slots
                    .iter()
                    .copied()
                    .filter(|&(i, j)| batch[i].bands.as_ref().expect("banded")[j] == band)
                    .collect()
            })
            .collect()
    } else {
        vec![slots]
    };
    for group in groups {
        let mut order = group.clone();
        order.shuffle(&mut rng);
        for (&(di, dj), &(si, sj)) in group.iter().zip(&order) {
            out[di][dj] = batch[si].sources[sj].clone();
        }
    }
    let mut gains_db = Vec::with_capacity(batch.len());
    let mut scenes = Vec::with_capacity(batch.len());
    for (scene, mut sources) in batch.iter().zip(out) {
        let gains: Vec<f64> = sources
            .iter()
            .map(|_| if max_gain_db > 0.0 { rng.gen_range(-max_gain_db..=max_gain_db) } else { 0.0 })
            .collect();
        for (s, g) in sources.iter_mut().zip(&gains) {
            let factor = 10f64.powf(g / 20.0);
            s.iter_mut().for_each(|v| *v *= factor);
        }
        gains_db.push(gains);
        scenes.push(Scene::from_sources(
            scene.id.clone(),
            sources,
            scene.fs,
            scene.seed,
            scene.bands.clone(),
        )?);
    }
    Ok((scenes, AugmentLog { gains_db }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::Format {
            field: "header",
            detail: msg.to_string(),
        },
        hound::Error::Unsupported => Error::Format {
            field: "codec",
            detail: "unsupported WAV encoding".into(),
        },
        other => Error::Format {
            field: "sample_format",
            detail: other.to_string(),
        },
    }
}

/// Reads a mono PCM16 or float32 WAV file as `(samples, fs)`.
pub fn load_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format {
            field: "channels",
            detail: format!("expected mono, found {} channels", spec.channels),
        });
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (fmt, bits) => {
            return Err(Error::Format {
                field: "sample_format",
                detail: format!("{bits}-bit {fmt:?} samples are not supported"),
            })
        }
    }
    .map_err(wav_error)?;
    Ok((samples, spec.sample_rate))
}

/// Writes a mono WAV file; PCM16 samples are `round(x·32768)` clipped to range.
pub fn save_wav(path: &Path, x: &[f64], fs: u32, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: fs,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_error)?;
    for &v in x {
        match format {
            WavFormat::Pcm16 => writer
                .write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                .map_err(wav_error)?,
            WavFormat::Float32 => writer.write_sample(v as f32).map_err(wav_error)?,
        }
    }
    writer.finalize().map_err(wav_error)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Scene counts per number of sources (index 0 ↔ one source) for each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: [usize; MAX_SOURCES],
    pub val: [usize; MAX_SOURCES],
    pub test: [usize; MAX_SOURCES],
    pub fs: u32,
    pub duration: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train: [128; MAX_SOURCES],
            val: [16; MAX_SOURCES],
            test: [32; MAX_SOURCES],
            fs: 8000,
            duration: 1.0,
            seed: 0,
        }
    }
}

/// One record of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub n_sources: usize,
    pub fs: u32,
    pub duration: f64,
    pub seed: u64,
    pub bands: Vec<usize>,
}

impl DatasetSpec {
    pub fn counts(&self, split: Split) -> &[usize; MAX_SOURCES] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.counts(s).iter().sum::<usize>()).sum()
    }

    /// Manifest records of every scene, in split order, deterministic in `seed`.
    pub fn plan(&self) -> Result<Vec<ManifestRecord>> {
        if self.fs == 0 || !(self.duration > 0.0 && self.duration.is_finite()) {
            return invalid("dataset needs a positive sampling frequency and duration");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut records = Vec::with_capacity(self.total());
        for split in Split::ALL {
            let mut ns: Vec<usize> = self
                .counts(split)
                .iter()
                .enumerate()
                .flat_map(|(i, &c)| std::iter::repeat_n(i + 1, c))
                .collect();
            ns.shuffle(&mut rng);
            for (idx, n) in ns.into_iter().enumerate() {
                let seed = rng.gen::<u64>();
                records.push(ManifestRecord {
                    id: format!("{}_{idx:05}", split.as_str()),
                    split,
                    n_sources: n,
                    fs: self.fs,
                    duration: self.duration,
                    seed,
                    bands: Vec::new(),
                });
            }
        }
        Ok(records)
    }

    /// Synthesizes all scenes of `split` in memory.
    pub fn generate(&self, split: Split) -> Result<Vec<Scene>> {
        self.plan()?
            .into_iter()
            .filter(|r| r.split == split)
            .map(|r| scene_for(&r))
            .collect()
    }
}

fn scene_for(record: &ManifestRecord) -> Result<Scene> {
    let mut scene = synthesize_scene(record.seed, record.n_sources, record.fs, record.duration)?;
    scene.id = record.id.clone();
    Ok(scene)
}

pub fn scene_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.as_str()).join(id)
}

fn suffix(fs: Option<u32>) -> String {
    fs.map(|f| format!("_{f}")).unwrap_or_default()
}

fn write_scene_files(dir: &Path, scene: &Scene, fs_suffix: Option<u32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sfx = suffix(fs_suffix);
    save_wav(&dir.join(format!("mixture{sfx}.wav")), &scene.mixture, scene.fs, WavFormat::Float32)?;
    for (i, s) in scene.sources.iter().enumerate() {
        save_wav(&dir.join(format!("source_{}{sfx}.wav", i + 1)), s, scene.fs, WavFormat::Float32)?;
    }
    Ok(())
}

/// Writes every scene and `manifest.jsonl` under `root`.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(root)?;
    let mut records = spec.plan()?;
    for record in &mut records {
        let scene = scene_for(record)?;
        record.bands = scene.bands.clone().unwrap_or_default();
        write_scene_files(&scene_dir(root, record.split, &record.id), &scene, None)?;
    }
    let mut w = BufWriter::new(File::create(root.join("manifest.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(root.join("manifest.jsonl"))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads a scene from disk, optionally the variant resampled to `fs`.
///
/// The mixture is recomputed from the stored sources so that it equals their
/// sum exactly; the stored mixture file must agree to float32 precision.
pub fn load_scene(root: &Path, record: &ManifestRecord, fs: Option<u32>) -> Result<Scene> {
    let dir = scene_dir(root, record.split, &record.id);
    let sfx = suffix(fs);
    let mut sources = Vec::with_capacity(record.n_sources);
    let mut rate = None;
    for i in 1..=record.n_sources {
        let (s, f) = load_wav(&dir.join(format!("source_{i}{sfx}.wav")))?;
        if rate.is_some_and(|r| r != f) {
            return Err(Error::Format {
                field: "sample_rate",
                detail: format!("sources of {} disagree on the sampling frequency", record.id),
            });
        }
        rate = Some(f);
        sources.push(s);
    }
    let fs_read = rate.unwrap_or(record.fs);
    let bands = (record.bands.len() == record.n_sources).then(|| record.bands.clone());
    let scene = Scene::from_sources(record.id.clone(), sources, fs_read, record.seed, bands)?;
    let (stored, _) = load_wav(&dir.join(format!("mixture{sfx}.wav")))?;
    let consistent = stored.len() == scene.len()
        && stored.iter().zip(&scene.mixture).all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + b.abs()));
    if !consistent {
        return Err(Error::Format {
            field: "mixture",
            detail: format!("{} mixture does not match the sum of its sources", record.id),
        });
    }
    Ok(scene)
}

/// Resamples every source of `scene` to `fs` and rebuilds the mixture.
pub fn resample_scene(scene: &Scene, fs: u32, q: ResampleQuality) -> Result<Scene> {
    let sources = scene
        .sources
        .iter()
        .map(|s| resample(s, scene.fs, fs, q))
        .collect::<Result<Vec<_>>>()?;
    Scene::from_sources(scene.id.clone(), sources, fs, scene.seed, scene.bands.clone())
}

/// Writes the test split resampled (best quality) to each rate in `rates`,
/// as `mixture_<fs>.wav` / `source_<k>_<fs>.wav` next to the originals.
pub fn write_resampled_test(root: &Path, rates: &[u32]) -> Result<usize> {
    let records = read_manifest(root)?;
    let mut written = 0;
    for record in records.iter().filter(|r| r.split == Split::Test) {
        let scene = load_scene(root, record, None)?;
        for &fs in rates {
            let variant = resample_scene(&scene, fs, ResampleQuality::BEST)?;
            write_scene_files(&scene_dir(root, record.split, &record.id), &variant, Some(fs))?;
            written += 1;
        }
    }
    Ok(written)
}

/// SHA-256 over the ids and waveforms of `scenes`, as lowercase hex.
pub fn fingerprint(scenes: &[Scene]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        h.update(s.id.as_bytes());
        h.update(s.fs.to_le_bytes());
        for src in &s.sources {
            for v in src {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
