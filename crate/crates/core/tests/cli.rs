use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfi_separation::data::{load_wav, read_manifest, save_wav, WavFormat};
use sfi_separation::eval::{read_report, REPORT_HEADER};
use sfi_separation::filter_design::read_kernel_dump;
use sfi_separation::network::SeparationModel;
use tempfile::TempDir;

fn sfisep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfisep")).args(args).output().expect("spawn sfisep")
}

fn ok(args: &[&str]) -> String {
    let out = sfisep(args);
    assert!(
        out.status.success(),
        "sfisep {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_TRAIN: &str = r#"{
  "model": {"channels": 4, "bottleneck": 4, "expanded": 4, "blocks": 1, "outputs": 2,
            "fs_train": 8000, "kernel_size": 8, "stride": 4, "grid_size": 32, "seed": 0},
  "epochs": 11,
  "batch_size": 2,
  "schedule": {"initial": 0.001, "factor": 0.3333333333333333, "interval": 10}
}"#;

/// A small dataset and a model trained on it, shared by the tests below.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        ok(&[
            "synth", "--out", p(&data), "--seed", "5", "--counts", "1,1,0,0", "--val-counts", "1,1,0,0",
            "--test-counts", "1,1,0,0", "--duration", "0.1", "--test-sf", "4000",
        ]);
        let cfg = dir.path().join("train.json");
        fs::write(&cfg, TINY_TRAIN).unwrap();
        let run = dir.path().join("run");
        ok(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg)]);
        Fixture { _dir: dir, data, run }
    })
}

#[test]
fn synth_is_reproducible_and_honours_counts() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(&["synth", "--out", p(out), "--seed", "3", "--counts", "4,4,4,4", "--val-counts", "1,0,0,0",
            "--test-counts", "0,1,0,0", "--duration", "0.05"]);
        assert!(stdout.contains("train: 16 scenes"), "{stdout}");
    }
    let manifest = |root: &Path| fs::read_to_string(root.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    let records = read_manifest(&a).unwrap();
    assert_eq!(records.len(), 18);
}

#[test]
fn train_writes_checkpoint_and_log_with_schedule() {
    let f = fixture();
    assert!(f.run.join("model.ckpt").exists());
    assert!(f.run.join("config.json").exists());
    let mut reader = csv::Reader::from_path(f.run.join("train_log.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let lr_col = headers.iter().position(|h| h == "lr").unwrap();
    let lrs: Vec<f64> = reader.records().map(|r| r.unwrap()[lr_col].parse().unwrap()).collect();
    assert_eq!(lrs.len(), 11);
    assert!((lrs[0] - 1e-3).abs() < 1e-15);
    assert!((lrs[9] - 1e-3).abs() < 1e-15);
    assert!((lrs[10] - 1e-3 / 3.0).abs() < 1e-12);
    SeparationModel::load(&f.run.join("model.ckpt")).unwrap();
}

#[test]
fn separate_writes_one_file_per_output() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("mix.wav");
    let x: Vec<f64> = (0..1600).map(|n| 0.3 * (n as f64 * 0.2).sin()).collect();
    save_wav(&input, &x, 16000, WavFormat::Pcm16).unwrap();
    let out = dir.path().join("sep");
    ok(&["separate", "--checkpoint", p(&f.run.join("model.ckpt")), "--input", p(&input), "--out", p(&out)]);
    for k in 1..=2 {
        let (y, fs) = load_wav(&out.join(format!("output_{k}.wav"))).unwrap();
        assert_eq!((y.len(), fs), (1600, 16000));
    }
}

#[test]
fn eval_writes_report_and_summary() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.csv");
    let stdout = ok(&[
        "eval", "--checkpoint", p(&f.run.join("model.ckpt")), "--data", p(&f.data), "--sf", "8000,4000",
        "--report", p(&report),
    ]);
    assert!(stdout.contains("errors"), "{stdout}");
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER.join(","));
    let rows = read_report(&report).unwrap();
    // 2 test scenes × 2 rates × 3 methods, less scenes with no audible source
    assert!(!rows.is_empty() && rows.len() <= 12);
    let summary = fs::read_to_string(dir.path().join("report_summary.csv")).unwrap();
    assert!(summary.lines().count() >= 2);
}

#[test]
fn dump_kernels_round_trips() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("kernels.csv");
    let ckpt = f.run.join("model.ckpt");
    ok(&["dump-kernels", "--checkpoint", p(&ckpt), "--sf", "16000", "--out", p(&out)]);
    let (set, meta) = read_kernel_dump(&out).unwrap();
    assert_eq!((meta.fs, meta.kernel_size, meta.stride), (16000, 16, 8));
    let rows = fs::read_to_string(&out).unwrap().lines().count() - 1;
    assert_eq!(rows, 4 * 16);

    let model = SeparationModel::load(&ckpt).unwrap();
    let fresh = model.encoder_kernels(16000).unwrap();
    for (a, b) in set.kernels.iter().zip(&fresh.kernels.kernels) {
        for (x, y) in a.taps.iter().zip(&b.taps) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn exit_codes() {
    let f = fixture();
    let ckpt = f.run.join("model.ckpt");
    let dir = TempDir::new().unwrap();
    // 8 taps at 8 kHz has no integer counterpart at 11.025 kHz
    let out = sfisep(&["dump-kernels", "--checkpoint", p(&ckpt), "--sf", "11025", "--out", p(&dir.path().join("k.csv"))]);
    assert_eq!(out.status.code(), Some(4));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = sfisep(&["dump-kernels", "--checkpoint", p(&ckpt), "--sf", "8000", "--out", p(&blocker.join("k.csv"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = sfisep(&["separate", "--checkpoint", p(&dir.path().join("missing.ckpt")), "--input", "x.wav", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}
