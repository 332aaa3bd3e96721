use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eeg2img(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eeg2img"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = eeg2img(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth → ingest → split, small enough to train in seconds.
fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let raw = dir.join("raw");
    let processed = dir.join("processed");
    ok(&[
        "synth", "--out", p(&raw), "--classes", "2", "--subjects", "1", "--channels", "4", "--timesteps", "16",
        "--per-class", "8", "--stimuli-per-class", "4", "--seed", "3",
    ]);
    ok(&["ingest", "--raw", p(&raw), "--out", p(&processed)]);
    let manifest = processed.join("manifest.json");
    ok(&["split", "--manifest", p(&manifest), "--train", "0.5", "--val", "0.25", "--test", "0.25", "--seed", "1"]);
    manifest
}

#[test]
fn synth_writes_the_requested_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("raw");
    ok(&["synth", "--classes", "4", "--channels", "16", "--timesteps", "64", "--per-class", "32", "--seed", "7", "--out", p(&out)]);
    let labels = fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 128);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("synth.run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config"]["per_class"], 32);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"classes": 3, "per_class": 2, "channels": 2, "timesteps": 8, "seed": 5}}"#).unwrap();
    let out = dir.path().join("raw");
    ok(&["synth", "--config", p(&cfg), "--out", p(&out), "--per-class", "4"]);
    let labels = fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 12);
}

#[test]
fn usage_errors_exit_one() {
    let out = eeg2img(&["synth", "--out", "x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    assert!(out.stdout.is_empty());
    // Seeds are mandatory for training.
    let out = eeg2img(&["train", "--model", "encoder", "--manifest", "m.json", "--out", "c", "--cache", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = eeg2img(&["ingest", "--raw", p(&dir.path().join("missing")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no recordings found"));
}

#[test]
fn evaluate_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let stimuli = dir.path().join("processed/stimuli");
    let results = dir.path().join("eval/results.csv");
    ok(&[
        "evaluate", "--generated", p(&stimuli), "--ground-truth", p(&stimuli), "--manifest", p(&manifest), "--out",
        p(&results), "--acc-n", "2", "--ssim-window", "7", "--condition", "identical",
    ]);
    let text = fs::read_to_string(&results).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("condition,acc,is_mean,is_std,fid,ssim,cs"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "identical");
    let fid: f64 = row[4].parse().unwrap();
    let ssim: f64 = row[5].parse().unwrap();
    assert!(fid.abs() < 1e-6, "fid {fid}");
    assert!((ssim - 1.0).abs() < 1e-9, "ssim {ssim}");
    assert!(dir.path().join("eval/results.csv.run.json").is_file());
}

#[test]
fn empty_plan_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    fs::write(&plan, r#"{"seed": 1, "dataset": "none.json", "output_dir": "out", "conditions": []}"#).unwrap();
    ok(&["ablate", "--plan", p(&plan)]);
    assert_eq!(fs::read_to_string(dir.path().join("out/results.csv")).unwrap(), "condition,acc,is_mean,is_std,fid,ssim,cs\n");
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let plan = dir.path().join("plan.json");
    fs::write(
        &plan,
        format!(
            r#"{{"seed": 1, "dataset": "{}", "output_dir": "out", "conditions": [
                {{"name": "both", "image_encoder": "nope-image.ckpt", "text_encoder": "nope-text.ckpt", "backend": "nope-toy.ckpt"}}]}}"#,
            p(&manifest)
        ),
    )
    .unwrap();
    let out = eeg2img(&["ablate", "--plan", p(&plan)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope-image.ckpt") && err.contains("nope-toy.ckpt"), "{err}");
}

fn files(dir: &Path, ext: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn one_condition_ablation_matches_manual_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = small_dataset(d);
    ok(&["cache-targets", "--manifest", p(&manifest), "--space", "image", "--dim", "8", "--extractor-seed", "1", "--out", p(&d.join("image.cache"))]);
    ok(&[
        "cache-targets", "--manifest", p(&manifest), "--space", "text", "--tokens", "2", "--dim", "8", "--extractor-seed", "2",
        "--out", p(&d.join("text.cache")),
    ]);
    for (space, cache) in [("image", "image.cache"), ("text", "text.cache")] {
        ok(&[
            "train", "--model", "encoder", "--manifest", p(&manifest), "--cache", p(&d.join(cache)), "--seed", "4",
            "--epochs", "3", "--layers", "1", "--hidden", "8", "--head-hidden", "8", "--out",
            p(&d.join(format!("{space}.ckpt"))),
        ]);
    }
    ok(&[
        "train", "--model", "toy-backend", "--manifest", p(&manifest), "--image-cache", p(&d.join("image.cache")),
        "--text-cache", p(&d.join("text.cache")), "--seed", "5", "--steps", "20", "--batch-size", "4", "--out",
        p(&d.join("toy.ckpt")),
    ]);
    assert!(d.join("image.ckpt.run.json").is_file() && d.join("toy.ckpt.history.csv").is_file());

    let manual = d.join("manual");
    ok(&[
        "generate", "--manifest", p(&manifest), "--image-encoder", p(&d.join("image.ckpt")), "--text-encoder",
        p(&d.join("text.ckpt")), "--backend", p(&d.join("toy.ckpt")), "--seed", "9", "--steps", "5", "--drop-text",
        "--samples-per-recording", "2", "--out", p(&manual),
    ]);
    ok(&[
        "evaluate", "--generated", p(&manual), "--manifest", p(&manifest), "--condition", "image-only", "--seed", "9",
        "--acc-n", "2", "--ssim-window", "7", "--out", p(&d.join("manual.csv")),
    ]);

    let plan = d.join("plan.json");
    fs::write(
        &plan,
        r#"{"seed": 9, "dataset": "processed/manifest.json", "output_dir": "ablation", "samples_per_recording": 2,
            "conditions": [{"name": "image-only", "image_encoder": "image.ckpt", "text_encoder": "text.ckpt",
            "backend": "toy.ckpt", "inference_steps": 5, "drop_text": true, "metrics": {"acc_n": 2, "ssim_window": 7}}]}"#,
    )
    .unwrap();
    ok(&["ablate", "--plan", p(&plan)]);

    let ablated = d.join("ablation/image-only");
    let pngs = files(&manual, "png");
    assert!(!pngs.is_empty());
    assert_eq!(pngs, files(&ablated, "png"));
    let sidecars: Vec<_> = files(&manual, "json").into_iter().filter(|(n, _)| !n.ends_with(".run.json")).collect();
    assert_eq!(sidecars, files(&ablated, "json").into_iter().filter(|(n, _)| n != "metrics.json").collect::<Vec<_>>());
    assert_eq!(fs::read(d.join("manual.csv")).unwrap(), fs::read(d.join("ablation/results.csv")).unwrap());
    assert!(d.join("ablation/ablate.run.json").is_file());

    let report = d.join("report");
    ok(&["report", "--results", p(&d.join("ablation/results.csv")), "--out", p(&report)]);
    assert!(fs::read_to_string(report.join("table.txt")).unwrap().contains("image-only"));
    assert!(report.join("fid.png").is_file());
}

#[test]
fn report_rejects_non_numeric_cells() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, "condition,acc,is_mean,is_std,fid,ssim,cs\nx,0.5,abc,,1,0.2,0.3\n").unwrap();
    let out = eeg2img(&["report", "--results", p(&csv), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("is_mean") && err.contains("line 2"), "{err}");
}
