use std::path::Path;
use std::process::{Command, Output};

use robustsr::image::ImagePatch;

fn robustsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustsr"))
        .current_dir(dir)
        .env_remove("ROBUSTSR_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = robustsr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--count", "24"]);
    ok(
        dir,
        &[
            "corrupt",
            "--data",
            "data",
            "--manifest",
            "data/manifest.txt",
            "--fraction",
            "0.25",
            "--set",
            "train_count=16",
            "--set",
            "test_count=8",
        ],
    );
}

#[test]
fn evaluate_identity_and_row_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data", "--count", "5"]);
    let json = ok(
        dir,
        &[
            "evaluate", "--sr", "data/hr", "--hr", "data/hr", "--out", "eval", "--json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["summary"]["mean"]["rrmse"], 0.0);
    assert_eq!(v["summary"]["mean"]["ms_mssim"], 1.0);
    assert_eq!(v["summary"]["mean"]["qilv"], 1.0);
    let csv = std::fs::read_to_string(dir.join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(dir.join("eval/resolved_config.toml").is_file());
}

#[test]
fn evaluate_names_missing_sr_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data", "--count", "4"]);
    std::fs::create_dir(dir.join("sr")).unwrap();
    for id in ["t0000", "t0001", "t0003"] {
        std::fs::copy(dir.join(format!("data/hr/{id}.png")), dir.join(format!("sr/{id}.png"))).unwrap();
    }
    let out = robustsr(dir, &["evaluate", "--sr", "sr", "--hr", "data/hr", "--out", "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t0002"));
    assert!(!dir.join("eval").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data", "--count", "2"]);
    let out = robustsr(dir, &["synth", "--out", "data", "--count", "2"]);
    assert_eq!(out.status.code(), Some(2), "existing output without --force");

    std::fs::write(dir.join("bad.toml"), "[loss]\nlamda_S = 1.0\n").unwrap();
    let out = robustsr(dir, &["--config", "bad.toml", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_S"));

    let out = robustsr(dir, &["synth", "--out", "x", "--set", "loss.q=\"high\""]);
    assert_eq!(out.status.code(), Some(2));

    let out = robustsr(dir, &["evaluate", "--sr", "data/hr", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "clap usage error");
}

#[test]
fn precedence_cli_over_file_over_default() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.toml"), "[loss]\nq = 0.8\n[schedule]\niterations = 7\n").unwrap();
    ok(
        dir,
        &[
            "--config", "c.toml", "--set", "q=0.5", "synth", "--out", "data", "--count", "1",
        ],
    );
    let text = std::fs::read_to_string(dir.join("data/resolved_config.toml")).unwrap();
    let cfg: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(cfg["loss"]["q"].as_float(), Some(0.5));
    assert_eq!(cfg["schedule"]["iterations"].as_integer(), Some(7));
    assert!(text.contains("# loss.q: cli"));
    assert!(text.contains("# schedule.iterations: file"));
}

#[test]
fn config_path_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("env.toml"), "[data]\nhr_size = 16\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_robustsr"))
        .current_dir(dir)
        .env("ROBUSTSR_CONFIG", "env.toml")
        .args(["synth", "--out", "data", "--count", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let hr = ImagePatch::load_png(&dir.join("data/hr/t0000.png")).unwrap();
    assert_eq!(hr.shape(), (16, 16, 3));
}

#[test]
fn force_replaces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data", "--count", "3"]);
    ok(dir, &["--force", "synth", "--out", "data", "--count", "2"]);
    assert_eq!(std::fs::read_dir(dir.join("data/hr")).unwrap().count(), 2);
    let leftovers: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(".robustsr-"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn extract_cuts_grid_patches() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::create_dir(dir.join("src")).unwrap();
    let data = (0..48 * 40 * 3).map(|i| (i % 97) as f64 / 96.0).collect();
    ImagePatch::from_planar(40, 48, 3, data)
        .unwrap()
        .save_png(&dir.join("src/slide.png"))
        .unwrap();
    ok(
        dir,
        &[
            "extract", "--src", "src", "--out", "patches", "--patch", "16", "--stride", "16", "--limit", "5",
        ],
    );
    let ids: Vec<String> = robustsr::data::list_patch_ids(&dir.join("patches")).unwrap();
    assert_eq!(
        ids,
        ["slide_0000", "slide_0001", "slide_0002", "slide_0003", "slide_0004"]
    );
    let lr = ImagePatch::load_png(&dir.join("patches/lr/slide_0000.png")).unwrap();
    assert_eq!(lr.shape(), (4, 4, 3));
}

#[test]
fn pipeline_super_resolves_tiles_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let fast = [
        "--set",
        "iterations=3",
        "--set",
        "ae_iterations=3",
        "--set",
        "batch_size=4",
    ];
    let mut args = vec!["pretrain-ae", "--manifest", "data/manifest.txt", "--out", "ae.ckpt"];
    args.extend(fast);
    ok(dir, &args);
    let mut args = vec![
        "train",
        "--manifest",
        "data/manifest.txt",
        "--encoder",
        "ae.ckpt",
        "--out",
        "run",
    ];
    args.extend(fast);
    ok(dir, &args);

    // 16x16 LR image = 2x2 tiles of the 8x8 desk generator input
    let data = (0..16 * 16 * 3).map(|i| (i % 61) as f64 / 60.0).collect();
    ImagePatch::from_planar(16, 16, 3, data)
        .unwrap()
        .save_png(&dir.join("big.png"))
        .unwrap();
    for out in ["a.png", "b.png"] {
        ok(
            dir,
            &[
                "super-resolve",
                "--input",
                "big.png",
                "--checkpoint",
                "run/generator.ckpt",
                "--out",
                out,
            ],
        );
    }
    let a = std::fs::read(dir.join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b.png")).unwrap());
    assert_eq!(ImagePatch::load_png(&dir.join("a.png")).unwrap().shape(), (64, 64, 3));
    assert!(dir.join("a.png.resolved_config.toml").is_file());

    let out = robustsr(
        dir,
        &[
            "--set",
            "gen_base_channels=8",
            "super-resolve",
            "--input",
            "big.png",
            "--checkpoint",
            "run/generator.ckpt",
            "--out",
            "c.png",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("topology"));

    ok(
        dir,
        &[
            "super-resolve",
            "--input",
            "data/lr",
            "--checkpoint",
            "run/generator.ckpt",
            "--out",
            "sr",
        ],
    );
    let json = ok(
        dir,
        &[
            "evaluate",
            "--sr",
            "sr",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "eval",
            "--json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["summary"]["pairs"], 8);
    // the run's own test report scores the same SR images before PNG rounding
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/report.json")).unwrap()).unwrap();
    let (a, b) = (
        run["mean"]["rrmse"].as_f64().unwrap(),
        v["summary"]["mean"]["rrmse"].as_f64().unwrap(),
    );
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
}

#[test]
fn train_without_encoder_needs_zero_manifold_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let out = robustsr(
        dir,
        &[
            "train",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "run",
            "--set",
            "iterations=2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encoder"));
    assert!(!dir.join("run").exists());
    ok(
        dir,
        &[
            "train",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "run",
            "--set",
            "iterations=2",
            "--set",
            "lambda_M=0",
        ],
    );
}
