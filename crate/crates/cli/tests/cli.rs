//! End-to-end tests of the `sparseview` binary: each test drives the real
//! executable through a temp directory and asserts on exit codes, files, and
//! byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_sparseview");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

fn write_spec(dir: &Path, cameras: usize) -> PathBuf {
    let spec = serde_json::json!({
        "class_name": "ball",
        "primitives": [
            {"shape": "sphere", "center": [0.0, 0.0, 0.0], "size": 0.6, "albedo": [0.9, 0.3, 0.2]}
        ],
        "background": [0.05, 0.05, 0.25],
        "camera_ring": {
            "count": cameras,
            "radius": 3.0,
            "elevation_deg": 15.0,
            "image_size": [16, 16]
        }
    });
    let path = dir.join("ball.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

/// Overrides shrinking every component far enough for sub-second debug runs.
fn tiny_overrides() -> Vec<String> {
    [
        "pipeline.geometry.backbone.channels=[8,16,16]",
        "pipeline.geometry.backbone.depth_resolution=8",
        "pipeline.geometry.width=8",
        "pipeline.geometry.layers=1",
        "pipeline.geometry.heads=2",
        "pipeline.geometry.mlp_ratio=2",
        "pipeline.geometry.feature_dim=4",
        "pipeline.geometry.points_per_ray=2",
        "pipeline.geometry.depth_freqs=2",
        "pipeline.geometry.feature_resolution=[8,8]",
        "pipeline.denoiser.base_channels=4",
        "pipeline.denoiser.time_dim=8",
        "pipeline.denoiser.text_dim=8",
        "pipeline.denoiser.resolution=[8,8]",
        "pipeline.schedule.t_max=40",
        "pipeline.train.learning_rate=0.01",
        "pipeline.train.total_steps=12",
        "pretrain.steps=40",
        "inference.ddim_steps=8",
        "inference.perturb_steps=8",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect()
}

/// A synthesized dataset plus a short training run, shared across the
/// render/evaluate tests so the binary only trains once.
struct Trained {
    _dir: TempDir,
    dataset: PathBuf,
    checkpoint: PathBuf,
}

fn trained() -> &'static Trained {
    static FIXTURE: OnceLock<Trained> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let spec = write_spec(dir.path(), 4);
        let dataset = dir.path().join("data");
        let out = run(&[
            "synth",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dataset.to_str().unwrap(),
        ]);
        assert_success(&out);

        let train_out = dir.path().join("run");
        let mut args: Vec<String> = vec![
            "train".into(),
            "--dataset".into(),
            dataset.to_str().unwrap().into(),
            "--out".into(),
            train_out.to_str().unwrap().into(),
            "--steps".into(),
            "12".into(),
        ];
        args.extend(tiny_overrides());
        let out = Command::new(BIN).args(&args).output().expect("binary runs");
        assert_success(&out);
        let checkpoint = train_out.join("checkpoints").join("step000012");
        assert!(checkpoint.join("manifest.json").exists());
        Trained { _dir: dir, dataset, checkpoint }
    })
}

#[test]
fn synth_writes_posed_frames_and_provenance() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path(), 5);
    let dataset = dir.path().join("data");
    let out = run(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dataset.to_str().unwrap(),
        "--scene-id",
        "ball_0",
    ]);
    assert_success(&out);
    assert!(stdout(&out).contains("5 frames"));
    let scene = dataset.join("ball_0");
    assert!(scene.join("frames.json").exists());
    assert!(scene.join("scene.json").exists());
    assert!(scene.join("run.json").exists());
    let images: Vec<_> = std::fs::read_dir(scene.join("images")).unwrap().collect();
    assert_eq!(images.len(), 5);
}

#[test]
fn synth_scene_id_defaults_to_spec_stem() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path(), 3);
    let dataset = dir.path().join("data");
    let out = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", dataset.to_str().unwrap()]);
    assert_success(&out);
    assert!(dataset.join("ball").join("frames.json").exists());
}

#[test]
fn ingest_empty_root_reports_zero_scenes() {
    let dir = TempDir::new().unwrap();
    let out = run(&["ingest", "--root", dir.path().to_str().unwrap()]);
    assert_success(&out);
    assert!(stdout(&out).contains("0 scenes"));
}

#[test]
fn ingest_respects_dataset_env_var() {
    let fixture = trained();
    let out = Command::new(BIN)
        .args(["ingest"])
        .env("SPARSEVIEW_DATASET", &fixture.dataset)
        .output()
        .expect("binary runs");
    assert_success(&out);
    assert!(stdout(&out).contains("1 scenes"));
    assert!(fixture.dataset.join("index.json").exists());
}

#[test]
fn ingest_malformed_manifest_fails_with_location() {
    let dir = TempDir::new().unwrap();
    let scene = dir.path().join("broken");
    std::fs::create_dir_all(&scene).unwrap();
    std::fs::write(scene.join("frames.json"), b"[{\"image\": 3,,]").unwrap();
    let out = run(&["ingest", "--root", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("frames.json"), "stderr: {err}");
    assert!(err.contains("parse error"), "stderr: {err}");
}

#[test]
fn train_logs_every_step_and_resumes_the_counter() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("run");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--dataset".into(),
        fixture.dataset.to_str().unwrap().into(),
        "--out".into(),
        out_dir.to_str().unwrap().into(),
        "--steps".into(),
        "6".into(),
        "--checkpoint-every".into(),
        "3".into(),
    ];
    args.extend(tiny_overrides());
    let out = Command::new(BIN).args(&args).output().expect("binary runs");
    assert_success(&out);

    let log = std::fs::read_to_string(out_dir.join("loss_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "step,recon_loss,diffusion_loss,total_loss");
    assert_eq!(rows.len(), 7, "header plus one row per step:\n{log}");
    assert!(rows[1].starts_with("1,"));
    assert!(rows[6].starts_with("6,"));
    assert!(out_dir.join("checkpoints").join("step000003").exists());
    assert!(out_dir.join("checkpoints").join("step000006").exists());
    assert!(out_dir.join("run.json").exists());

    // Without --resume the command must refuse to touch the directory.
    let out = Command::new(BIN).args(&args).output().expect("binary runs");
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--resume"));

    // Resuming continues the counter; no config flags needed because the
    // checkpoint carries its own snapshot.
    let out = run(&[
        "train",
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "2",
        "--resume",
    ]);
    assert_success(&out);
    assert!(stdout(&out).contains("resuming"));
    let log = std::fs::read_to_string(out_dir.join("loss_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows.len(), 9, "6 + 2 rows after resume:\n{log}");
    assert!(rows[8].starts_with("8,"));
    assert!(out_dir.join("checkpoints").join("step000008").exists());
}

#[test]
fn render_guidance_off_equals_lambda_zero() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("render");
    let mut args: Vec<String> = vec![
        "render".into(),
        "--checkpoint".into(),
        fixture.checkpoint.to_str().unwrap().into(),
        "--dataset".into(),
        fixture.dataset.to_str().unwrap().into(),
        "--scene".into(),
        "ball".into(),
        "--target-frame".into(),
        "2".into(),
        "--contexts".into(),
        "0,1".into(),
        "--out".into(),
        out_dir.to_str().unwrap().into(),
        "--lambda".into(),
        "0".into(),
        "--compare-unguided".into(),
    ];
    args.extend(tiny_overrides());
    let out = Command::new(BIN).args(&args).output().expect("binary runs");
    assert_success(&out);
    let sample = std::fs::read(out_dir.join("sample.png")).unwrap();
    let unguided = std::fs::read(out_dir.join("unguided.png")).unwrap();
    assert_eq!(sample, unguided, "lambda 0 must reproduce the guidance-off sample");
    assert!(out_dir.join("coarse.png").exists());
    assert!(out_dir.join("run.json").exists());
}

#[test]
fn render_without_perturbation_returns_the_coarse_estimate() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("render");
    let mut args: Vec<String> = vec![
        "render".into(),
        "--checkpoint".into(),
        fixture.checkpoint.to_str().unwrap().into(),
        "--dataset".into(),
        fixture.dataset.to_str().unwrap().into(),
        "--scene".into(),
        "ball".into(),
        "--target-frame".into(),
        "3".into(),
        "--contexts".into(),
        "0,1".into(),
        "--out".into(),
        out_dir.to_str().unwrap().into(),
        "--perturb-steps".into(),
        "0".into(),
    ];
    args.extend(tiny_overrides());
    let out = Command::new(BIN).args(&args).output().expect("binary runs");
    assert_success(&out);
    let sample = std::fs::read(out_dir.join("sample.png")).unwrap();
    let coarse = std::fs::read(out_dir.join("coarse.png")).unwrap();
    assert_eq!(sample, coarse, "zero perturbation steps must skip denoising");
}

#[test]
fn render_unknown_scene_lists_available_ids() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "render",
        "--checkpoint",
        fixture.checkpoint.to_str().unwrap(),
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--scene",
        "nope",
        "--target-frame",
        "0",
        "--contexts",
        "1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("nope") && err.contains("ball"), "stderr: {err}");
}

#[test]
fn render_out_of_range_frame_fails() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "render",
        "--checkpoint",
        fixture.checkpoint.to_str().unwrap(),
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--scene",
        "ball",
        "--target-frame",
        "9",
        "--contexts",
        "0,1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("frames 0..4"), "stderr: {}", stderr(&out));
}

#[test]
fn evaluate_identity_hits_the_cap_and_is_deterministic() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "evaluate",
            "--dataset",
            fixture.dataset.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--model",
            "identity",
            "--objects",
            "1",
            "--poses",
            "4",
        ]);
        assert_success(&out);
        assert!(stdout(&out).contains("99.0000"), "stdout: {}", stdout(&out));
        reports.push(std::fs::read(out_dir.join("report.jsonl")).unwrap());
        assert!(out_dir.join("summary.txt").exists());
        assert!(out_dir.join("metrics.json").exists());
    }
    assert_eq!(reports[0], reports[1], "same protocol, same seed, same bytes");
}

#[test]
fn evaluate_coarse_uses_the_checkpoint() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("eval");
    let out = run(&[
        "evaluate",
        "--checkpoint",
        fixture.checkpoint.to_str().unwrap(),
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--model",
        "coarse",
        "--objects",
        "1",
        "--poses",
        "4",
    ]);
    assert_success(&out);
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    let psnr = metrics["overall_mean_psnr_db"].as_f64().unwrap();
    assert!(psnr.is_finite() && psnr < 99.0, "coarse PSNR should be finite and under the cap");
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("run.json")).unwrap()).unwrap();
    assert!(record["input_hashes"]["checkpoint"].is_string());
}

#[test]
fn evaluate_coarse_without_checkpoint_is_a_user_error() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "evaluate",
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
        "--model",
        "coarse",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--checkpoint"));
}

#[test]
fn evaluate_strict_fails_on_shortfalls() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "evaluate",
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
        "--model",
        "identity",
        "--strict",
    ]);
    assert_eq!(out.status.code(), Some(1), "default protocol asks for more than 4 poses");
    assert!(stderr(&out).contains("fell short"));
    // The same run without --strict succeeds and reports the shortfalls.
    let out = run(&[
        "evaluate",
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        dir.path().join("eval2").to_str().unwrap(),
        "--model",
        "identity",
    ]);
    assert_success(&out);
    assert!(stdout(&out).contains("shortfall"));
}

#[test]
fn unknown_set_key_lists_alternatives() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "ingest",
        "--root",
        dir.path().to_str().unwrap(),
        "--set",
        "inference.lamda=2.0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("lamda"), "stderr: {err}");
    assert!(err.contains("lambda"), "the valid-keys list should name the fix: {err}");
}

#[test]
fn seed_shorthand_reaches_every_stage() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("eval");
    let out = run(&[
        "evaluate",
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--model",
        "identity",
        "--objects",
        "1",
        "--poses",
        "4",
        "--seed",
        "123",
    ]);
    assert_success(&out);
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["pipeline"]["train"]["seed"], 123);
    assert_eq!(record["config"]["pretrain"]["seed"], 123);
    assert_eq!(record["config"]["inference"]["seed"], 123);
    assert_eq!(record["config"]["eval"]["seed"], 123);
}

#[test]
fn config_file_and_cli_overrides_compose() {
    let fixture = trained();
    let dir = TempDir::new().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&serde_json::json!({
            "eval": {"objects_per_category": 1, "poses_per_object": 4, "context_count": 2}
        }))
        .unwrap(),
    )
    .unwrap();
    let out_dir = dir.path().join("eval");
    let out = run(&[
        "evaluate",
        "--config",
        config_path.to_str().unwrap(),
        "--set",
        "eval.poses_per_object=3",
        "--dataset",
        fixture.dataset.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--model",
        "identity",
    ]);
    assert_success(&out);
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["eval"]["objects_per_category"], 1, "from the file");
    assert_eq!(record["config"]["eval"]["poses_per_object"], 3, "CLI override wins");
    assert!(record["input_hashes"]["config"].is_string());
}
