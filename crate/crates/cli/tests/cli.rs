//! Command-line contract: exit codes, error messages and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pose_forge::regressor::{load_checkpoint, MlpParams, TrainConfig};
use pose_forge::synth::SceneConfig;
use pose_forge_cli::config::SyntheticScenes;
use pose_forge_cli::{cmd_pipeline, Manifest, PipelineKind, RunConfig, SceneSource, FAILURES_HEADER};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pose-forge")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: PathBuf) -> String {
    p.display().to_string()
}

#[test]
fn type_error_exits_2_with_json_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"ransac": {"inlier_threshold_px": "wide"}}"#);
    let o = bin(&["pipeline", "--config", &cfg, "--out", &path_str(dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("\"/ransac/inlier_threshold_px\""), "{}", stderr(&o));
}

#[test]
fn occlusion_below_six_keypoints_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"scenes": {"synthetic": {"config": {"n_keypoints": 8, "occlusion_rate": 0.5}}}}"#);
    let o = bin(&["synth", "--config", &cfg, "--out", &path_str(dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/scenes/synthetic/config"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin(&["synth"]).status.code(), Some(2), "missing --out");
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["report"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pose-forge"))
        .args(["synth", "--out", &path_str(dir.path().join("o"))])
        .env("POSE_FORGE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let cfg = write(dir.path(), "c.json", r#"{"pipeline": "clip"}"#);
    let o = bin(&["pipeline", "--config", &cfg, "--out", &path_str(dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/checkpoint"));
}

#[test]
fn synth_writes_manifest_with_n_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"scenes": {"synthetic": {"count": 10}}, "output": "out"}"#);
    let o = bin(&["synth", "--config", &cfg, "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.scenes.len(), 10);
    assert_eq!(m.base_seed, 7);
    for s in &m.scenes {
        for f in &s.files {
            assert!(dir.path().join("out").join(&s.dir).join(f).is_file());
        }
    }
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"dataset": {"n_samples": 8, "feature_dim": 12}, "train": {"epochs": 0, "seed": 3}}"#);
    let out = dir.path().join("o");
    let o = bin(&["train", "--config", &cfg, "--out", &path_str(out.clone())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let loaded = load_checkpoint(&out.join("checkpoint")).unwrap();
    let init = MlpParams::init(12, 3, TrainConfig::default().translation_scale_mm);
    for (a, b) in loaded.tensors().iter().zip(init.tensors()) {
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| *x == (*y as f32) as f64));
    }
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "header plus the epoch-0 row");
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("epochs 0: loss "));
}

#[test]
fn report_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.csv", "method,scene_id,add_mm,adds_mm,rot_err_deg,trans_err_mm\nm,s0,1,1,1,1\nm,s1,1,x,1,1\n");
    let o = bin(&["report", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("{bad}:3:")), "{}", stderr(&o));

    let empty = write(dir.path(), "empty.csv", "");
    let o = bin(&["report", &empty]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty.csv"));
}

#[test]
fn report_merges_two_csvs_into_two_columns() {
    let dir = tempfile::tempdir().unwrap();
    let header = "method,scene_id,add_mm,adds_mm,rot_err_deg,trans_err_mm\n";
    let a = write(dir.path(), "a.csv", &format!("{header}alpha,s0,10,5,1,2\nalpha,s1,20,5,1,2\n"));
    let b = write(dir.path(), "b.csv", &format!("{header}beta,s0,1,1,1,1\n"));
    let o = bin(&["report", &a, &b, "--out", &path_str(dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(0));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "Metric                  alpha  beta");
    assert_eq!(lines[2], "ADD Distance (mm)       15.00  1.00");
    assert_eq!(fs::read_to_string(dir.path().join("r/report.txt")).unwrap(), table);
}

#[test]
fn corrupt_scene_is_recorded_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"scenes": {"synthetic": {"count": 4}}}"#);
    let synth = dir.path().join("synth");
    assert_eq!(bin(&["synth", "--config", &cfg, "--out", &path_str(synth.clone())]).status.code(), Some(0));
    fs::remove_file(synth.join("scenes/scene_0002/cloud.xyz")).unwrap();

    let pcfg = write(
        dir.path(),
        "p.json",
        &format!(r#"{{"scenes": {{"dir": "{}"}}, "ransac": {{"inlier_threshold_px": 4.0}}}}"#, synth.display()),
    );
    let out = dir.path().join("p");
    let o = bin(&["pipeline", "--config", &pcfg, "--out", &path_str(out.clone())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let failures = fs::read_to_string(out.join("failures.csv")).unwrap();
    let rows: Vec<&str> = failures.lines().collect();
    assert_eq!(rows[0], FAILURES_HEADER);
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("dino,scene_0002,scene: "), "{}", rows[1]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("dino,")).count(), 3);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("failed scenes: 1 of 4"));

    for i in [0, 1, 3] {
        fs::remove_file(synth.join(format!("scenes/scene_000{i}/cloud.xyz"))).unwrap();
    }
    let o = bin(&["pipeline", "--config", &pcfg, "--out", &path_str(out.clone())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_to_string(out.join("failures.csv")).unwrap().lines().count(), 5);
}

#[test]
fn dino_pipeline_on_100_clean_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        pipeline: PipelineKind::Dino,
        scenes: SceneSource::Synthetic(SyntheticScenes { count: 100, config: SceneConfig { seed: 77, ..SceneConfig::default() } }),
        ..RunConfig::default()
    };
    cfg.ransac.inlier_threshold_px = 4.0;
    let out = cmd_pipeline(&cfg, dir.path(), None).unwrap();
    assert!(out.failures.is_empty());
    let [_, _, rot, trans] = out.final_report().aggregate();
    assert!(rot < 0.1 && trans < 0.1, "{rot}° {trans} mm");
}

#[test]
fn pipeline_injects_reference_columns_first() {
    let dir = tempfile::tempdir().unwrap();
    let reference = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/reference_values.csv");
    let cfg = write(dir.path(), "c.json", r#"{"scenes": {"synthetic": {"count": 2}}, "ransac": {"inlier_threshold_px": 4.0}}"#);
    let out = dir.path().join("o");
    let o = bin(&["pipeline", "--config", &cfg, "--out", &path_str(out.clone()), "--inject-reference", &path_str(reference)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("Metric                  CLIP Based  DINOv2 Based  dino coarse"), "{table}");
    assert!(table.contains("[reference] injected reference values, not measured: CLIP Based, DINOv2 Based"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains("CLIP Based,[reference],32.17,32.17,11.68,20.0\n"), "{metrics}");
}
