//! Command-line harness for the pose pipelines.
//!
//! Commands: `synth` writes synthetic scenes, `train` fits the regressor,
//! `pipeline` runs clip, dino or hybrid over a scene set and writes metrics,
//! `report` renders metrics CSVs as one table.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
//! `POSE_FORGE_THREADS` sets the worker thread count. Output files do not
//! depend on it.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pose_forge::geometry::Pose;
use pose_forge::metrics::{self, evaluate_scene, EvalRecord, Report, ReportError, REFERENCE_SCENE_ID};
use pose_forge::model::{load_model, ModelError, ObjectModel};
use pose_forge::pipeline::{run_clip, run_dino, run_hybrid, DinoConfig};
use pose_forge::regressor::{self, load_checkpoint, loss_trace_csv, save_checkpoint, MlpParams, RegressorError};
use pose_forge::rng::derive_seed;
use pose_forge::synth::{self, driller_like, export_scene, generate_scene, load_scene, Scene, SceneConfig, SynthError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{PipelineKind, RunConfig, SceneSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const THREADS_ENV: &str = "POSE_FORGE_THREADS";
pub const MANIFEST: &str = "manifest.json";
pub const FAILURES_HEADER: &str = "method,scene_id,reason";
pub const BUILTIN_MODEL: &str = "driller_like";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration at \"{pointer}\": {message}")]
    Config { pointer: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("all {0} scenes failed")]
    AllScenesFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "pose-forge", version, about = "6D object pose estimation pipelines and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Metrics CSV whose rows are added as reference columns.
    #[arg(long = "inject-reference", global = true)]
    pub inject_reference: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes and a manifest.
    Synth,
    /// Train the pose regressor on a synthetic dataset.
    Train,
    /// Run a pipeline over a scene set and write metrics.
    Pipeline,
    /// Render metrics CSVs as one table.
    Report {
        /// Metrics CSV files.
        csv: Vec<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(stdout) => {
            print!("{stdout}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

/// Runs a parsed command; returns the text for standard output.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    if let Command::Report { csv } = &cli.command {
        let (table, _) = cmd_report(csv, cli.inject_reference.as_deref(), cli.out.as_deref())?;
        return Ok(table);
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set \"output\"".into()))?;
    if cli.inject_reference.is_some() && !matches!(cli.command, Command::Pipeline) {
        return Err(CliError::Usage("--inject-reference applies to pipeline and report only".into()));
    }
    match cli.command {
        Command::Synth => {
            let m = cmd_synth(&cfg, &out)?;
            Ok(format!("wrote {} scenes to {}\n", m.scenes.len(), out.display()))
        }
        Command::Train => Ok(cmd_train(&cfg, &out)?.summary_line() + "\n"),
        Command::Pipeline => Ok(cmd_pipeline(&cfg, &out, cli.inject_reference.as_deref())?.table),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn load_object_model(cfg: &RunConfig) -> Result<(ObjectModel, String), CliError> {
    match &cfg.model.path {
        None => Ok((driller_like(), BUILTIN_MODEL.to_string())),
        Some(p) => {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((load_model(p, cfg.model.symmetric)?, name))
        }
    }
}

fn scene_id(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Config of the `i`-th synthetic scene.
pub fn synthetic_scene_config(base: &SceneConfig, i: usize) -> SceneConfig {
    SceneConfig { seed: derive_seed(base.seed, "scene", i as u64), ..base.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub dir: PathBuf,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub base_seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

fn listing(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut files: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    files.sort();
    Ok(files)
}

/// Writes `count` scenes under `out/scenes/` and `out/manifest.json`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let SceneSource::Synthetic(source) = &cfg.scenes else {
        return Err(CliError::Config { pointer: "/scenes".into(), message: "synth needs a synthetic scene source".into() });
    };
    cfg.check_paths(false)?;
    let (model, model_name) = load_object_model(cfg)?;
    create_dir(out)?;
    let scenes = (0..source.count)
        .into_par_iter()
        .map(|i| {
            let scfg = synthetic_scene_config(&source.config, i);
            let scene = generate_scene(&scfg, &model)?;
            let rel = Path::new("scenes").join(scene_id(i));
            let dir = out.join(&rel);
            export_scene(&dir, &scene, &model_name)?;
            Ok(ManifestEntry { id: scene_id(i), seed: scfg.seed, dir: rel, files: listing(&dir)? })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = Manifest { model: model_name, base_seed: source.config.seed, scenes };
    write_file(&out.join(MANIFEST), &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainSummary {
    pub fn summary_line(&self) -> String {
        format!(
            "epochs {}: loss {:.6e} -> {:.6e} (ratio {:.4})",
            self.epochs,
            self.initial_loss,
            self.final_loss,
            self.final_loss / self.initial_loss
        )
    }
}

/// Trains on the configured synthetic dataset; writes `checkpoint/`,
/// `loss.csv` and `summary.txt` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary, CliError> {
    let d = cfg.dataset;
    let data = synth::generate_regression_dataset_with_noise(d.seed, d.n_samples, d.feature_dim, d.noise_sigma)?;
    let outcome = regressor::train(&cfg.train, &data)?;
    create_dir(out)?;
    save_checkpoint(&out.join("checkpoint"), &outcome.params)?;
    write_file(&out.join("loss.csv"), &loss_trace_csv(&outcome.loss_trace))?;
    let trace = &outcome.loss_trace;
    let summary = TrainSummary { epochs: cfg.train.epochs, initial_loss: trace[0], final_loss: trace[trace.len() - 1] };
    write_file(&out.join("summary.txt"), &(summary.summary_line() + "\n"))?;
    Ok(summary)
}

/// Scene ids and how to obtain each scene.
enum SceneList {
    Synthetic { base: SceneConfig, count: usize },
    Dir(Vec<(String, PathBuf)>),
}

impl SceneList {
    fn len(&self) -> usize {
        match self {
            SceneList::Synthetic { count, .. } => *count,
            SceneList::Dir(v) => v.len(),
        }
    }

    fn id(&self, i: usize) -> String {
        match self {
            SceneList::Synthetic { .. } => scene_id(i),
            SceneList::Dir(v) => v[i].0.clone(),
        }
    }

    fn get(&self, i: usize, model: &ObjectModel) -> Result<Scene, SynthError> {
        match self {
            SceneList::Synthetic { base, .. } => generate_scene(&synthetic_scene_config(base, i), model),
            SceneList::Dir(v) => load_scene(&v[i].1, model),
        }
    }
}

fn scene_list(source: &SceneSource) -> Result<SceneList, CliError> {
    match source {
        SceneSource::Synthetic(s) => Ok(SceneList::Synthetic { base: s.config.clone(), count: s.count }),
        SceneSource::Dir(dir) => {
            let manifest_path = dir.join(MANIFEST);
            if manifest_path.is_file() {
                let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
                let m: Manifest =
                    serde_json::from_str(&text).map_err(|e| CliError::Parse { path: manifest_path.clone(), reason: e.to_string() })?;
                return Ok(SceneList::Dir(m.scenes.into_iter().map(|s| (s.id, dir.join(s.dir))).collect()));
            }
            let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(dir)
                .map_err(io_err(dir))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
                .collect();
            dirs.sort();
            Ok(SceneList::Dir(dirs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub scene_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    /// Refined stage, and for dino and hybrid the coarse stage first.
    pub reports: Vec<Report>,
    pub failures: Vec<Failure>,
    pub table: String,
}

impl PipelineSummary {
    pub fn final_report(&self) -> &Report {
        self.reports.last().expect("at least one report")
    }
}

/// Reads an injected reference CSV; every row is marked as reference.
pub fn load_reference(path: &Path) -> Result<Vec<Report>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let reports = metrics::parse_csv(&text, &path.display().to_string())?;
    Ok(reports
        .into_iter()
        .map(|mut r| {
            for rec in &mut r.records {
                rec.scene_id = REFERENCE_SCENE_ID.to_string();
            }
            r.reference = true;
            r
        })
        .collect())
}

fn single_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs the configured pipeline over every scene; writes `metrics.csv`,
/// `report.txt` and `failures.csv` into `out`. A failing scene becomes a
/// failure row; the run fails only when no scene succeeds.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path, inject: Option<&Path>) -> Result<PipelineSummary, CliError> {
    let needs_checkpoint = cfg.pipeline != PipelineKind::Dino;
    cfg.check_paths(needs_checkpoint)?;
    let references = inject.map(load_reference).transpose()?.unwrap_or_default();
    let (model, _) = load_object_model(cfg)?;
    let params: Option<MlpParams> = match (&cfg.checkpoint, needs_checkpoint) {
        (Some(p), true) => Some(load_checkpoint(p)?),
        _ => None,
    };
    if let (Some(p), SceneSource::Synthetic(s)) = (&params, &cfg.scenes) {
        if p.input_dim() != s.config.clip_feature_dim {
            return Err(CliError::Config {
                pointer: "/scenes/synthetic/config/clip_feature_dim".into(),
                message: format!("checkpoint expects {} features, scenes carry {}", p.input_dim(), s.config.clip_feature_dim),
            });
        }
    }
    let scenes = scene_list(&cfg.scenes)?;
    let dino = DinoConfig { min_score: cfg.min_score, ransac: cfg.ransac, icp: cfg.icp };

    let run_one = |i: usize| -> Result<(Pose, Pose, Pose), String> {
        let scene = scenes.get(i, &model).map_err(|e| format!("scene: {e}"))?;
        let (coarse, refined) = match cfg.pipeline {
            PipelineKind::Dino => {
                let o = run_dino(&scene, &model, &dino).map_err(|e| e.to_string())?;
                (o.coarse, o.pose)
            }
            PipelineKind::Clip => {
                let p = run_clip(&scene, params.as_ref().expect("checked")).map_err(|e| e.to_string())?;
                (p, p)
            }
            PipelineKind::Hybrid => {
                let o = run_hybrid(&scene, &model, params.as_ref().expect("checked"), &cfg.icp).map_err(|e| e.to_string())?;
                (o.coarse, o.pose)
            }
        };
        Ok((scene.gt_pose, coarse, refined))
    };
    let outcomes: Vec<Result<(EvalRecord, EvalRecord), String>> = (0..scenes.len())
        .into_par_iter()
        .map(|i| {
            let id = scenes.id(i);
            run_one(i)
                .map(|(gt, coarse, refined)| (evaluate_scene(id.clone(), &model, &coarse, &gt), evaluate_scene(id, &model, &refined, &gt)))
        })
        .collect();

    let name = cfg.method_name();
    let (mut coarse, mut refined, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((c, r)) => {
                coarse.push(c);
                refined.push(r);
            }
            Err(reason) => failures.push(Failure { scene_id: scenes.id(i), reason: single_line(&reason) }),
        }
    }
    let mut measured = Vec::new();
    if cfg.pipeline != PipelineKind::Clip && !coarse.is_empty() {
        measured.push(Report::new(format!("{name} coarse"), coarse));
    }
    if !refined.is_empty() {
        measured.push(Report::new(name.clone(), refined));
    }

    let mut all = references;
    all.extend(measured.iter().cloned());
    create_dir(out)?;
    write_file(&out.join("metrics.csv"), &metrics::render_csv(&all))?;
    let mut fail_csv = format!("{FAILURES_HEADER}\n");
    for f in &failures {
        let _ = writeln!(fail_csv, "{},{},{}", csv_field(&name), csv_field(&f.scene_id), csv_field(&f.reason));
    }
    write_file(&out.join("failures.csv"), &fail_csv)?;

    let mut table = if all.is_empty() { String::new() } else { metrics::render_table(&all)? };
    if !failures.is_empty() {
        let _ = writeln!(table, "\nfailed scenes: {} of {}", failures.len(), scenes.len());
        for f in &failures {
            let _ = writeln!(table, "  {}: {}", f.scene_id, f.reason);
        }
    }
    write_file(&out.join("report.txt"), &table)?;
    if measured.is_empty() {
        return Err(CliError::AllScenesFailed(scenes.len()));
    }
    Ok(PipelineSummary { reports: measured, failures, table })
}

/// Merges metrics CSVs (reference columns first) into one table. With `out`,
/// also writes `report.txt` and the merged `metrics.csv`.
pub fn cmd_report(csvs: &[PathBuf], inject: Option<&Path>, out: Option<&Path>) -> Result<(String, String), CliError> {
    if csvs.is_empty() && inject.is_none() {
        return Err(CliError::Usage("report needs at least one metrics CSV".into()));
    }
    let mut reports = inject.map(load_reference).transpose()?.unwrap_or_default();
    for path in csvs {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        reports.extend(metrics::parse_csv(&text, &path.display().to_string())?);
    }
    let merged = metrics::merge_reports(reports);
    let (table, csv) = metrics::render_report(&merged)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("report.txt"), &table)?;
        write_file(&dir.join("metrics.csv"), &csv)?;
    }
    Ok((table, csv))
}
