//! `daylight-net`: generate, split, train, sweep, evaluate and predict.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{NaiveDate, NaiveTime};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use daylight_core::dataset::ImageBank;
use daylight_core::eval::{error_heatmap, scatter_export, time_series_csv, EvaluateError};
use daylight_core::features::{FeatureVector, TARGET_NAMES};
use daylight_core::trainer::{standardize, sweep_csv, SweepRow};
use daylight_core::{
    evaluate, generate_corpus, load_data_dir, pearson_matrix, preprocess_image, run_sweep, split, sweep_configs, train,
    Checkpoint, Corpus, DatasetError, EvalError, FeatureError, InputBatch, ModelConfig, ModelError, NnError, RawImage,
    SplitIndices, SplitKind, SynthConfig, TrainError, TrainingData,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "DAYLIGHT_NET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "daylight-net", version, about = "Indoor illuminance prediction from window images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSet {
    Test1,
    Test2,
    Val,
}

impl From<EvalSet> for SplitKind {
    fn from(s: EvalSet) -> Self {
        match s {
            EvalSet::Test1 => SplitKind::Test1,
            EvalSet::Test2 => SplitKind::Test2,
            EvalSet::Val => SplitKind::Val,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of window images and sensor readings.
    Synth {
        #[arg(long)]
        days: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clear_sky: bool,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
    /// Partition a corpus into train/val/test1 and a held-out test2 day.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = parse_date)]
        holdout_day: NaiveDate,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model configuration.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the six candidate head configurations.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base config for everything except head, dropout and learning rate.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cap every run at 20 epochs.
        #[arg(long)]
        smoke: bool,
    },
    /// Evaluate a checkpoint on one split and write plot-ready exports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, value_enum)]
        set: EvalSet,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict (Eh, Es, Ee) in lux for one image, time and position.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = parse_time)]
        time: NaiveTime,
        #[arg(long, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, allow_hyphen_values = true)]
        d: f64,
    },
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("expected YYYY-MM-DD: {e}"))
}

fn parse_time(s: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(s, "%H:%M").map_err(|e| format!("expected HH:MM: {e}"))
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

fn nn_code(e: &NnError) -> i32 {
    match e {
        NnError::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Nn(n) => nn_code(n),
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } => Self { code: EXIT_NUMERIC, message: e.to_string() },
            TrainError::Model(m) => m.into(),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<EvaluateError> for CliError {
    fn from(e: EvaluateError) -> Self {
        match e {
            EvaluateError::Model(m) => m.into(),
            other => Self::data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub version: String,
    pub wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
}

impl RunManifest {
    fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: 0.0,
            summary: None,
        }
    }

    fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    fn output(mut self, name: &str, path: &Path) -> Self {
        self.outputs.insert(name.into(), path.display().to_string());
        self
    }

    fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    fn write(mut self, path: &Path, started: Instant) -> Result<(), CliError> {
        self.wall_time_seconds = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_text(path, &(text + "\n"))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialized");
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { days, seed, out, clear_sky, image_size } => cmd_synth(days, seed, &out, clear_sky, image_size),
        Command::Split { data, seed, holdout_day, out } => cmd_split(&data, seed, holdout_day, &out),
        Command::Train { data, splits, config, out } => cmd_train(&data, &splits, &config, &out),
        Command::Sweep { data, splits, out, config, smoke } => cmd_sweep(&data, &splits, &out, config.as_deref(), smoke),
        Command::Eval { checkpoint, data, splits, set, out } => cmd_eval(&checkpoint, &data, &splits, set.into(), &out),
        Command::Predict { checkpoint, image, time, x, d } => cmd_predict(&checkpoint, &image, time, x, d),
    }
}

fn cmd_synth(days: u64, seed: u64, out: &Path, clear_sky: bool, image_size: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = SynthConfig { seed, clear_sky, image_size, ..SynthConfig::default() };
    create_dir(out)?;
    let written = generate_corpus(days, &cfg, out)?;
    let mut manifest = RunManifest::new("synth", to_value(&cfg))
        .seed("synth", seed)
        .output("samples", &out.join("samples.csv"))
        .output("images", &out.join("images"))
        .output("mask", &out.join("mask.json"));
    manifest.summary = Some(to_value(&written.summary));
    manifest.write(&out.join("manifest.json"), started)?;
    log::info!("wrote {} rows and {} images to {}", written.summary.rows, written.summary.images, out.display());
    Ok(())
}

fn manifest_path_for(file: &Path) -> PathBuf {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
    file.with_file_name(format!("{stem}.manifest.json"))
}

fn cmd_split(data: &Path, seed: u64, holdout: NaiveDate, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let corpus = load_data_dir(data)?;
    let splits = split(&corpus.samples, seed, holdout)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &splits.to_json())?;
    let mut manifest = RunManifest::new("split", serde_json::json!({ "holdout_day": holdout.to_string() }))
        .seed("split", seed)
        .input("data", data)
        .output("splits", out);
    manifest.summary = Some(serde_json::json!({
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test1": splits.test1.len(),
        "test2": splits.test2.len(),
    }));
    manifest.write(&manifest_path_for(out), started)?;
    log::info!(
        "split {}: train {} val {} test1 {} test2 {}",
        corpus.samples.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test1.len(),
        splits.test2.len()
    );
    Ok(())
}

fn load_splits(path: &Path, corpus: &Corpus) -> Result<SplitIndices, CliError> {
    let splits = SplitIndices::from_json(&read_text(path)?)?;
    if splits.total() != corpus.samples.len() {
        return Err(CliError::data(format!(
            "split file covers {} samples but the corpus has {}",
            splits.total(),
            corpus.samples.len()
        )));
    }
    if splits.test2.iter().any(|&i| i >= corpus.samples.len() || corpus.samples[i].timestamp.date() != splits.holdout_day) {
        return Err(CliError::data("split file does not match this corpus (test2 rows off the holdout day)"));
    }
    Ok(splits)
}

fn load_config(path: &Path) -> Result<ModelConfig, CliError> {
    Ok(ModelConfig::from_json(&read_text(path)?)?)
}

fn prepare(data: &Path, splits: &Path, image_size: usize) -> Result<(Corpus, TrainingData), CliError> {
    let corpus = load_data_dir(data)?;
    let splits = load_splits(splits, &corpus)?;
    let bank = ImageBank::load(&corpus.samples, &corpus.mask, image_size)?;
    let prepared = TrainingData::prepare(&corpus.samples, bank, corpus.mask.clone(), splits)?;
    Ok((corpus, prepared))
}

fn cmd_train(data: &Path, splits: &Path, config: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let (_, prepared) = prepare(data, splits, cfg.image_size)?;
    create_dir(out)?;
    let (checkpoint, history) = train(&prepared, &cfg)?;
    let name = config.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ckpt_path = out.join("model.dlnc");
    let curves = out.join(format!("curves_{name}.csv"));
    checkpoint.save(&ckpt_path)?;
    write_text(&curves, &history.curves_csv())?;
    let mut manifest = RunManifest::new("train", to_value(&cfg))
        .seed("model", cfg.seed)
        .input("data", data)
        .input("splits", splits)
        .input("config", config)
        .output("checkpoint", &ckpt_path)
        .output("curves", &curves);
    manifest.summary = Some(serde_json::json!({
        "best_epoch": history.best_epoch,
        "best_val_mse": history.best_val_mse(),
        "epochs_run": history.val_mse.len(),
        "stopped_early": history.stopped_early,
    }));
    manifest.write(&out.join("manifest.json"), started)?;
    log::info!("best epoch {} val_mse {}", history.best_epoch, history.best_val_mse());
    Ok(())
}

/// Epoch cap applied to every run in `sweep --smoke`.
pub const SMOKE_MAX_EPOCHS: usize = 20;

fn cmd_sweep(data: &Path, splits: &Path, out: &Path, config: Option<&Path>, smoke: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let mut base = match config {
        Some(p) => load_config(p)?,
        None => ModelConfig::default(),
    };
    if smoke {
        base.max_epochs = SMOKE_MAX_EPOCHS;
    }
    let (_, prepared) = prepare(data, splits, base.image_size)?;
    create_dir(out)?;
    let configs = sweep_configs(&base);
    let rows = run_sweep(&prepared, &configs, Some(out))?;
    let mut manifest = RunManifest::new("sweep", to_value(&base))
        .seed("model", base.seed)
        .input("data", data)
        .input("splits", splits)
        .output("summary", &out.join("sweep.csv"));
    if let Some(p) = config {
        manifest = manifest.input("config", p);
    }
    manifest.summary = Some(sweep_summary(&rows, smoke));
    manifest.write(&out.join("manifest.json"), started)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn sweep_summary(rows: &[SweepRow], smoke: bool) -> Value {
    let runs: Vec<Value> = rows
        .iter()
        .map(|r| match &r.outcome {
            Ok(o) => serde_json::json!({ "model": r.model, "ok": true, "outcome": o }),
            Err(e) => serde_json::json!({ "model": r.model, "ok": false, "error": e }),
        })
        .collect();
    serde_json::json!({ "smoke": smoke, "runs": runs })
}

fn cmd_eval(checkpoint: &Path, data: &Path, splits_path: &Path, set: SplitKind, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let ckpt = Checkpoint::load(checkpoint)?;
    let corpus = load_data_dir(data)?;
    let splits = load_splits(splits_path, &corpus)?;
    let rows = splits.get(set);
    if rows.is_empty() {
        return Err(CliError::data(format!("split {set} is empty")));
    }
    let bank = ImageBank::load(&corpus.samples, &ckpt.mask, ckpt.config().image_size)?;
    let (report, preds) = evaluate(&ckpt, &corpus.samples, &bank, rows, set)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("eval", to_value(ckpt.config()))
        .input("checkpoint", checkpoint)
        .input("data", data)
        .input("splits", splits_path);
    let report_path = out.join("report.json");
    write_text(&report_path, &report.to_json())?;
    manifest = manifest.output("report", &report_path);

    let mut fits = Vec::new();
    for (k, name) in TARGET_NAMES.iter().enumerate() {
        let heat = error_heatmap(&corpus.samples, &preds, k)?;
        write_text(&out.join(format!("heatmap_{name}.csv")), &heat.to_csv())?;
        match scatter_export(&preds, k) {
            Ok((csv, fit)) => {
                write_text(&out.join(format!("scatter_{name}.csv")), &csv)?;
                fits.push(fit);
            }
            Err(e) => log::warn!("scatter {name}: {e}"),
        }
    }
    write_text(&out.join("scatter_fit.json"), &(serde_json::to_string_pretty(&fits).expect("serializes") + "\n"))?;

    let mut sensors: Vec<u8> = rows.iter().map(|&i| corpus.samples[i].sensor_id).collect();
    sensors.sort_unstable();
    sensors.dedup();
    for s in sensors {
        write_text(&out.join(format!("timeseries_sensor{s:02}.csv")), &time_series_csv(&corpus.samples, &preds, s)?)?;
    }
    let subset: Vec<_> = rows.iter().map(|&i| corpus.samples[i].clone()).collect();
    match pearson_matrix(&subset) {
        Ok(m) => write_text(&out.join("correlation.csv"), &m.to_csv())?,
        Err(e) => log::warn!("correlation matrix skipped: {e}"),
    }
    manifest.summary = Some(to_value(&report));
    manifest.write(&out.join("manifest.json"), started)?;
    for t in &report.targets {
        log::info!(
            "{} {}: R2 {:?} MAE {:.3} lux RMSE {:.3} lux",
            set,
            t.target,
            t.lux.r2,
            t.lux.mae,
            t.lux.rmse
        );
    }
    Ok(())
}

/// Lux prediction for one capture; applies the checkpoint's stored mask,
/// image size and scalers.
pub fn predict_one(ckpt: &Checkpoint, raw: &RawImage, time: NaiveTime, x: f64, d: f64) -> Result<[f64; 3], CliError> {
    let size = ckpt.config().image_size;
    let image = preprocess_image(raw, &ckpt.mask, size)?;
    let ts = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date").and_time(time);
    let fv = FeatureVector::new(&ts, x, d)?;
    if !fv.in_room() {
        log::warn!("position ({x}, {d}) lies outside the room");
    }
    let feats = standardize(&[fv.to_array()], &ckpt.input_scaler)?;
    let bank = ImageBank::from_parts(size, vec![image], vec![0]);
    let batch = InputBatch::<f32>::from_bank(&bank, &feats, &[0])?;
    let y = ckpt.model.forward(&batch)?;
    let std: Vec<f64> = y.to_f64_vec();
    let lux = ckpt.target_scaler.inverse(&std)?;
    Ok([lux[0], lux[1], lux[2]])
}

fn cmd_predict(checkpoint: &Path, image: &Path, time: NaiveTime, x: f64, d: f64) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let bytes = fs::read(image).map_err(|e| io_err(image, e))?;
    let raw = RawImage::decode(&bytes)?;
    let [eh, es, ee] = predict_one(&ckpt, &raw, time, x, d)?;
    println!("{eh} {es} {ee}");
    Ok(())
}
