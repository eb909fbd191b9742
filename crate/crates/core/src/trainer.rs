//! Mini-batch Adam training with early stopping on validation MSE, and the
//! six-configuration hyperparameter sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ImageBank, Sample, SplitIndices};
use crate::eval::{r2_score, EvalError};
use crate::features::{
    build_feature_vector, fit_scaler, FeatureError, MaskConfig, ScalerParams, SplitKind, FEATURE_NAMES, TARGET_NAMES,
};
use crate::model::{InputBatch, Model, ModelConfig, ModelError, OUTPUT_WIDTH};
use crate::nn::{adam_step, AdamState, NnError, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error at epoch {epoch}, batch {batch}: {msg}")]
    Numeric { epoch: usize, batch: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

pub fn raw_features(samples: &[Sample]) -> Result<Vec<[f64; 4]>, FeatureError> {
    samples.iter().map(|s| build_feature_vector(s).map(|f| f.to_array())).collect()
}

pub fn standardize<const N: usize>(rows: &[[f64; N]], scaler: &ScalerParams) -> Result<Vec<[f64; N]>, FeatureError> {
    rows.iter()
        .map(|r| scaler.forward(r).map(|v| v.try_into().expect("scaler width checked")))
        .collect()
}

/// Standardized model inputs and targets for a corpus, with scalers fitted
/// on the training split only.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub bank: ImageBank,
    pub features: Vec<[f64; 4]>,
    pub targets: Vec<[f64; 3]>,
    pub input_scaler: ScalerParams,
    pub target_scaler: ScalerParams,
    pub mask: MaskConfig,
    pub splits: SplitIndices,
}

impl TrainingData {
    pub fn prepare(samples: &[Sample], bank: ImageBank, mask: MaskConfig, splits: SplitIndices) -> Result<Self, TrainError> {
        if bank.sample_image.len() != samples.len() {
            return Err(TrainError::Config(format!(
                "image bank covers {} samples, corpus has {}",
                bank.sample_image.len(),
                samples.len()
            )));
        }
        if let Some(&bad) = [&splits.train, &splits.val, &splits.test1, &splits.test2]
            .iter()
            .flat_map(|s| s.iter())
            .find(|&&i| i >= samples.len())
        {
            return Err(TrainError::Config(format!("split index {bad} out of range for {} samples", samples.len())));
        }
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(TrainError::Config("train and val splits must be non-empty".into()));
        }
        let raw = raw_features(samples)?;
        let targets: Vec<[f64; 3]> = samples.iter().map(|s| s.targets).collect();
        let train_x: Vec<[f64; 4]> = splits.train.iter().map(|&i| raw[i]).collect();
        let train_y: Vec<[f64; 3]> = splits.train.iter().map(|&i| targets[i]).collect();
        let input_scaler = fit_scaler(&train_x, &FEATURE_NAMES, SplitKind::Train)?;
        let target_scaler = fit_scaler(&train_y, &TARGET_NAMES, SplitKind::Train)?;
        Ok(Self {
            features: standardize(&raw, &input_scaler)?,
            targets: standardize(&targets, &target_scaler)?,
            bank,
            input_scaler,
            target_scaler,
            mask,
            splits,
        })
    }

    /// Standardized-space MSE over `rows`: summed squared error divided by
    /// `rows.len() * 3`.
    pub fn mse(&self, model: &Model<f32>, rows: &[usize]) -> Result<f64, ModelError> {
        let pred = model.predict(&self.bank, &self.features, rows)?;
        let sse: f64 = rows
            .iter()
            .zip(&pred)
            .map(|(&i, p)| p.iter().zip(&self.targets[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        Ok(sse / (rows.len() * OUTPUT_WIDTH) as f64)
    }
}

/// Patience-based stopping on strictly improving validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        if val < self.best {
            self.best = val;
            self.best_epoch = Some(epoch);
            return StopDecision::Improved;
        }
        match self.best_epoch {
            Some(b) if epoch - b >= self.patience => StopDecision::Stop,
            _ => StopDecision::Continue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn last_epoch(&self) -> usize {
        self.val_mse.len() - 1
    }

    pub fn best_val_mse(&self) -> f64 {
        self.val_mse[self.best_epoch]
    }

    /// `epoch,train_mse,val_mse` learning curve.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for (e, (t, v)) in self.train_mse.iter().zip(&self.val_mse).enumerate() {
            writeln!(out, "{e},{t},{v}").expect("write to string");
        }
        out
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One optimizer step on `rows`; returns the batch loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    data: &TrainingData,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64, ModelError> {
    let batch = InputBatch::from_bank(&data.bank, &data.features, rows)?;
    let target: Vec<f64> = rows.iter().flat_map(|&i| data.targets[i]).collect();
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, &batch, true, rng)?;
    let target = tape.leaf(Tensor::from_f64(&[rows.len(), OUTPUT_WIDTH], &target)?);
    let loss = tape.mse(rec.output, target)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(NnError::NonFinite("loss".into()).into());
    }
    let mut grads = tape.backward(loss)?;
    let g: Vec<Tensor<f32>> = rec.params.iter().map(|&p| grads.take(p)).collect();
    adam_step(model.params_mut(), &g, adam)?;
    Ok(value)
}

/// Trains from a fresh model; the returned checkpoint holds the weights of
/// the best validation epoch.
pub fn train(data: &TrainingData, config: &ModelConfig) -> Result<(Checkpoint, TrainHistory), TrainError> {
    config.validate()?;
    if config.image_size != data.bank.size {
        return Err(TrainError::Config(format!(
            "config image_size {} but images were preprocessed at {}",
            config.image_size, data.bank.size
        )));
    }
    let mut model = Model::<f32>::build(config)?;
    let mut adam = AdamState::new(model.params(), config.lr);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = TrainHistory {
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        epoch_seconds: Vec::new(),
    };
    let mut order = data.splits.train.clone();
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        order.copy_from_slice(&data.splits.train);
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let loss = train_step(&mut model, &mut adam, data, rows, &mut rng).map_err(|e| match e {
                ModelError::Nn(err) => TrainError::Numeric { epoch, batch: b, msg: err.to_string() },
                other => other.into(),
            })?;
            weighted += loss * rows.len() as f64;
        }
        let train_mse = weighted / order.len() as f64;

        let before = model.weight_hash();
        let val_mse = data.mse(&model, &data.splits.val)?;
        if model.weight_hash() != before {
            return Err(TrainError::Config("validation modified model weights".into()));
        }
        if !val_mse.is_finite() {
            return Err(TrainError::Numeric { epoch, batch: 0, msg: "validation MSE is not finite".into() });
        }
        history.train_mse.push(train_mse);
        history.val_mse.push(val_mse);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train_mse {train_mse:.6} val_mse {val_mse:.6}");
        match stopper.observe(epoch, val_mse) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch().expect("at least one epoch");
    let checkpoint = Checkpoint {
        model: best,
        input_scaler: data.input_scaler.clone(),
        target_scaler: data.target_scaler.clone(),
        mask: data.mask.clone(),
        best_epoch: history.best_epoch,
        best_val_mse: stopper.best(),
    };
    Ok((checkpoint, history))
}

/// Names and head settings of the six candidate models.
pub const SWEEP_HEADS: [(&str, &[usize], f64); 6] = [
    ("A", &[64, 32], 0.0),
    ("B", &[64, 32], 0.3),
    ("C", &[128, 64, 32], 0.0),
    ("D", &[128, 64, 32], 0.3),
    ("E", &[256, 128, 64], 0.3),
    ("F", &[256, 128, 64], 0.5),
];

/// The six sweep configurations, inheriting everything except the head,
/// dropout and learning rate from `base`.
pub fn sweep_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    SWEEP_HEADS
        .iter()
        .map(|&(name, hidden, dropout)| {
            let cfg = ModelConfig { mlp_hidden: hidden.to_vec(), dropout, lr: 0.001, ..base.clone() };
            (name.to_string(), cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub val_mse: f64,
    pub val_r2: f64,
    pub best_epoch: usize,
    pub last_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub config: ModelConfig,
    pub outcome: Result<SweepOutcome, String>,
}

pub const SWEEP_HEADER: &str = "model,mlp,dropout,lr,val_mse,val_r2,best_epoch";

/// Mean over targets of the validation R² of `checkpoint`.
pub fn validation_r2(data: &TrainingData, checkpoint: &Checkpoint) -> Result<f64, TrainError> {
    let rows = &data.splits.val;
    let pred = checkpoint.model.predict(&data.bank, &data.features, rows)?;
    let mut total = 0.0;
    for k in 0..OUTPUT_WIDTH {
        let t: Vec<f64> = rows.iter().map(|&i| data.targets[i][k]).collect();
        let p: Vec<f64> = pred.iter().map(|r| r[k]).collect();
        total += r2_score(&t, &p)?;
    }
    Ok(total / OUTPUT_WIDTH as f64)
}

/// Runs every configuration in order. A failing run becomes a failed row and
/// the sweep continues. With `out_dir`, writes `curves_<model>.csv`,
/// `model_<model>.dlnc` and `sweep.csv`.
pub fn run_sweep(
    data: &TrainingData,
    configs: &[(String, ModelConfig)],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        log::info!("sweep: training model {name}");
        let outcome = train(data, cfg).and_then(|(ckpt, history)| {
            if let Some(dir) = out_dir {
                write_file(&dir.join(format!("curves_{name}.csv")), &history.curves_csv())?;
                ckpt.save(&dir.join(format!("model_{name}.dlnc")))?;
            }
            Ok(SweepOutcome {
                val_mse: history.best_val_mse(),
                val_r2: validation_r2(data, &ckpt)?,
                best_epoch: history.best_epoch,
                last_epoch: history.last_epoch(),
                stopped_early: history.stopped_early,
            })
        });
        if let Err(e) = &outcome {
            log::error!("sweep: model {name} failed: {e}");
        }
        rows.push(SweepRow { model: name.clone(), config: cfg.clone(), outcome: outcome.map_err(|e| e.to_string()) });
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let mlp: Vec<String> = r.config.mlp_hidden.iter().map(usize::to_string).collect();
        write!(out, "{},{},{},{}", r.model, mlp.join("-"), r.config.dropout, r.config.lr).expect("write to string");
        match &r.outcome {
            Ok(o) => writeln!(out, ",{},{},{}", o.val_mse, o.val_r2, o.best_epoch),
            Err(_) => writeln!(out, ",,,"),
        }
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthConfig};

    #[test]
    fn early_stopping_never_triggers_on_strict_improvement() {
        let mut s = EarlyStopping::new(12);
        for e in 0..200 {
            assert_eq!(s.observe(e, 1.0 / (e + 1) as f64), StopDecision::Improved);
        }
        assert_eq!(s.best_epoch(), Some(199));
    }

    #[test]
    fn early_stopping_frozen_after_epoch_5() {
        let mut s = EarlyStopping::new(12);
        let mut stopped = None;
        for e in 0..200 {
            let v = if e <= 5 { 10.0 - e as f64 } else { 5.0 };
            if s.observe(e, v) == StopDecision::Stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(17));
        assert_eq!(s.best_epoch(), Some(5));
    }

    #[test]
    fn ties_keep_first_epoch() {
        let mut s = EarlyStopping::new(3);
        s.observe(0, 1.0);
        assert_eq!(s.observe(1, 1.0), StopDecision::Continue);
        assert_eq!(s.best_epoch(), Some(0));
    }

    #[test]
    fn sweep_configs_match_table() {
        let c = sweep_configs(&ModelConfig { seed: 5, max_epochs: 20, ..ModelConfig::default() });
        let got: Vec<(&str, Vec<usize>, f64)> = c.iter().map(|(n, c)| (n.as_str(), c.mlp_hidden.clone(), c.dropout)).collect();
        assert_eq!(
            got,
            vec![
                ("A", vec![64, 32], 0.0),
                ("B", vec![64, 32], 0.3),
                ("C", vec![128, 64, 32], 0.0),
                ("D", vec![128, 64, 32], 0.3),
                ("E", vec![256, 128, 64], 0.3),
                ("F", vec![256, 128, 64], 0.5),
            ]
        );
        assert!(c.iter().all(|(_, c)| c.lr == 0.001 && c.seed == 5 && c.max_epochs == 20));
    }

    fn small_data(size: usize) -> TrainingData {
        let syn = SynthConfig { image_size: size, seed: 11, ..SynthConfig::default() };
        let corpus = synthesize(2, &syn).unwrap();
        let holdout = corpus.samples.last().unwrap().timestamp.date();
        let splits = crate::dataset::split(&corpus.samples, 1, holdout).unwrap();
        let bank = corpus.image_bank(16).unwrap();
        TrainingData::prepare(&corpus.samples, bank, syn.window_mask(), splits).unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            cnn_channels: vec![4, 4, 4, 4],
            mlp_hidden: vec![8],
            image_size: 16,
            batch_size: 128,
            max_epochs: 3,
            seed: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn scalers_fitted_on_train_only() {
        let d = small_data(16);
        let train: Vec<f64> = d.splits.train.iter().map(|&i| d.targets[i][1]).collect();
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        assert!(mean.abs() < 1e-9);
        let val: Vec<f64> = d.splits.val.iter().map(|&i| d.targets[i][1]).collect();
        let vmean = val.iter().sum::<f64>() / val.len() as f64;
        assert!(vmean.abs() > 1e-9);
        assert_eq!(d.input_scaler.fitted_on, SplitKind::Train);
    }

    #[test]
    fn loss_decreases_over_first_steps() {
        let d = small_data(16);
        let cfg = ModelConfig { batch_size: 32, ..tiny_config() };
        let mut model = Model::<f32>::build(&cfg).unwrap();
        let mut adam = AdamState::new(model.params(), cfg.lr);
        let rows: Vec<usize> = d.splits.train[..32].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let losses: Vec<f64> = (0..11).map(|_| train_step(&mut model, &mut adam, &d, &rows, &mut rng).unwrap()).collect();
        assert!(losses[10] < losses[0], "{losses:?}");
    }

    #[test]
    fn train_is_deterministic_and_returns_best() {
        let d = small_data(16);
        let cfg = tiny_config();
        let (c1, h1) = train(&d, &cfg).unwrap();
        let (c2, h2) = train(&d, &cfg).unwrap();
        assert_eq!(c1.to_bytes(), c2.to_bytes());
        assert_eq!(h1.val_mse, h2.val_mse);
        assert_eq!(h1.val_mse.len(), 3);
        let argmin = h1.val_mse.iter().enumerate().fold(0, |b, (i, v)| if *v < h1.val_mse[b] { i } else { b });
        assert_eq!(h1.best_epoch, argmin);
        assert_eq!(d.mse(&c1.model, &d.splits.val).unwrap(), h1.best_val_mse());
        assert!(h1.curves_csv().starts_with("epoch,train_mse,val_mse\n0,"));
    }

    #[test]
    fn mismatched_image_size_rejected() {
        let d = small_data(16);
        let cfg = ModelConfig { image_size: 32, ..tiny_config() };
        assert!(matches!(train(&d, &cfg), Err(TrainError::Config(_))));
    }

    #[test]
    fn nan_loss_reports_epoch_and_batch() {
        let mut d = small_data(16);
        let i = d.splits.train[0];
        d.targets[i][0] = f64::NAN;
        match train(&d, &ModelConfig { batch_size: 4096, ..tiny_config() }) {
            Err(TrainError::Numeric { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn failed_sweep_run_recorded() {
        let d = small_data(16);
        let good = tiny_config();
        let bad = ModelConfig { image_size: 32, ..tiny_config() };
        let dir = tempfile::tempdir().unwrap();
        let rows = run_sweep(&d, &[("ok".into(), good), ("bad".into(), bad)], Some(dir.path())).unwrap();
        assert!(rows[0].outcome.is_ok());
        assert!(rows[1].outcome.is_err());
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert!(lines[2].starts_with("bad,8,0,0.001,,,"));
        assert!(dir.path().join("curves_ok.csv").exists());
    }
}
