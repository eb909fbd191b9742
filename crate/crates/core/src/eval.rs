//! Regression metrics, correlation analysis and plot-ready exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ImageBank, Sample, TIMESTAMP_FORMAT};
use crate::features::{minute_of_day, SplitKind, TARGET_NAMES};
use crate::model::ModelError;
use crate::trainer::{raw_features, standardize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("R² undefined: column {0} has zero variance")]
    ZeroVariance(String),
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("unknown sensor {0}")]
    UnknownSensor(u8),
    #[error("{0}")]
    Other(String),
}

fn check_pair(a: &[f64], b: &[f64], need: usize) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.len() < need {
        return Err(EvalError::TooFew { need, got: a.len() });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `1 - SSres / SStot` with `SStot` about the mean of `truth` itself.
pub fn r2_score(truth: &[f64], pred: &[f64]) -> Result<f64, EvalError> {
    check_pair(truth, pred, 2)?;
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - m) * (t - m)).sum();
    if !(ss_tot > 0.0) {
        return Err(EvalError::ZeroVariance("truth".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, EvalError> {
    check_pair(truth, pred, 1)?;
    Ok(truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64, EvalError> {
    check_pair(truth, pred, 1)?;
    Ok((truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / truth.len() as f64).sqrt())
}

/// Pearson correlation; errors when either column is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_pair(a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0) || !(sbb > 0.0) {
        return Err(EvalError::ZeroVariance("pearson input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Result<(f64, f64), EvalError> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(EvalError::ZeroVariance("regressor".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    /// `None` when the truth column has zero variance.
    pub r2: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
}

fn column(rows: &[[f64; 3]], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

/// Per-target metrics for `[N, 3]` truth and predictions.
pub fn compute_metrics(truth: &[[f64; 3]], pred: &[[f64; 3]]) -> Result<[TargetMetrics; 3], EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::Length(truth.len(), pred.len()));
    }
    if truth.len() < 2 {
        return Err(EvalError::TooFew { need: 2, got: truth.len() });
    }
    let one = |k: usize| -> Result<TargetMetrics, EvalError> {
        let (t, p) = (column(truth, k), column(pred, k));
        let r2 = match r2_score(&t, &p) {
            Ok(v) => Some(v),
            Err(EvalError::ZeroVariance(_)) => {
                log::warn!("R² undefined for {}: zero variance", TARGET_NAMES[k]);
                None
            }
            Err(e) => return Err(e),
        };
        Ok(TargetMetrics { r2, mae: mae(&t, &p)?, rmse: rmse(&t, &p)? })
    };
    Ok([one(0)?, one(1)?, one(2)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub standardized: TargetMetrics,
    pub lux: TargetMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitKind,
    pub n: usize,
    pub targets: Vec<TargetReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Measured and predicted targets for the rows of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub measured_std: Vec<[f64; 3]>,
    pub predicted_std: Vec<[f64; 3]>,
    pub measured_lux: Vec<[f64; 3]>,
    pub predicted_lux: Vec<[f64; 3]>,
}

impl Predictions {
    pub fn report(&self, split: SplitKind) -> Result<EvalReport, EvalError> {
        let s = compute_metrics(&self.measured_std, &self.predicted_std)?;
        let l = compute_metrics(&self.measured_lux, &self.predicted_lux)?;
        let targets = s
            .into_iter()
            .zip(l)
            .zip(TARGET_NAMES)
            .map(|((standardized, lux), t)| TargetReport { target: t.to_string(), standardized, lux })
            .collect();
        Ok(EvalReport { split, n: self.rows.len(), targets })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

/// Eval-mode predictions for `rows` using the checkpoint's stored scalers;
/// standardized predictions are inverse-transformed into lux.
pub fn predict_rows(
    checkpoint: &Checkpoint,
    samples: &[Sample],
    bank: &ImageBank,
    rows: &[usize],
) -> Result<Predictions, EvaluateError> {
    if rows.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 }.into());
    }
    let features = standardize(&raw_features(samples)?, &checkpoint.input_scaler)?;
    let predicted_std = checkpoint.model.predict(bank, &features, rows)?;
    let measured_lux: Vec<[f64; 3]> = rows.iter().map(|&i| samples[i].targets).collect();
    let measured_std = standardize(&measured_lux, &checkpoint.target_scaler)?;
    let predicted_lux = predicted_std
        .iter()
        .map(|r| checkpoint.target_scaler.inverse(r).map(|v| [v[0], v[1], v[2]]))
        .collect::<Result<_, _>>()?;
    Ok(Predictions { rows: rows.to_vec(), measured_std, predicted_std, measured_lux, predicted_lux })
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    samples: &[Sample],
    bank: &ImageBank,
    rows: &[usize],
    split: SplitKind,
) -> Result<(EvalReport, Predictions), EvaluateError> {
    let preds = predict_rows(checkpoint, samples, bank, rows)?;
    Ok((preds.report(split)?, preds))
}

pub const CORRELATION_COLUMNS: [&str; 7] = ["tod_sin", "tod_cos", "X", "D", "Eh", "Es", "Ee"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub columns: Vec<String>,
    pub r: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == a)?;
        let j = self.columns.iter().position(|c| c == b)?;
        Some(self.r[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(",{}\n", self.columns.join(","));
        for (name, row) in self.columns.iter().zip(&self.r) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{name},{}", cells.join(",")).expect("write to string");
        }
        out
    }
}

/// Pearson matrix over the four features and three targets.
pub fn pearson_matrix(samples: &[Sample]) -> Result<CorrelationMatrix, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooFew { need: 2, got: samples.len() });
    }
    let feats = raw_features(samples).map_err(|e| EvalError::Other(e.to_string()))?;
    let cols: Vec<Vec<f64>> = (0..7)
        .map(|k| samples.iter().zip(&feats).map(|(s, f)| if k < 4 { f[k] } else { s.targets[k - 4] }).collect())
        .collect();
    for (k, c) in cols.iter().enumerate() {
        if c.iter().all(|&v| v == c[0]) {
            return Err(EvalError::ZeroVariance(CORRELATION_COLUMNS[k].to_string()));
        }
    }
    let mut r = vec![vec![1.0; 7]; 7];
    for i in 0..7 {
        for j in i + 1..7 {
            let v = pearson(&cols[i], &cols[j]).map_err(|_| EvalError::ZeroVariance(CORRELATION_COLUMNS[i].into()))?;
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    Ok(CorrelationMatrix { columns: CORRELATION_COLUMNS.iter().map(|c| c.to_string()).collect(), r })
}

/// Mean absolute lux error per (sensor, hour) for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub target: String,
    pub sensors: Vec<u8>,
    pub hours: Vec<u32>,
    /// `cells[s][h]`, `None` where no sample falls in the cell.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let hours: Vec<String> = self.hours.iter().map(|h| format!("{h:02}:00")).collect();
        let mut out = format!("sensor,{}\n", hours.join(","));
        for (s, row) in self.sensors.iter().zip(&self.cells) {
            let cells: Vec<String> = row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()).collect();
            writeln!(out, "{s},{}", cells.join(",")).expect("write to string");
        }
        out
    }
}

/// Sensors 1-16 always appear as rows; hour columns span the first to the
/// last hour present, each tick falling in hour `floor(t / 60)`.
pub fn error_heatmap(samples: &[Sample], preds: &Predictions, target: usize) -> Result<Heatmap, EvalError> {
    if preds.rows.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let mut acc: BTreeMap<(u8, u32), (f64, usize)> = BTreeMap::new();
    let mut sensors: Vec<u8> = (1..=16).collect();
    for (k, &i) in preds.rows.iter().enumerate() {
        let s = &samples[i];
        let hour = minute_of_day(&s.timestamp) / 60;
        let e = acc.entry((s.sensor_id, hour)).or_insert((0.0, 0));
        e.0 += (preds.predicted_lux[k][target] - preds.measured_lux[k][target]).abs();
        e.1 += 1;
        if !sensors.contains(&s.sensor_id) {
            sensors.push(s.sensor_id);
        }
    }
    sensors.sort_unstable();
    let lo = acc.keys().map(|k| k.1).min().expect("non-empty");
    let hi = acc.keys().map(|k| k.1).max().expect("non-empty");
    let hours: Vec<u32> = (lo..=hi).collect();
    let cells = sensors
        .iter()
        .map(|&s| {
            hours
                .iter()
                .map(|&h| match acc.get(&(s, h)) {
                    Some(&(sum, n)) => Some(sum / n as f64),
                    None => {
                        log::warn!("heatmap {}: no samples for sensor {s} at {h:02}:00", TARGET_NAMES[target]);
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(Heatmap { target: TARGET_NAMES[target].to_string(), sensors, hours, cells })
}

pub const TIME_SERIES_HEADER: &str = "time,Eh_meas,Eh_pred,Es_meas,Es_pred,Ee_meas,Ee_pred";

/// Measured and predicted lux for one sensor, ordered by time.
pub fn time_series_csv(samples: &[Sample], preds: &Predictions, sensor: u8) -> Result<String, EvalError> {
    let mut rows: Vec<usize> = (0..preds.rows.len()).filter(|&k| samples[preds.rows[k]].sensor_id == sensor).collect();
    if rows.is_empty() {
        return Err(EvalError::UnknownSensor(sensor));
    }
    rows.sort_by_key(|&k| samples[preds.rows[k]].timestamp);
    let mut out = format!("{TIME_SERIES_HEADER}\n");
    for k in rows {
        let (m, p) = (preds.measured_lux[k], preds.predicted_lux[k]);
        let ts = samples[preds.rows[k]].timestamp.format(TIMESTAMP_FORMAT);
        writeln!(out, "{ts},{},{},{},{},{},{}", m[0], p[0], m[1], p[1], m[2], p[2]).expect("write to string");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterFit {
    pub target: String,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// `measured,predicted` lux pairs for one target and the least-squares line
/// of predicted on measured.
pub fn scatter_export(preds: &Predictions, target: usize) -> Result<(String, ScatterFit), EvalError> {
    let m = column(&preds.measured_lux, target);
    let p = column(&preds.predicted_lux, target);
    let (slope, intercept) = least_squares(&m, &p)?;
    let mut out = String::from("measured,predicted\n");
    for (a, b) in m.iter().zip(&p) {
        writeln!(out, "{a},{b}").expect("write to string");
    }
    Ok((out, ScatterFit { target: TARGET_NAMES[target].to_string(), slope, intercept, n: m.len() }))
}
