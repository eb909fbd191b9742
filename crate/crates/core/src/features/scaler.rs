use serde::{Deserialize, Serialize};

use super::{FeatureError, SplitKind};

/// Per-column z-score parameters. Standard deviations use the population
/// (divide-by-N) convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: SplitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

pub fn fit_scaler<R: AsRef<[f64]>>(
    rows: &[R],
    columns: &[&str],
    source: SplitKind,
) -> Result<ScalerParams, FeatureError> {
    if source != SplitKind::Train {
        return Err(FeatureError::Config(format!("scalers must be fitted on the training split, not {source}")));
    }
    if rows.len() < 2 {
        return Err(FeatureError::Dimension(format!("need at least 2 rows to fit a scaler, got {}", rows.len())));
    }
    let k = columns.len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.as_ref().len() != k) {
        return Err(FeatureError::Dimension(format!("row {i} has {} columns, expected {k}", r.as_ref().len())));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; k];
    for r in rows {
        mean.iter_mut().zip(r.as_ref()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    if let Some(index) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(FeatureError::ConstantColumn { index, name: columns[index].to_string() });
    }
    Ok(ScalerParams { columns: columns.iter().map(|c| c.to_string()).collect(), mean, std, fitted_on: source })
}

impl ScalerParams {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, row: &[f64]) -> Result<Vec<f64>, FeatureError> {
        self.check(row)?;
        Ok(row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
    }

    pub fn inverse(&self, row: &[f64]) -> Result<Vec<f64>, FeatureError> {
        self.check(row)?;
        Ok(row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect())
    }

    fn check(&self, row: &[f64]) -> Result<(), FeatureError> {
        if row.len() != self.width() {
            return Err(FeatureError::Dimension(format!(
                "scaler expects {} columns, got {}",
                self.width(),
                row.len()
            )));
        }
        Ok(())
    }
}

pub fn apply_scaler<R: AsRef<[f64]>>(
    rows: &[R],
    params: &ScalerParams,
    direction: Direction,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    rows.iter()
        .map(|r| match direction {
            Direction::Forward => params.forward(r.as_ref()),
            Direction::Inverse => params.inverse(r.as_ref()),
        })
        .collect()
}
