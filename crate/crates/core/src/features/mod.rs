//! Raw observations to model inputs: temporal encoding, spatial features,
//! image preprocessing and train-fitted standardization.

pub mod image;
mod scaler;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

pub use self::image::{preprocess_image, ImageTensor, MaskConfig, RawImage};
pub use scaler::{apply_scaler, fit_scaler, Direction, ScalerParams};

use crate::dataset::Sample;

/// Minutes in a day; the period of the time-of-day encoding.
pub const MINUTES_PER_DAY: f64 = 1440.0;

/// Column order of the structured model input. Frozen.
pub const FEATURE_NAMES: [&str; 4] = ["tod_sin", "tod_cos", "X", "D"];

/// Column order of the regression targets.
pub const TARGET_NAMES: [&str; 3] = ["Eh", "Es", "Ee"];

/// Room extent along X (west wall to east wall), meters.
pub const ROOM_WIDTH: f64 = 8.9;
/// Room extent along D (window wall to back wall), meters.
pub const ROOM_DEPTH: f64 = 7.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("image ingestion error: {0}")]
    Ingestion(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fit error: column {index} ({name}) is constant")]
    ConstantColumn { index: usize, name: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
}

/// Identifies which split a scaler or report refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test1,
    Test2,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test1 => "test1",
            SplitKind::Test2 => "test2",
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test1" => Ok(SplitKind::Test1),
            "test2" => Ok(SplitKind::Test2),
            other => Err(format!("unknown split `{other}` (expected train, val, test1 or test2)")),
        }
    }
}

/// Minutes since midnight, ignoring seconds.
pub fn minute_of_day(ts: &NaiveDateTime) -> u32 {
    ts.hour() * 60 + ts.minute()
}

/// Cyclical encoding of a minute-of-day value `t` in `[0, 1440)`.
pub fn encode_minutes(t: f64) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * t / MINUTES_PER_DAY;
    (angle.sin(), angle.cos())
}

pub fn encode_time(ts: &NaiveDateTime) -> (f64, f64) {
    encode_minutes(minute_of_day(ts) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub tod_sin: f64,
    pub tod_cos: f64,
    pub x: f64,
    pub d: f64,
}

impl FeatureVector {
    pub fn new(ts: &NaiveDateTime, x: f64, d: f64) -> Result<Self, FeatureError> {
        for (name, v) in [("X", x), ("D", d)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FeatureError::Validation(format!("{name} must be a finite non-negative distance, got {v}")));
            }
        }
        let (tod_sin, tod_cos) = encode_time(ts);
        Ok(Self { tod_sin, tod_cos, x, d })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tod_sin, self.tod_cos, self.x, self.d]
    }

    /// True when (X, D) lies inside the room footprint.
    pub fn in_room(&self) -> bool {
        (0.0..=ROOM_WIDTH).contains(&self.x) && (0.0..=ROOM_DEPTH).contains(&self.d)
    }
}

pub fn build_feature_vector(sample: &Sample) -> Result<FeatureVector, FeatureError> {
    FeatureVector::new(&sample.timestamp, sample.x, sample.d)
}

/// Checks that a structured-input column layout is exactly [`FEATURE_NAMES`].
pub fn check_feature_layout(columns: &[String]) -> Result<(), FeatureError> {
    if columns.len() != FEATURE_NAMES.len() || columns.iter().zip(FEATURE_NAMES).any(|(a, b)| a != b) {
        return Err(FeatureError::Dimension(format!(
            "structured input columns {columns:?} do not match {FEATURE_NAMES:?}"
        )));
    }
    Ok(())
}
