//! Corpus ingestion, cleaning and the train/val/test1/test2 split.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{preprocess_image, FeatureError, ImageTensor, MaskConfig, RawImage, SplitKind};

pub const CSV_HEADER: [&str; 7] = ["timestamp", "sensor_id", "X", "D", "Eh", "Es", "Ee"];
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("inconsistent corpus: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

/// One synchronized observation at one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub timestamp: NaiveDateTime,
    pub sensor_id: u8,
    pub x: f64,
    pub d: f64,
    pub image_ref: PathBuf,
    /// (Eh, Es, Ee) in lux.
    pub targets: [f64; 3],
}

/// `img_YYYYMMDD_HHMM` for a capture time.
pub fn image_stem(ts: &NaiveDateTime) -> String {
    ts.format("img_%Y%m%d_%H%M").to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub raw_rows: usize,
    pub dropped_missing: usize,
    pub dropped_no_image: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    /// Sorted by (timestamp, sensor_id).
    pub samples: Vec<Sample>,
    pub mask: MaskConfig,
    pub report: LoadReport,
}

fn index_images(dir: &Path) -> Result<HashMap<String, PathBuf>, DatasetError> {
    let mut found = HashMap::new();
    let entries = fs::read_dir(dir).map_err(|e| DatasetError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            if stem.starts_with("img_") {
                found.entry(stem.to_string()).or_insert(p);
            }
        }
    }
    Ok(found)
}

struct RawRow {
    timestamp: NaiveDateTime,
    sensor_id: u8,
    x: f64,
    d: f64,
    targets: Option<[f64; 3]>,
}

fn parse_rows(path: &Path) -> Result<Vec<RawRow>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::Parse { path: path.into(), line: 1, msg: e.to_string() })?;
    let header = rdr
        .headers()
        .map_err(|e| DatasetError::Parse { path: path.into(), line: 1, msg: e.to_string() })?
        .clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(DatasetError::Parse {
            path: path.into(),
            line: 1,
            msg: format!("header must be `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            DatasetError::Parse { path: path.into(), line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |msg: String| DatasetError::Parse { path: path.into(), line, msg };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let timestamp = NaiveDateTime::parse_from_str(field(0), TIMESTAMP_FORMAT)
            .map_err(|e| err(format!("bad timestamp `{}`: {e}", field(0))))?;
        let sensor_id: u8 = field(1).parse().map_err(|_| err(format!("bad sensor_id `{}`", field(1))))?;
        if !(1..=16).contains(&sensor_id) {
            return Err(err(format!("sensor_id {sensor_id} outside 1..=16")));
        }
        let num = |i: usize| -> Result<f64, DatasetError> {
            let v: f64 = field(i).parse().map_err(|_| err(format!("bad {} `{}`", CSV_HEADER[i], field(i))))?;
            if !v.is_finite() {
                return Err(err(format!("{} is not finite", CSV_HEADER[i])));
            }
            Ok(v)
        };
        let (x, d) = (num(2)?, num(3)?);
        let mut targets = [0.0; 3];
        let mut complete = true;
        for (k, slot) in targets.iter_mut().enumerate() {
            if field(4 + k).is_empty() {
                complete = false;
                continue;
            }
            *slot = num(4 + k)?;
            if *slot < 0.0 {
                return Err(err(format!("{} is negative", CSV_HEADER[4 + k])));
            }
        }
        rows.push(RawRow { timestamp, sensor_id, x, d, targets: complete.then_some(targets) });
    }
    Ok(rows)
}

/// Reads and cleans the corpus. Rows with a missing target are dropped, as
/// are rows whose capture image is absent from `image_dir`.
pub fn load_corpus(csv_paths: &[PathBuf], image_dir: &Path, mask_config: &Path) -> Result<Corpus, DatasetError> {
    let mask_text = fs::read_to_string(mask_config).map_err(|e| DatasetError::io(mask_config, e))?;
    let mask = MaskConfig::from_json(&mask_text)?;
    let images = index_images(image_dir)?;

    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for path in csv_paths {
        for row in parse_rows(path)? {
            report.raw_rows += 1;
            let Some(targets) = row.targets else {
                report.dropped_missing += 1;
                continue;
            };
            let stem = image_stem(&row.timestamp);
            let Some(image_ref) = images.get(&stem) else {
                log::warn!("no image {stem} in {}; dropping sensor {} row", image_dir.display(), row.sensor_id);
                report.dropped_no_image += 1;
                continue;
            };
            samples.push(Sample {
                timestamp: row.timestamp,
                sensor_id: row.sensor_id,
                x: row.x,
                d: row.d,
                image_ref: image_ref.clone(),
                targets,
            });
        }
    }
    canonical_sort(&mut samples);
    check_consistency(&samples)?;
    report.samples = samples.len();
    Ok(Corpus { samples, mask, report })
}

/// Loads `DIR/*.csv`, `DIR/images/` and `DIR/mask.json`.
pub fn load_data_dir(dir: &Path) -> Result<Corpus, DatasetError> {
    let entries = fs::read_dir(dir).map_err(|e| DatasetError::io(dir, e))?;
    let mut csvs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        return Err(DatasetError::Config(format!("no CSV files in {}", dir.display())));
    }
    load_corpus(&csvs, &dir.join("images"), &dir.join("mask.json"))
}

pub fn canonical_sort(samples: &mut [Sample]) {
    samples.sort_by_key(|s| (s.timestamp, s.sensor_id));
}

fn check_consistency(samples: &[Sample]) -> Result<(), DatasetError> {
    let mut positions: HashMap<u8, (f64, f64)> = HashMap::new();
    for w in samples.windows(2) {
        if (w[0].timestamp, w[0].sensor_id) == (w[1].timestamp, w[1].sensor_id) {
            return Err(DatasetError::Inconsistent(format!(
                "duplicate row for sensor {} at {}",
                w[0].sensor_id, w[0].timestamp
            )));
        }
    }
    for s in samples {
        let pos = *positions.entry(s.sensor_id).or_insert((s.x, s.d));
        if pos != (s.x, s.d) {
            return Err(DatasetError::Inconsistent(format!(
                "sensor {} at ({}, {}) and ({}, {})",
                s.sensor_id, pos.0, pos.1, s.x, s.d
            )));
        }
    }
    Ok(())
}

/// Disjoint index lists into the sample slice the split was computed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub seed: u64,
    pub holdout_day: NaiveDate,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test1: Vec<usize>,
    pub test2: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test1 => &self.test1,
            SplitKind::Test2 => &self.test2,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test1.len() + self.test2.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        serde_json::from_str(text).map_err(|e| DatasetError::Config(format!("split file: {e}")))
    }
}

/// Target sizes of the train/val/test1 partition of `n` non-holdout samples:
/// train is floor(0.7 n), the rest halves with the odd sample going to test1.
pub fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let rest = n - train;
    let val = rest / 2;
    (train, val, rest - val)
}

/// Holds out every sample dated `holdout_day` as test2, then splits the rest
/// 70/15/15 stratified by sensor.
///
/// Per-sensor train quotas are floor(0.7 n_s) plus one extra for the strata
/// with the largest fractional parts (ties by sensor id) until the global
/// train size is met. Each stratum's leftover is halved; odd leftovers go
/// alternately to test1 and val in sensor order. Within a stratum, members
/// are assigned after a seeded shuffle of their canonical order.
pub fn split(samples: &[Sample], seed: u64, holdout_day: NaiveDate) -> Result<SplitIndices, DatasetError> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&samples[a], &samples[b]);
        (sa.timestamp, sa.sensor_id, a).cmp(&(sb.timestamp, sb.sensor_id, b))
    });

    let mut test2 = Vec::new();
    let mut strata: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        if samples[i].timestamp.date() == holdout_day {
            test2.push(i);
        } else {
            strata.entry(samples[i].sensor_id).or_default().push(i);
        }
    }
    if test2.is_empty() {
        return Err(DatasetError::Config(format!("no samples on holdout day {holdout_day}")));
    }
    let remaining: usize = strata.values().map(Vec::len).sum();
    if remaining == 0 {
        return Err(DatasetError::Config(format!(
            "holdout day {holdout_day} leaves no samples for train/val/test1"
        )));
    }

    let (train_total, _, _) = partition_sizes(remaining);
    let mut quotas: Vec<(u8, usize, usize)> = strata.iter().map(|(&id, m)| (id, m.len(), m.len() * 7 / 10)).collect();
    let mut short = train_total - quotas.iter().map(|q| q.2).sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    // fractional part of 0.7 n is (7 n mod 10) / 10
    by_remainder.sort_by_key(|&k| (std::cmp::Reverse(quotas[k].1 * 7 % 10), quotas[k].0));
    for k in by_remainder {
        if short == 0 {
            break;
        }
        if quotas[k].1 * 7 % 10 > 0 {
            quotas[k].2 += 1;
            short -= 1;
        }
    }
    debug_assert_eq!(short, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test1) = (Vec::new(), Vec::new(), Vec::new());
    let mut odd_to_test1 = true;
    for ((_, members), &(_, n, n_train)) in strata.iter().zip(&quotas) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let rest = n - n_train;
        let mut n_val = rest / 2;
        if rest % 2 == 1 {
            if !odd_to_test1 {
                n_val += 1;
            }
            odd_to_test1 = !odd_to_test1;
        }
        train.extend_from_slice(&shuffled[..n_train]);
        val.extend_from_slice(&shuffled[n_train..n_train + n_val]);
        test1.extend_from_slice(&shuffled[n_train + n_val..]);
    }
    for list in [&mut train, &mut val, &mut test1, &mut test2] {
        list.sort_unstable();
    }
    Ok(SplitIndices { seed, holdout_day, train, val, test1, test2 })
}

/// Preprocessed images, one per distinct capture, shared by every sensor
/// row of that capture.
#[derive(Debug, Clone)]
pub struct ImageBank {
    pub size: usize,
    pub images: Vec<ImageTensor>,
    /// `sample_image[i]` is the bank entry for sample `i`.
    pub sample_image: Vec<usize>,
}

impl ImageBank {
    pub fn load(samples: &[Sample], mask: &MaskConfig, size: usize) -> Result<Self, DatasetError> {
        let mut refs: Vec<&Path> = Vec::new();
        let mut slot: HashMap<&Path, usize> = HashMap::new();
        let sample_image = samples
            .iter()
            .map(|s| {
                *slot.entry(s.image_ref.as_path()).or_insert_with(|| {
                    refs.push(s.image_ref.as_path());
                    refs.len() - 1
                })
            })
            .collect();
        let images = refs
            .par_iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| DatasetError::io(p, e))?;
                let raw = RawImage::decode(&bytes)?;
                Ok(preprocess_image(&raw, mask, size)?)
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(Self { size, images, sample_image })
    }

    /// Builds a bank from already-preprocessed tensors.
    pub fn from_parts(size: usize, images: Vec<ImageTensor>, sample_image: Vec<usize>) -> Self {
        Self { size, images, sample_image }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ts(day: u32, h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 6, day).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    fn sample(t: NaiveDateTime, sensor: u8) -> Sample {
        Sample {
            timestamp: t,
            sensor_id: sensor,
            x: sensor as f64,
            d: 1.0,
            image_ref: PathBuf::from(format!("{}.pgm", image_stem(&t))),
            targets: [1.0, 2.0, 3.0],
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn fixture(rows: &str, image_times: &[&str]) -> (tempfile::TempDir, Result<Corpus, DatasetError>) {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "a.csv", &format!("timestamp,sensor_id,X,D,Eh,Es,Ee\n{rows}"));
        let images = dir.path().join("images");
        fs::create_dir(&images).unwrap();
        for t in image_times {
            write(&images, &format!("img_{t}.pgm"), "P5\n1 1\n255\n\x05");
        }
        let mask = write(dir.path(), "mask.json", r#"{"polygons": [[[0,0],[1,0],[1,1],[0,1]]]}"#);
        let corpus = load_corpus(&[csv], &images, &mask);
        (dir, corpus)
    }

    #[test]
    fn missing_target_row_is_dropped() {
        let rows = "2024-06-03 08:00,1,1.3,1.5,10.0,,5.0\n2024-06-03 08:00,2,2.8,1.5,10.0,20.0,5.0\n";
        let (_d, c) = fixture(rows, &["20240603_0800"]);
        let c = c.unwrap();
        assert_eq!(c.samples.len(), 1);
        assert_eq!(c.report.dropped_missing, 1);
        assert_eq!(c.report.raw_rows, 2);
    }

    #[test]
    fn join_arithmetic_three_timestamps_sixteen_sensors() {
        let mut rows = String::new();
        for t in ["08:00", "08:05", "08:10"] {
            for s in 1..=16 {
                rows.push_str(&format!("2024-06-03 {t},{s},{}.0,1.5,1,2,3\n", s));
            }
        }
        let (_d, c) = fixture(&rows, &["20240603_0800", "20240603_0805", "20240603_0810"]);
        let c = c.unwrap();
        assert_eq!(c.samples.len(), 48);
        assert_eq!(c.report.samples, c.report.raw_rows);
        // shared image per timestamp
        assert_eq!(c.samples[0].image_ref, c.samples[15].image_ref);
        assert_ne!(c.samples[0].image_ref, c.samples[16].image_ref);
    }

    #[test]
    fn absent_image_drops_row() {
        let rows = "2024-06-03 08:00,1,1.3,1.5,1,2,3\n2024-06-03 08:05,1,1.3,1.5,1,2,3\n";
        let (_d, c) = fixture(rows, &["20240603_0805"]);
        let c = c.unwrap();
        assert_eq!(c.samples.len(), 1);
        assert_eq!(c.report.dropped_no_image, 1);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let rows = "2024-06-03 08:00,1,1.3,1.5,1,2,3\n2024-06-03 08:05,1,abc,1.5,1,2,3\n";
        let (_d, c) = fixture(rows, &["20240603_0800", "20240603_0805"]);
        match c {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_inconsistent_sensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "a.csv", "time,sensor,X,D,Eh,Es,Ee\n");
        let mask = write(dir.path(), "mask.json", r#"{"polygons": [[[0,0],[1,0],[1,1]]]}"#);
        assert!(matches!(load_corpus(&[csv], dir.path(), &mask), Err(DatasetError::Parse { line: 1, .. })));

        let rows = "2024-06-03 08:00,1,1.3,1.5,1,2,3\n2024-06-03 08:05,1,2.8,1.5,1,2,3\n";
        let (_d, c) = fixture(rows, &["20240603_0800", "20240603_0805"]);
        assert!(matches!(c, Err(DatasetError::Inconsistent(_))));
    }

    fn grid_days(days: u32, ticks: u32) -> Vec<Sample> {
        let mut out = Vec::new();
        for day in 1..=days {
            for k in 0..ticks {
                let t = ts(day, 8 + k / 12, (k % 12) * 5);
                for s in 1..=16 {
                    out.push(sample(t, s));
                }
            }
        }
        out
    }

    #[test]
    fn partition_sizes_match_reported_counts() {
        assert_eq!(partition_sizes(15_600), (10_920, 2_340, 2_340));
        assert_eq!(partition_sizes(11), (7, 2, 2));
        assert_eq!(partition_sizes(13), (9, 2, 2));
        assert_eq!(partition_sizes(14), (9, 2, 3));
    }

    #[test]
    fn split_holds_out_day_and_partitions() {
        let samples = grid_days(3, 10);
        let day3 = NaiveDate::from_ymd_opt(2024, 6, 3).unwrap();
        let s = split(&samples, 7, day3).unwrap();
        assert_eq!(s.test2.len(), 160);
        assert!(s.test2.iter().all(|&i| samples[i].timestamp.date() == day3));
        let mut all: Vec<usize> = [&s.train, &s.val, &s.test1, &s.test2].iter().flat_map(|v| v.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..samples.len()).collect::<Vec<_>>());
        assert_eq!((s.train.len(), s.val.len(), s.test1.len()), partition_sizes(320));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let samples = grid_days(3, 10);
        let day = NaiveDate::from_ymd_opt(2024, 6, 3).unwrap();
        assert_eq!(split(&samples, 5, day).unwrap(), split(&samples, 5, day).unwrap());
        assert_ne!(split(&samples, 5, day).unwrap().train, split(&samples, 6, day).unwrap().train);
    }

    #[test]
    fn split_is_independent_of_input_order() {
        let samples = grid_days(2, 6);
        let day = NaiveDate::from_ymd_opt(2024, 6, 2).unwrap();
        let a = split(&samples, 1, day).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        let b = split(&rev, 1, day).unwrap();
        let map = |v: &[usize]| {
            let mut out: Vec<usize> = v.iter().map(|&i| samples.len() - 1 - i).collect();
            out.sort_unstable();
            out
        };
        assert_eq!(a.train, map(&b.train));
        assert_eq!(a.test1, map(&b.test1));
    }

    #[test]
    fn split_errors() {
        let samples = grid_days(1, 4);
        let day1 = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap();
        let day9 = NaiveDate::from_ymd_opt(2024, 6, 9).unwrap();
        assert!(matches!(split(&samples, 0, day1), Err(DatasetError::Config(_))));
        assert!(matches!(split(&samples, 0, day9), Err(DatasetError::Config(_))));
    }

    #[test]
    fn split_json_round_trip() {
        let samples = grid_days(2, 3);
        let s = split(&samples, 9, NaiveDate::from_ymd_opt(2024, 6, 2).unwrap()).unwrap();
        assert_eq!(SplitIndices::from_json(&s.to_json()).unwrap(), s);
        assert!(s.to_json().contains("\"holdout_day\": \"2024-06-02\""));
    }
}
