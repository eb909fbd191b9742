//! Closed-form synthetic daylight: window images and illuminance triples
//! that stand in for field measurements.
//!
//! Every quantity is a deterministic function of the corpus seed and the
//! calendar date, so corpora are reproducible and each day can be generated
//! independently.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate, NaiveDateTime, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_stem, DatasetError, ImageBank, Sample, CSV_HEADER, TIMESTAMP_FORMAT};
use crate::features::{preprocess_image, FeatureError, MaskConfig, RawImage};

/// The two window openings as normalized `(x0, y0, x1, y1)` rectangles.
pub const WINDOW_RECTS: [[f64; 4]; 2] = [[0.10, 0.30, 0.45, 0.75], [0.55, 0.30, 0.90, 0.75]];

const CANVAS: f64 = 10.0;

/// Sensor positions `(id, X, D)`: rows run from the window (ids 1-4) to the
/// back of the room (ids 13-16); within a row X decreases.
pub fn sensor_grid() -> Vec<(u8, f64, f64)> {
    const XS: [f64; 4] = [5.8, 4.3, 2.8, 1.3];
    const DS: [f64; 4] = [1.5, 3.0, 4.5, 6.0];
    let mut out = Vec::with_capacity(16);
    for (di, &d) in DS.iter().enumerate() {
        for (xi, &x) in XS.iter().enumerate() {
            out.push(((di * 4 + xi + 1) as u8, x, d));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sunrise_min: f64,
    pub sunset_min: f64,
    pub peak_lux: f64,
    pub depth_coeff: f64,
    pub lateral_coeff: f64,
    pub exp_s: f64,
    pub exp_h: f64,
    pub exp_e: f64,
    pub ratio_h: f64,
    pub ratio_e: f64,
    /// Relative sigma of multiplicative target noise; 0 disables.
    pub noise_sigma: f64,
    /// Additive per-pixel Gaussian noise in gray levels; 0 disables.
    pub pixel_noise: f64,
    pub cloud_min: f64,
    pub cloud_max: f64,
    pub clear_sky: bool,
    pub image_size: usize,
    pub cadence_min: u32,
    pub work_start_min: u32,
    pub work_end_min: u32,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sunrise_min: 360.0,
            sunset_min: 1080.0,
            peak_lux: 2000.0,
            depth_coeff: 0.6,
            lateral_coeff: 0.03,
            exp_s: 1.2,
            exp_h: 1.0,
            exp_e: 1.1,
            ratio_h: 0.45,
            ratio_e: 0.35,
            noise_sigma: 0.02,
            pixel_noise: 2.0,
            cloud_min: 0.3,
            cloud_max: 1.0,
            clear_sky: false,
            image_size: 128,
            cadence_min: 5,
            work_start_min: 480,
            work_end_min: 1020,
            start_date: NaiveDate::from_ymd_opt(2024, 6, 3).expect("valid date"),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.pixel_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if !(self.sunrise_min < self.work_start_min as f64
            && self.work_start_min <= self.work_end_min
            && (self.work_end_min as f64) < self.sunset_min)
        {
            return bad("daylight must span the working window".into());
        }
        let coeffs = [
            self.peak_lux,
            self.depth_coeff,
            self.lateral_coeff,
            self.exp_s,
            self.exp_h,
            self.exp_e,
            self.ratio_h,
            self.ratio_e,
        ];
        if coeffs.iter().any(|&c| !(c > 0.0)) {
            return bad("all oracle coefficients must be positive".into());
        }
        if self.lateral_coeff * crate::features::ROOM_WIDTH >= 1.0 {
            return bad("lateral coefficient makes the lateral factor non-positive".into());
        }
        if !(0.0 < self.cloud_min && self.cloud_min <= self.cloud_max && self.cloud_max <= 1.0) {
            return bad("cloud bounds must satisfy 0 < min <= max <= 1".into());
        }
        if self.noise_sigma < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if self.image_size == 0 || self.cadence_min == 0 {
            return bad("image size and cadence must be positive".into());
        }
        Ok(())
    }

    /// Capture minutes of one working day, both ends included.
    pub fn ticks(&self) -> Vec<u32> {
        (self.work_start_min..=self.work_end_min).step_by(self.cadence_min as usize).collect()
    }

    pub fn window_mask(&self) -> MaskConfig {
        MaskConfig::from_rects(&WINDOW_RECTS)
    }

    pub fn day(&self, index: u64) -> NaiveDate {
        self.start_date.checked_add_days(Days::new(index)).expect("date in range")
    }
}

/// Diurnal sun factor: a half sine between sunrise and sunset, zero outside.
pub fn sun_factor(t: f64, cfg: &SynthConfig) -> f64 {
    if t <= cfg.sunrise_min || t >= cfg.sunset_min {
        return 0.0;
    }
    (PI * (t - cfg.sunrise_min) / (cfg.sunset_min - cfg.sunrise_min)).sin().clamp(0.0, 1.0)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the per-day random stream.
pub fn day_seed(seed: u64, date: NaiveDate) -> u64 {
    let ordinal = date.signed_duration_since(NaiveDate::MIN).num_days() as u64;
    splitmix64(splitmix64(seed) ^ ordinal)
}

/// Cloud phases drawn once per day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayWeather {
    pub phi1: f64,
    pub phi2: f64,
}

impl DayWeather {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { phi1: rng.random::<f64>() * 2.0 * PI, phi2: rng.random::<f64>() * 2.0 * PI }
    }
}

pub fn cloud_factor(t: f64, weather: &DayWeather, cfg: &SynthConfig) -> f64 {
    if cfg.clear_sky {
        return 1.0;
    }
    let w = 2.0 * PI * t / 1440.0;
    let c = 0.65 + 0.35 * (3.0 * w + weather.phi1).sin() * (7.0 * w + weather.phi2).sin();
    c.clamp(cfg.cloud_min, cfg.cloud_max)
}

/// Noise-free `(Eh, Es, Ee)` in lux at minute `t`, position `(x, d)`, cloud
/// factor `c`.
pub fn oracle_illuminance(t: f64, x: f64, d: f64, c: f64, cfg: &SynthConfig) -> [f64; 3] {
    let s = sun_factor(t, cfg);
    let depth = 1.0 / (1.0 + cfg.depth_coeff * d).powi(2);
    let lateral = 1.0 - cfg.lateral_coeff * x;
    let lateral_east = 1.0 - cfg.lateral_coeff * (crate::features::ROOM_WIDTH - x);
    let e0 = cfg.peak_lux;
    let es = e0 * s.powf(cfg.exp_s) * c * depth * lateral;
    let eh = cfg.ratio_h * e0 * s.powf(cfg.exp_h) * c * depth * lateral;
    let ee = cfg.ratio_e * e0 * s.powf(cfg.exp_e) * c * depth * lateral_east;
    [eh, es, ee]
}

/// Multiplies each value by `1 + sigma * eta`, clamped at zero.
pub fn apply_noise<R: Rng + ?Sized>(values: [f64; 3], sigma: f64, rng: &mut R) -> [f64; 3] {
    if sigma == 0.0 {
        return values;
    }
    values.map(|v| {
        let eta: f64 = rng.sample(StandardNormal);
        (v * (1.0 + sigma * eta)).max(0.0)
    })
}

/// Base window gray level for sun factor `s` and cloud factor `c`.
pub fn window_intensity(s: f64, c: f64) -> f64 {
    (255.0 * (0.15 + 0.85 * s * c).min(1.0)).round()
}

/// Renders the ceiling-camera view: a dark canvas with two bright window
/// openings whose level tracks `s * c`, brighter at the top (+10%) than at
/// the bottom (-10%).
pub fn render_window_image<R: Rng + ?Sized>(s: f64, c: f64, cfg: &SynthConfig, rng: &mut R) -> RawImage {
    let n = cfg.image_size;
    let base = window_intensity(s, c);
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        let y = (r as f64 + 0.5) / n as f64;
        for col in 0..n {
            let x = (col as f64 + 0.5) / n as f64;
            let mut v = CANVAS;
            for &[x0, y0, x1, y1] in &WINDOW_RECTS {
                if x >= x0 && x < x1 && y >= y0 && y < y1 {
                    let depth = (y - y0) / (y1 - y0);
                    v = base * (1.0 + 0.1 * (1.0 - 2.0 * depth));
                }
            }
            if cfg.pixel_noise > 0.0 {
                let eta: f64 = rng.sample(StandardNormal);
                v += cfg.pixel_noise * eta;
            }
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage::gray(n, n, data)
}

/// One capture instant of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthTick {
    pub timestamp: NaiveDateTime,
    pub minute: u32,
    pub cloud: f64,
    pub image: RawImage,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub ticks: Vec<SynthTick>,
    /// Sorted by (timestamp, sensor_id); `image_ref` is the file name the
    /// tick's image is written under.
    pub samples: Vec<Sample>,
    pub sample_tick: Vec<usize>,
}

impl SynthCorpus {
    /// Preprocesses the tick images in memory.
    pub fn image_bank(&self, size: usize) -> Result<ImageBank, FeatureError> {
        let mask = self.config.window_mask();
        let images = self
            .ticks
            .par_iter()
            .map(|t| preprocess_image(&t.image, &mask, size))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ImageBank::from_parts(size, images, self.sample_tick.clone()))
    }
}

fn synthesize_day(cfg: &SynthConfig, date: NaiveDate) -> (Vec<SynthTick>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(day_seed(cfg.seed, date));
    let weather = DayWeather::draw(&mut rng);
    let grid = sensor_grid();
    let mut ticks = Vec::new();
    let mut samples = Vec::new();
    for minute in cfg.ticks() {
        let t = minute as f64;
        let time = NaiveTime::from_hms_opt(minute / 60, minute % 60, 0).expect("minute of day");
        let timestamp = date.and_time(time);
        let cloud = cloud_factor(t, &weather, cfg);
        let image = render_window_image(sun_factor(t, cfg), cloud, cfg, &mut rng);
        let image_ref = PathBuf::from(format!("{}.pgm", image_stem(&timestamp)));
        for &(sensor_id, x, d) in &grid {
            let targets = apply_noise(oracle_illuminance(t, x, d, cloud, cfg), cfg.noise_sigma, &mut rng);
            samples.push(Sample { timestamp, sensor_id, x, d, image_ref: image_ref.clone(), targets });
        }
        ticks.push(SynthTick { timestamp, minute, cloud, image });
    }
    (ticks, samples)
}

/// Generates `days` consecutive days in memory.
pub fn synthesize(days: u64, cfg: &SynthConfig) -> Result<SynthCorpus, DatasetError> {
    cfg.validate()?;
    let per_day: Vec<_> = (0..days).into_par_iter().map(|i| synthesize_day(cfg, cfg.day(i))).collect();
    let mut ticks = Vec::new();
    let mut samples = Vec::new();
    let mut sample_tick = Vec::new();
    for (day_ticks, day_samples) in per_day {
        let per_tick = day_samples.len() / day_ticks.len().max(1);
        for (k, _) in day_samples.iter().enumerate() {
            sample_tick.push(ticks.len() + k / per_tick);
        }
        ticks.extend(day_ticks);
        samples.extend(day_samples);
    }
    Ok(SynthCorpus { config: cfg.clone(), ticks, samples, sample_tick })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub days: u64,
    pub rows: usize,
    pub images: usize,
}

/// Manifest written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub summary: CorpusSummary,
}

fn format_row(s: &Sample) -> String {
    format!(
        "{},{},{:.1},{:.1},{},{},{}",
        s.timestamp.format(TIMESTAMP_FORMAT),
        s.sensor_id,
        s.x,
        s.d,
        s.targets[0],
        s.targets[1],
        s.targets[2]
    )
}

/// Writes `samples.csv`, `images/img_*.pgm`, `mask.json` and `manifest.json`
/// under `out_dir`.
pub fn generate_corpus(days: u64, cfg: &SynthConfig, out_dir: &Path) -> Result<SynthManifest, DatasetError> {
    if days == 0 {
        return Err(DatasetError::Config("need at least one day".into()));
    }
    let corpus = synthesize(days, cfg)?;
    write_corpus(&corpus, days, out_dir)
}

pub fn write_corpus(corpus: &SynthCorpus, days: u64, out_dir: &Path) -> Result<SynthManifest, DatasetError> {
    let io = |p: &Path, e: std::io::Error| DatasetError::Io { path: p.to_path_buf(), source: e };
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io(&images, e))?;

    corpus.ticks.par_iter().try_for_each(|tick| {
        let p = images.join(format!("{}.pgm", image_stem(&tick.timestamp)));
        fs::write(&p, tick.image.to_pgm()).map_err(|e| io(&p, e))
    })?;

    let csv_path = out_dir.join("samples.csv");
    let mut csv = String::with_capacity(corpus.samples.len() * 64);
    csv.push_str(&CSV_HEADER.join(","));
    csv.push('\n');
    for s in &corpus.samples {
        csv.push_str(&format_row(s));
        csv.push('\n');
    }
    fs::File::create(&csv_path)
        .and_then(|mut f| f.write_all(csv.as_bytes()))
        .map_err(|e| io(&csv_path, e))?;

    let mask_path = out_dir.join("mask.json");
    let mask = serde_json::to_string_pretty(&corpus.config.window_mask()).expect("mask serializes");
    fs::write(&mask_path, mask + "\n").map_err(|e| io(&mask_path, e))?;

    let manifest = SynthManifest {
        config: corpus.config.clone(),
        seed: corpus.config.seed,
        summary: CorpusSummary { days, rows: corpus.samples.len(), images: corpus.ticks.len() },
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| io(&manifest_path, e))?;
    Ok(manifest)
}
