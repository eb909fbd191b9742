//! The multimodal CNN-MLP: an image encoder and a structured-feature branch
//! fused by concatenation, followed by a dense regression head.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageBank;
use crate::features::ImageTensor;
use crate::nn::{NnError, Scalar, Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 1;
pub const FEATURE_WIDTH: usize = 4;
pub const OUTPUT_WIDTH: usize = 3;
const KERNEL: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

fn default_channels() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_embed() -> usize {
    32
}
fn default_hidden() -> Vec<usize> {
    vec![128, 64, 32]
}
fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    64
}
fn default_patience() -> usize {
    12
}
fn default_max_epochs() -> usize {
    200
}
fn default_image_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_channels")]
    pub cnn_channels: Vec<usize>,
    #[serde(default = "default_embed")]
    pub struct_embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_head(default_hidden(), 0.0)
    }
}

impl ModelConfig {
    pub fn with_head(mlp_hidden: Vec<usize>, dropout: f64) -> Self {
        Self {
            cnn_channels: default_channels(),
            struct_embed_dim: default_embed(),
            mlp_hidden,
            dropout,
            lr: default_lr(),
            batch_size: default_batch(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            seed: 0,
            image_size: default_image_size(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.cnn_channels.len() != 4 || self.cnn_channels.contains(&0) {
            return bad(format!("cnn_channels must be 4 positive widths, got {:?}", self.cnn_channels));
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return bad(format!("mlp_hidden must be non-empty and positive, got {:?}", self.mlp_hidden));
        }
        if self.struct_embed_dim == 0 {
            return bad("struct_embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.cnn_channels[3]
    }

    pub fn fused_dim(&self) -> usize {
        self.embedding_dim() + self.struct_embed_dim
    }
}

/// Name, shape and fan-in of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

fn layer_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names: Vec<String> = (1..=4).map(|i| format!("conv{i}")).collect();
    names.push("struct".into());
    names.extend((1..=cfg.mlp_hidden.len()).map(|i| format!("head{i}")));
    names.push("out".into());
    names
}

/// Every trainable tensor in declaration order: weight then bias per layer.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let names = layer_names(cfg);
    let mut push = |layer: &str, weight: Vec<usize>, out: usize| {
        let fan_in = weight[1..].iter().product();
        specs.push(ParamSpec { name: format!("{layer}.weight"), shape: weight, fan_in });
        specs.push(ParamSpec { name: format!("{layer}.bias"), shape: vec![out], fan_in });
    };
    let mut c = IMAGE_CHANNELS;
    for (i, &o) in cfg.cnn_channels.iter().enumerate() {
        push(&names[i], vec![o, c, KERNEL, KERNEL], o);
        c = o;
    }
    push(&names[4], vec![cfg.struct_embed_dim, FEATURE_WIDTH], cfg.struct_embed_dim);
    let mut n = cfg.fused_dim();
    for (j, &h) in cfg.mlp_hidden.iter().enumerate() {
        push(&names[5 + j], vec![h, n], h);
        n = h;
    }
    push("out", vec![OUTPUT_WIDTH, n], OUTPUT_WIDTH);
    specs
}

/// Trainable scalar count per layer (weights plus bias).
pub fn layer_param_counts(cfg: &ModelConfig) -> Vec<(String, usize)> {
    param_specs(cfg)
        .chunks(2)
        .map(|pair| (pair[0].name.trim_end_matches(".weight").to_string(), pair[0].len() + pair[1].len()))
        .collect()
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::len).sum()
}

/// Head-only count: the fusion-to-output dense chain.
pub fn count_head_params(cfg: &ModelConfig) -> usize {
    layer_param_counts(cfg)
        .iter()
        .filter(|(n, _)| n.starts_with("head") || n == "out")
        .map(|(_, c)| c)
        .sum()
}

/// Stage name and activation shape, recorded during a forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Inputs for one forward pass. The CNN runs once per distinct image;
/// `gather[i]` picks the image row for sample `i`.
#[derive(Debug, Clone)]
pub struct InputBatch<T> {
    pub images: Tensor<T>,
    pub gather: Vec<usize>,
    pub features: Tensor<T>,
}

impl<T: Scalar> InputBatch<T> {
    /// Collects rows `samples` from `bank`; `features[i]` holds the
    /// standardized feature vector of sample `i`.
    pub fn from_bank(bank: &ImageBank, features: &[[f64; 4]], samples: &[usize]) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut unique: Vec<&ImageTensor> = Vec::new();
        let gather = samples
            .iter()
            .map(|&i| {
                let img = bank.sample_image[i];
                *slot.entry(img).or_insert_with(|| {
                    unique.push(&bank.images[img]);
                    unique.len() - 1
                })
            })
            .collect();
        let size = bank.size;
        let mut pix = Vec::with_capacity(unique.len() * size * size);
        for img in &unique {
            pix.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        let images = Tensor::new(&[unique.len(), IMAGE_CHANNELS, size, size], pix)?;
        let feats = samples.iter().flat_map(|&i| features[i].iter().map(|&v| T::of(v))).collect();
        let features = Tensor::new(&[samples.len(), FEATURE_WIDTH], feats)?;
        Ok(Self { images, gather, features })
    }

    pub fn len(&self) -> usize {
        self.gather.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gather.is_empty()
    }
}

/// Result of recording a forward pass on a tape.
#[derive(Debug)]
pub struct Recorded {
    pub output: Var,
    pub params: Vec<Var>,
    pub images: Var,
    pub features: Var,
    pub trace: ShapeTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, drawn
    /// from a generator seeded by `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = specs
            .iter()
            .map(|s| {
                if s.is_bias() {
                    Tensor::zeros(&s.shape)
                } else {
                    let bound = (6.0 / s.fan_in as f64).sqrt();
                    let data = (0..s.len()).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                    Tensor::new(&s.shape, data).expect("spec shape")
                }
            })
            .collect();
        Ok(Self { config: config.clone(), specs, params })
    }

    /// Rebuilds a model from stored tensors, checking them against the
    /// config-derived architecture.
    pub fn from_params(config: &ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != params.len() {
            return Err(ModelError::Format(format!("expected {} tensors, got {}", specs.len(), params.len())));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(ModelError::Format(format!("{} has shape {:?}, expected {:?}", s.name, p.shape(), s.shape)));
            }
        }
        Ok(Self { config: config.clone(), specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), specs: self.specs.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Records the forward pass. Parameters become gradient-tracked leaves;
    /// `rng` drives dropout and is untouched in eval mode.
    pub fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        batch: &InputBatch<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Recorded, ModelError> {
        let b = batch.len();
        let fs = batch.features.shape();
        if fs != [b, FEATURE_WIDTH] {
            return Err(NnError::Dimension(format!("features must be [{b}, {FEATURE_WIDTH}], got {fs:?}")).into());
        }
        let is = batch.images.shape();
        let p = self.config.image_size;
        if is.len() != 4 || is[1..] != [IMAGE_CHANNELS, p, p] {
            return Err(NnError::Dimension(format!("images must be [U, 1, {p}, {p}], got {is:?}")).into());
        }
        let params: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let images = tape.leaf(batch.images.clone());
        let features = tape.leaf(batch.features.clone());
        let (output, trace) = self.record_graph(tape, &params, images, features, &batch.gather, training, rng)?;
        Ok(Recorded { output, params, images, features, trace })
    }

    /// Records the network over already-recorded parameter, image and
    /// feature vars; `params` follow [`param_specs`] order.
    #[allow(clippy::too_many_arguments)]
    pub fn record_graph<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        images: Var,
        features: Var,
        gather: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, ShapeTrace), ModelError> {
        if params.len() != self.specs.len() {
            return Err(ModelError::Config(format!("expected {} parameter vars, got {}", self.specs.len(), params.len())));
        }
        let mut trace = ShapeTrace::new();
        trace.push(("input".into(), tape.value(images).shape().to_vec()));

        let mut x = images;
        for i in 0..4 {
            let name = format!("conv{}", i + 1);
            // relu(maxpool(x)) equals maxpool(relu(x)) in value and gradient
            // (first-index ties included), so conv, pool and relu run fused.
            x = tape.conv_pool_relu(x, params[2 * i], params[2 * i + 1], 1, &name)?;
            trace.push((name, tape.value(x).shape().to_vec()));
        }
        x = tape.global_avg_pool(x)?;
        x = tape.gather_rows(x, gather)?;
        trace.push(("embedding".into(), tape.value(x).shape().to_vec()));

        let mut s = tape.dense(features, params[8], params[9])?;
        tape.ensure_finite(s, "struct")?;
        s = tape.relu(s);
        trace.push(("struct".into(), tape.value(s).shape().to_vec()));

        let mut h = tape.concat(x, s)?;
        trace.push(("fusion".into(), tape.value(h).shape().to_vec()));
        for j in 0..self.config.mlp_hidden.len() {
            let name = format!("head{}", j + 1);
            h = tape.dense(h, params[10 + 2 * j], params[11 + 2 * j])?;
            tape.ensure_finite(h, &name)?;
            h = tape.relu(h);
            h = tape.dropout(h, self.config.dropout, training, rng)?;
            trace.push((name, tape.value(h).shape().to_vec()));
        }
        let n = params.len();
        let output = tape.dense(h, params[n - 2], params[n - 1])?;
        tape.ensure_finite(output, "out")?;
        trace.push(("out".into(), tape.value(output).shape().to_vec()));
        Ok((output, trace))
    }

    /// Eval-mode forward returning `[B, 3]` standardized predictions.
    pub fn forward(&self, batch: &InputBatch<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let rec = self.record(&mut tape, batch, false, &mut unused)?;
        Ok(tape.into_value(rec.output))
    }

    /// Eval-mode predictions for `samples`, processed in fixed chunks so
    /// memory stays bounded on large splits.
    pub fn predict(&self, bank: &ImageBank, features: &[[f64; 4]], samples: &[usize]) -> Result<Vec<[f64; 3]>, ModelError> {
        const EVAL_CHUNK: usize = 256;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch = InputBatch::from_bank(bank, features, chunk)?;
            let y = self.forward(&batch)?;
            out.extend(y.data().chunks(OUTPUT_WIDTH).map(|r| [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]));
        }
        Ok(out)
    }

    /// FNV-1a hash over every parameter bit pattern.
    pub fn weight_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
