//! Multimodal CNN-MLP prediction of indoor workplane illuminance from
//! window images and temporal-spatial features.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use dataset::{load_data_dir, split, Corpus, DatasetError, ImageBank, Sample, SplitIndices};
pub use eval::{evaluate, pearson_matrix, CorrelationMatrix, EvalError, EvalReport, Predictions};
pub use features::{preprocess_image, FeatureError, FeatureVector, ImageTensor, MaskConfig, RawImage, ScalerParams, SplitKind};
pub use model::{count_params, InputBatch, Model, ModelConfig, ModelError};
pub use nn::{NnError, Tensor};
pub use synth::{generate_corpus, synthesize, SynthConfig};
pub use trainer::{run_sweep, sweep_configs, train, TrainError, TrainHistory, TrainingData};
