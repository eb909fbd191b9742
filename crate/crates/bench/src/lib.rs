//! Benchmark fixtures shared by the bench targets.

use daylight_core::trainer::TrainingData;
use daylight_core::{split, synthesize, SynthConfig};

/// Two synthetic days preprocessed at `size`, with the second day held out.
pub fn training_data(size: usize) -> TrainingData {
    let cfg = SynthConfig { image_size: size, seed: 1, ..SynthConfig::default() };
    let corpus = synthesize(2, &cfg).expect("synthetic corpus");
    let bank = corpus.image_bank(size).expect("image bank");
    let splits = split(&corpus.samples, 1, cfg.day(1)).expect("split");
    TrainingData::prepare(&corpus.samples, bank, cfg.window_mask(), splits).expect("training data")
}
