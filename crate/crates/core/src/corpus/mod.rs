//! Manifests, SNR-controlled mixing, the synthetic corpus and splits.

mod dataset;
mod manifest;
mod mix;
mod split;
pub mod synth;

pub use dataset::{load_raw, Dataset};
pub use manifest::{
    relabel_for_binary, Manifest, Mode, NoiseType, UtteranceRecord, ALL_SNRS, BINARY_CLASS_NAMES,
    CLASS_NAMES, MANIFEST_HEADER, NUM_CLASSES, TRAIN_SNRS,
};
pub use mix::{mix_at_snr, snr_gain, Mixture};
pub use split::{split, Split, TEST_FRACTION};
pub use synth::{synth_corpus, SynthConfig, SynthCount};
