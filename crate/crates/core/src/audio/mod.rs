//! 8 kHz PCM input and log-mel features.

mod mel;
mod wav;

pub use mel::{
    fit_frames, hz_to_mel, mel_filterbank, mel_points, mel_to_hz, FeatureConfig, FeatureStats,
    MelExtractor,
};
pub use wav::{load_wav, mean_square, quantize, quantized, save_wav, Waveform, SAMPLE_RATE};

use crate::error::Result;
use crate::tensor::Tensor;

/// Raw (unnormalized) log-mel matrix with the default extractor settings.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor> {
    MelExtractor::new(cfg)?.log_mel_raw(w)
}
