use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;
const PCM_SCALE: f32 = 32768.0;

/// Mono 8 kHz samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooShort { len: 0, min: 1 });
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean square over all samples.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }
}

pub fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

fn audio_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a RIFF/WAVE file holding 16-bit PCM, mono, 8000 Hz.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(
            path,
            format!(
                "unsupported codec: {:?} {}-bit, need 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    if spec.channels != 1 {
        return Err(audio_err(
            path,
            format!("unsupported channel count {}, need mono", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(audio_err(
            path,
            format!(
                "unsupported sample rate {} Hz, need {SAMPLE_RATE}",
                spec.sample_rate
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / PCM_SCALE))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| audio_err(path, format!("truncated payload: {e}")))?;
    if samples.is_empty() {
        return Err(audio_err(path, "no samples"));
    }
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Quantizes to 16-bit PCM (round to nearest, clamp) and writes mono 8 kHz.
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| audio_err(path, e.to_string()))?;
    for &s in &w.samples {
        writer
            .write_sample(quantize(s))
            .map_err(|e| audio_err(path, e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| audio_err(path, e.to_string()))
}

pub fn quantize(x: f32) -> i16 {
    (x as f64 * PCM_SCALE as f64)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// The waveform as it reads back after a 16-bit round trip.
pub fn quantized(w: &Waveform) -> Waveform {
    Waveform {
        samples: w
            .samples
            .iter()
            .map(|&s| quantize(s) as f32 / PCM_SCALE)
            .collect(),
        sample_rate: w.sample_rate,
    }
}
