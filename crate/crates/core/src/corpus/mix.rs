use crate::audio::{mean_square, Waveform};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A mixture and the components it was built from, both after any
/// anti-clipping rescale, so `mixed = speech + noise` sample by sample.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixed: Waveform,
    pub speech: Vec<f32>,
    pub noise: Vec<f32>,
    /// Noise gain `a` before clipping protection.
    pub gain: f64,
    /// Factor applied to the whole mixture to keep the peak at or below 1
    /// (1 when no clipping would occur).
    pub clip_scale: f64,
    /// Start of the noise segment within the noise stream.
    pub offset: usize,
}

impl Mixture {
    /// 10 log10 of the power ratio of the stored components.
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (mean_square(&self.speech) / mean_square(&self.noise)).log10()
    }
}

/// Noise gain that puts `noise` at `snr_db` below `signal`, powers being mean squares.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds `noise` to `signal` at `snr_db`. The noise is cropped from a seeded
/// offset when longer than the signal, otherwise tiled cyclically from it.
pub fn mix_at_snr(
    signal: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut Rng,
) -> Result<Mixture> {
    if noise.samples.is_empty() {
        return Err(Error::UndefinedSnr("noise is empty"));
    }
    if signal.samples.is_empty() {
        return Err(Error::UndefinedSnr("signal is empty"));
    }
    let n = signal.len();
    let offset = rng.below(noise.len());
    let segment: Vec<f32> = (0..n)
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();
    let ps = signal.power();
    let pn = mean_square(&segment);
    if ps == 0.0 {
        return Err(Error::UndefinedSnr("signal is all zeros"));
    }
    if pn == 0.0 {
        return Err(Error::UndefinedSnr("noise is all zeros"));
    }
    let gain = snr_gain(ps, pn, snr_db);
    let mixed: Vec<f64> = signal
        .samples
        .iter()
        .zip(&segment)
        .map(|(&s, &v)| s as f64 + gain * v as f64)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clip_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let speech: Vec<f32> = signal
        .samples
        .iter()
        .map(|&s| (s as f64 * clip_scale) as f32)
        .collect();
    let noise_part: Vec<f32> = segment
        .iter()
        .map(|&v| (v as f64 * gain * clip_scale) as f32)
        .collect();
    let mixed = Waveform::new(
        mixed
            .iter()
            .map(|v| ((v * clip_scale) as f32).clamp(-1.0, 1.0))
            .collect(),
    )?;
    Ok(Mixture {
        mixed,
        speech,
        noise: noise_part,
        gain,
        clip_scale,
        offset,
    })
}
