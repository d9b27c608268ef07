use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub preemphasis: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            frames: 64,
            frame_len: 200,
            hop: 80,
            n_fft: 256,
            preemphasis: 0.97,
            f_min: 0.0,
            f_max: 4000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("features: {m}")));
        if self.n_mels == 0 || self.frames == 0 || self.hop == 0 {
            return bad("n_mels, frames and hop must be positive");
        }
        if self.frame_len == 0 || self.frame_len > self.n_fft {
            return bad("frame_len must be in 1..=n_fft");
        }
        if !(0.0..self.f_max).contains(&self.f_min) || self.f_max > SAMPLE_RATE as f64 / 2.0 {
            return bad("need 0 <= f_min < f_max <= 4000");
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Model input shape `[1, n_mels, frames]`.
    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.n_mels, self.frames]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge and center frequencies in Hz: `n_mels + 2` points equally spaced in mel.
pub fn mel_points(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters over the `n_fft / 2 + 1` spectrum bins, peak 1 at each
/// band center, linear in Hz between neighbouring points.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let pts = mel_points(cfg);
    let bins = cfg.n_fft / 2 + 1;
    let bin_hz = SAMPLE_RATE as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|b| {
            let (l, c, r) = (pts[b], pts[b + 1], pts[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Reusable FFT plan, window and filterbank for one configuration.
pub struct MelExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len;
        let window = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            window,
            filters: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Log-mel energies before normalization, `n_mels x T` with
    /// `T = 1 + (len - frame_len) / hop`.
    pub fn log_mel_raw(&self, w: &Waveform) -> Result<Tensor> {
        let cfg = &self.cfg;
        let x = &w.samples;
        if x.len() < cfg.frame_len {
            return Err(Error::TooShort {
                len: x.len(),
                min: cfg.frame_len,
            });
        }
        let mut emph = Vec::with_capacity(x.len());
        emph.push(x[0] as f64);
        for i in 1..x.len() {
            emph.push(x[i] as f64 - cfg.preemphasis * x[i - 1] as f64);
        }
        let t = 1 + (x.len() - cfg.frame_len) / cfg.hop;
        let bins = cfg.n_fft / 2 + 1;
        let mut out = vec![0.0f32; cfg.n_mels * t];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0f64; bins];
        for f in 0..t {
            let frame = &emph[f * cfg.hop..f * cfg.hop + cfg.frame_len];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(
                    if i < cfg.frame_len {
                        frame[i] * self.window[i]
                    } else {
                        0.0
                    },
                    0.0,
                );
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[m * t + f] = (e + cfg.log_floor).ln() as f32;
            }
        }
        Tensor::new(vec![cfg.n_mels, t], out)
    }

    /// Normalized, fixed-size `1 x n_mels x frames` model input.
    pub fn features(&self, w: &Waveform, stats: &FeatureStats) -> Result<Tensor> {
        let raw = self.log_mel_raw(w)?;
        let norm = stats.apply(&raw)?;
        fit_frames(&norm, self.cfg.frames)?.reshape(&self.cfg.input_shape())
    }
}

/// Zero-pads at the end or center-crops the time axis of an `M x T` matrix.
pub fn fit_frames(x: &Tensor, frames: usize) -> Result<Tensor> {
    let (m, t) = (x.shape()[0], x.shape()[1]);
    let start = t.saturating_sub(frames) / 2;
    let keep = t.min(frames);
    let mut out = vec![0.0f32; m * frames];
    for b in 0..m {
        out[b * frames..b * frames + keep]
            .copy_from_slice(&x.data()[b * t + start..b * t + start + keep]);
    }
    Tensor::new(vec![m, frames], out)
}

/// Per-band mean and standard deviation of raw log-mel values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

const MIN_STD: f64 = 1e-6;

impl FeatureStats {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// Pools every frame of every matrix (training split only).
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in mats {
            let (bands, t) = (m.shape()[0], m.shape()[1]);
            if sum.is_empty() {
                sum = vec![0.0; bands];
                sq = vec![0.0; bands];
            } else if sum.len() != bands {
                return Err(Error::ShapeMismatch {
                    op: "feature stats",
                    left: vec![sum.len()],
                    right: m.shape().to_vec(),
                });
            }
            for b in 0..bands {
                for &v in &m.data()[b * t..(b + 1) * t] {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            count += t;
        }
        if count == 0 {
            return Err(Error::Manifest(
                "no frames to fit feature statistics".into(),
            ));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(MIN_STD)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        let (m, t) = (raw.shape()[0], raw.shape()[1]);
        if m != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "feature normalization",
                left: raw.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        let data = raw
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = i / t;
                ((v as f64 - self.mean[b] as f64) / self.std[b] as f64) as f32
            })
            .collect();
        Tensor::new(vec![m, t], data)
    }
}
