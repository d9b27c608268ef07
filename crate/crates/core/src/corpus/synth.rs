//! Synthetic stand-in corpus: class-specific three-partial tokens and four
//! noise scenarios.

use std::f64::consts::PI;
use std::path::Path;

use super::manifest::{Manifest, NoiseType, UtteranceRecord, NUM_CLASSES, TRAIN_SNRS};
use super::mix::{mix_at_snr, Mixture};
use crate::audio::{save_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Partial frequencies (Hz) per class. Every pair of classes differs in at
/// least one partial.
pub const CLASS_PARTIALS: [[f64; 3]; NUM_CLASSES] = [
    [300.0, 1000.0, 2600.0],
    [300.0, 1400.0, 3100.0],
    [300.0, 1800.0, 2600.0],
    [300.0, 2200.0, 3100.0],
    [500.0, 1000.0, 3100.0],
    [500.0, 1400.0, 2600.0],
    [500.0, 1800.0, 3100.0],
    [500.0, 2200.0, 2600.0],
    [700.0, 1000.0, 2600.0],
    [700.0, 1400.0, 3100.0],
    [700.0, 1800.0, 2600.0],
];
const PARTIAL_AMPS: [f64; 3] = [1.0, 0.5, 0.25];
pub const JITTER: f64 = 0.02;
pub const MIN_SECONDS: f64 = 0.5;
pub const MAX_SECONDS: f64 = 0.8;
const NOISE_SECONDS: f64 = 2.0;
pub const BABBLE_BURSTS: usize = 24;

/// How many tokens each class gets in each mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthCount {
    PerClass(usize),
    /// Spread over the classes as evenly as possible, lower ids taking the remainder.
    TotalPerMode(usize),
}

impl SynthCount {
    pub fn per_class(self) -> Result<[usize; NUM_CLASSES]> {
        let counts = match self {
            SynthCount::PerClass(n) => [n; NUM_CLASSES],
            SynthCount::TotalPerMode(total) => {
                let mut c = [total / NUM_CLASSES; NUM_CLASSES];
                for slot in c.iter_mut().take(total % NUM_CLASSES) {
                    *slot += 1;
                }
                c
            }
        };
        if counts.contains(&0) {
            return Err(Error::Config("every class needs at least one token".into()));
        }
        Ok(counts)
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub count: SynthCount,
    /// SNR levels cycled through by the noisy set.
    pub snrs: Vec<i32>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(count: SynthCount, seed: u64) -> Self {
        Self {
            count,
            snrs: TRAIN_SNRS.to_vec(),
            seed,
        }
    }
}

/// One class token: three jittered partials under a Hann envelope.
pub fn synth_token(label: usize, rng: &mut Rng) -> Waveform {
    let seconds = rng.uniform_range(MIN_SECONDS, MAX_SECONDS);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let level = rng.uniform_range(0.2, 0.5) / PARTIAL_AMPS.iter().sum::<f64>();
    let partials: Vec<(f64, f64, f64)> = CLASS_PARTIALS[label]
        .iter()
        .zip(PARTIAL_AMPS)
        .map(|(&f, a)| {
            let f = f * (1.0 + rng.uniform_range(-JITTER, JITTER));
            (f, a, rng.uniform_range(0.0, 2.0 * PI))
        })
        .collect();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = (PI * i as f64 / (n - 1) as f64).sin().powi(2);
            let s: f64 = partials
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum();
            (level * env * s) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

/// A noise stream of `len` samples for one scenario.
pub fn synth_noise(kind: NoiseType, len: usize, rng: &mut Rng) -> Waveform {
    let samples: Vec<f64> = match kind {
        NoiseType::None => vec![0.0; len],
        NoiseType::Subway => {
            // rumble plus periodic rail-joint impulses
            let mut x: Vec<f64> = (0..len).map(|_| 0.3 * rng.normal()).collect();
            let period = 600 + rng.below(400);
            let mut at = rng.below(period);
            while at < len {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                for k in 0..40.min(len - at) {
                    x[at + k] += sign * 1.5 * (-(k as f64) / 8.0).exp();
                }
                at += period;
            }
            x
        }
        NoiseType::Babble => {
            let mut x = vec![0.0; len];
            for _ in 0..BABBLE_BURSTS {
                let f = rng.uniform_range(120.0, 1200.0);
                let dur = (rng.uniform_range(0.1, 0.4) * SAMPLE_RATE as f64) as usize;
                let start = rng.below(len);
                let amp = rng.uniform_range(0.3, 1.0);
                let ph = rng.uniform_range(0.0, 2.0 * PI);
                for k in 0..dur.min(len - start) {
                    let env = (PI * k as f64 / dur as f64).sin().powi(2);
                    let t = k as f64 / SAMPLE_RATE as f64;
                    x[start + k] += amp
                        * env
                        * ((2.0 * PI * f * t + ph).sin() + 0.5 * (4.0 * PI * f * t + ph).sin());
                }
            }
            x
        }
        NoiseType::Car => {
            let mut y = 0.0;
            (0..len)
                .map(|_| {
                    y = 0.95 * y + rng.normal();
                    y
                })
                .collect()
        }
        NoiseType::Exhibition => {
            // Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = rng.normal();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
    };
    let peak = samples
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    Waveform {
        samples: samples.iter().map(|v| (0.5 * v / peak) as f32).collect(),
        sample_rate: SAMPLE_RATE,
    }
}

/// A fresh token of `label` mixed with a fresh noise stream, all drawn from `rng`.
pub fn synth_noisy(label: usize, noise: NoiseType, snr_db: i32, rng: &mut Rng) -> Result<Mixture> {
    let token = synth_token(label, rng);
    let stream = synth_noise(noise, (NOISE_SECONDS * SAMPLE_RATE as f64) as usize, rng);
    mix_at_snr(&token, &stream, snr_db as f64, rng)
}

/// Planned records in generation order; record `i` draws from `split(seed, i)`.
pub fn plan(cfg: &SynthConfig) -> Result<Vec<UtteranceRecord>> {
    if cfg.snrs.is_empty() {
        return Err(Error::Config("synth: no SNR levels".into()));
    }
    let counts = cfg.count.per_class()?;
    let mut out = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for j in 0..n {
            out.push(UtteranceRecord::clean(
                format!("clean/c{label:02}_{j:04}.wav"),
                label,
            ));
        }
    }
    for (label, &n) in counts.iter().enumerate() {
        for j in 0..n {
            let noise = NoiseType::SCENARIOS[j % 4];
            let snr = cfg.snrs[(j / 4) % cfg.snrs.len()];
            let tag = if snr < 0 {
                format!("m{}", -snr)
            } else {
                snr.to_string()
            };
            out.push(UtteranceRecord::noisy(
                format!("noisy/c{label:02}_{j:04}_{noise}_{tag}.wav"),
                label,
                noise,
                snr,
            ));
        }
    }
    Ok(out)
}

/// Audio for record `index` of a plan.
pub fn render(record: &UtteranceRecord, index: usize, seed: u64) -> Result<Waveform> {
    let mut rng = Rng::new(seed).split(index as u64);
    match record.snr_db {
        None => Ok(synth_token(record.label, &mut rng)),
        Some(snr) => Ok(synth_noisy(record.label, record.noise_type, snr, &mut rng)?.mixed),
    }
}

/// Writes every WAV plus `manifest.csv` under `out_dir`.
pub fn synth_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    let records = plan(cfg)?;
    for sub in ["clean", "noisy"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, r) in records.iter().enumerate() {
        save_wav(&out_dir.join(&r.path), &render(r, i, cfg.seed)?)?;
    }
    let manifest = Manifest::new(out_dir, records);
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
