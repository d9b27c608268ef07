use super::manifest::{Manifest, UtteranceRecord};
use crate::audio::{fit_frames, load_wav, FeatureStats, MelExtractor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Model-ready inputs (`1 x mels x frames` each) with their labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub records: Vec<UtteranceRecord>,
    pub num_classes: usize,
}

/// Raw log-mel matrices for every record, in manifest order.
pub fn load_raw(manifest: &Manifest, ex: &MelExtractor) -> Result<Vec<Tensor>> {
    manifest
        .records
        .iter()
        .map(|r| ex.log_mel_raw(&load_wav(&manifest.resolve(r))?))
        .collect()
}

impl Dataset {
    /// Normalizes raw matrices with `stats` and fits them to the frame canvas.
    pub fn from_raw(
        manifest: &Manifest,
        raw: &[Tensor],
        stats: &FeatureStats,
        frames: usize,
    ) -> Result<Self> {
        if raw.len() != manifest.len() {
            return Err(Error::Manifest(format!(
                "{} feature matrices for {} records",
                raw.len(),
                manifest.len()
            )));
        }
        let inputs = raw
            .iter()
            .map(|m| {
                let t = fit_frames(&stats.apply(m)?, frames)?;
                let mels = t.shape()[0];
                t.reshape(&[1, mels, frames])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            labels: manifest.records.iter().map(|r| r.label).collect(),
            records: manifest.records.clone(),
            num_classes: manifest.num_classes,
        })
    }

    /// Loads audio and extracts normalized features in one go.
    pub fn load(manifest: &Manifest, ex: &MelExtractor, stats: &FeatureStats) -> Result<Self> {
        let raw = load_raw(manifest, ex)?;
        Self::from_raw(manifest, &raw, stats, ex.config().frames)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> Option<[usize; 3]> {
        self.inputs.first().map(|t| {
            let s = t.shape();
            [s[0], s[1], s[2]]
        })
    }

    /// Stacks the chosen samples into an `N x 1 x mels x frames` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<&Tensor> = idx.iter().map(|&i| &self.inputs[i]).collect();
        Ok((
            Tensor::stack(&items)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}
