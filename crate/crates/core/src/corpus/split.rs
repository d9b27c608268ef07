use std::collections::BTreeMap;
use std::path::Path;

use super::manifest::{Manifest, Mode};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TEST_FRACTION: f64 = 0.40;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Manifest,
    pub test: Manifest,
}

/// Stratified split by (label, mode, snr): each stratum of size `m` sends
/// `round(m * test_fraction)` seeded-random records to test. Record order
/// within each side follows the input manifest.
pub fn split(manifest: &Manifest, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside [0, 1]"
        )));
    }
    for (label, &count) in manifest.histogram().iter().enumerate() {
        if count < 2 {
            return Err(Error::TooFewRecords { label, count });
        }
    }
    let mut strata: BTreeMap<(usize, Mode, Option<i32>), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        strata
            .entry((r.label, r.mode, r.snr_db))
            .or_default()
            .push(i);
    }
    let root = Rng::new(seed);
    let mut is_test = vec![false; manifest.len()];
    for (s, members) in strata.values().enumerate() {
        let mut m = members.clone();
        root.split(s as u64).shuffle(&mut m);
        let k = (m.len() as f64 * test_fraction).round() as usize;
        for &i in &m[..k] {
            is_test[i] = true;
        }
    }
    let pick = |want: bool| Manifest {
        root: manifest.root.clone(),
        records: manifest
            .records
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(r, _)| r.clone())
            .collect(),
        num_classes: manifest.num_classes,
    };
    Ok(Split {
        train: pick(false),
        test: pick(true),
    })
}

impl Split {
    /// Writes `train.csv` and `test.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.train.write(&dir.join("train.csv"))?;
        self.test.write(&dir.join("test.csv"))
    }
}
