use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Mode, NoiseType, UtteranceRecord};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, predict, ModelSpec, ParamStore};

const PREDICT_CHUNK: usize = 64;

/// Recording condition an utterance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub mode: Mode,
    pub noise_type: NoiseType,
    pub snr_db: Option<i32>,
}

impl Condition {
    pub fn of(r: &UtteranceRecord) -> Self {
        Self {
            mode: r.mode,
            noise_type: r.noise_type,
            snr_db: r.snr_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    pub count: usize,
    pub correct: usize,
}

impl ConditionRow {
    pub fn accuracy_pct(&self) -> f64 {
        pct(self.correct, self.count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// One row per condition present, in condition order.
    pub conditions: Vec<ConditionRow>,
    pub total: usize,
    pub correct: usize,
    /// Percent correct.
    pub accuracy: f64,
    /// Percent word error; for one word per utterance this is `100 - accuracy`.
    pub wer: f64,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Word error rate of isolated-word recognition: each utterance is a single
/// word, so substitutions are the only possible errors.
pub fn wer(report: &EvalReport) -> f64 {
    wer_from_accuracy(report.accuracy)
}

pub fn wer_from_accuracy(accuracy: f64) -> f64 {
    100.0 - accuracy
}

impl EvalReport {
    /// Aggregates predictions in record order.
    pub fn from_predictions(
        records: &[UtteranceRecord],
        truth: &[usize],
        pred: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("nothing to evaluate".into()));
        }
        if records.len() != truth.len() || truth.len() != pred.len() {
            return Err(Error::Manifest(format!(
                "{} records, {} labels, {} predictions",
                records.len(),
                truth.len(),
                pred.len()
            )));
        }
        let k = class_names.len();
        let mut confusion = vec![vec![0usize; k]; k];
        let mut rows: std::collections::BTreeMap<Condition, (usize, usize)> = Default::default();
        let mut correct = 0;
        for ((r, &t), &p) in records.iter().zip(truth).zip(pred) {
            if t >= k || p >= k {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes: k,
                });
            }
            confusion[t][p] += 1;
            let e = rows.entry(Condition::of(r)).or_default();
            e.0 += 1;
            if t == p {
                e.1 += 1;
                correct += 1;
            }
        }
        let accuracy = pct(correct, records.len());
        Ok(Self {
            class_names,
            confusion,
            conditions: rows
                .into_iter()
                .map(|(condition, (count, correct))| ConditionRow {
                    condition,
                    count,
                    correct,
                })
                .collect(),
            total: records.len(),
            correct,
            accuracy,
            wer: wer_from_accuracy(accuracy),
        })
    }

    /// Truth histogram.
    pub fn row_sums(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Prediction histogram.
    pub fn col_sums(&self) -> Vec<usize> {
        let k = self.confusion.len();
        (0..k)
            .map(|j| self.confusion.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn accuracy_from_confusion(&self) -> f64 {
        let diag: usize = (0..self.confusion.len())
            .map(|i| self.confusion[i][i])
            .sum();
        let total: usize = self.row_sums().iter().sum();
        pct(diag, total)
    }

    /// Count-weighted mean of per-condition accuracies.
    pub fn condition_weighted_accuracy(&self) -> f64 {
        let total: usize = self.conditions.iter().map(|c| c.count).sum();
        if total == 0 {
            return 0.0;
        }
        self.conditions
            .iter()
            .map(|c| c.accuracy_pct() * c.count as f64)
            .sum::<f64>()
            / total as f64
    }

    /// Accuracy over the rows selected by `keep`, `None` if none match.
    pub fn accuracy_where(&self, keep: impl Fn(&Condition) -> bool) -> Option<f64> {
        let (n, c) = self
            .conditions
            .iter()
            .filter(|r| keep(&r.condition))
            .fold((0, 0), |(n, c), r| (n + r.count, c + r.correct));
        (n > 0).then(|| pct(c, n))
    }
}

/// Inference-mode argmax class for each sample of `ds`, in order.
pub fn predict_dataset(spec: &ModelSpec, params: &ParamStore, ds: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let (x, _) = ds.batch(chunk)?;
        out.extend(argmax_rows(&predict(spec, params, &x)?));
    }
    Ok(out)
}

/// Runs the model over `ds` and aggregates the results.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamStore,
    ds: &Dataset,
    class_names: Vec<String>,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Manifest("nothing to evaluate".into()));
    }
    if class_names.len() != spec.num_classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            spec.num_classes
        )));
    }
    let pred = predict_dataset(spec, params, ds)?;
    EvalReport::from_predictions(&ds.records, &ds.labels, &pred, class_names)
}
