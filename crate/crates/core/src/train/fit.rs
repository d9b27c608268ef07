use serde::Serialize;

use super::config::TrainConfig;
use super::sgd::sgd_step;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::predict_dataset;
use crate::nn::{forward, ModelSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::Mode;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Percent correct on the held-out set, when one is given.
    pub val_accuracy: Option<f64>,
}

/// Whether training proceeds after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Called after every epoch with the epoch's record and parameters.
pub type Observer<'a> = dyn FnMut(&EpochRecord, &ParamStore) -> Result<Flow> + 'a;

/// Number of tensors frozen for a fine-tuning run and its history.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    pub frozen: usize,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch SGD at `config.learning_rate`. Each epoch visits a seeded
/// shuffle; a trailing batch smaller than 2 is skipped. On a non-finite
/// activation, loss or gradient `params` is restored to the last completed
/// epoch and the error is returned.
pub fn train(
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<Vec<EpochRecord>> {
    run(
        spec,
        params,
        data,
        val,
        config,
        config.learning_rate,
        observer,
    )
}

/// Freezes `config.freeze_prefixes` and trains at the fine-tuning rate.
pub fn fine_tune(
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<FineTuneOutcome> {
    let frozen = params.freeze_prefixes(&config.freeze_prefixes);
    let history = run(
        spec,
        params,
        data,
        val,
        config,
        config.fine_tune_learning_rate,
        observer,
    )?;
    Ok(FineTuneOutcome { frozen, history })
}

fn check_data(spec: &ModelSpec, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Manifest(format!("{what} set is empty")));
    }
    if ds.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "{what} set has {} classes, model has {}",
            ds.num_classes, spec.num_classes
        )));
    }
    if ds.input_shape() != Some(spec.input_shape) {
        return Err(Error::ShapeMismatch {
            op: "dataset input",
            left: ds.input_shape().map(|s| s.to_vec()).unwrap_or_default(),
            right: spec.input_shape.to_vec(),
        });
    }
    Ok(())
}

fn run(
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    lr: f64,
    observer: &mut Observer<'_>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    params.validate(spec)?;
    check_data(spec, data, "training")?;
    if data.len() < 2 {
        return Err(Error::BatchTooSmall(data.len()));
    }
    if let Some(v) = val {
        check_data(spec, v, "validation")?;
    }
    let root = Rng::new(config.seed);
    let mut good = params.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.split(2 * epoch as u64).shuffle(&mut order);
        let mut dropout = root.split(2 * epoch as u64 + 1);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let step = batch_step(spec, params, data, idx, lr, &mut dropout);
            let loss = match step {
                Ok(l) if l.is_finite() => l,
                Ok(l) => {
                    *params = good;
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        batch: b,
                        loss: l,
                    });
                }
                Err(Error::NonFinite(_)) => {
                    *params = good;
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        batch: b,
                        loss: f64::NAN,
                    });
                }
                Err(e) => {
                    *params = good;
                    return Err(e);
                }
            };
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let val_accuracy = match val {
            Some(v) => Some(accuracy(spec, params, v)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / seen as f64,
            val_accuracy,
        };
        let flow = observer(&rec, params)?;
        history.push(rec);
        if flow == Flow::Stop {
            break;
        }
        good = params.clone();
    }
    Ok(history)
}

/// One forward/backward/update on the samples `idx`; returns the batch loss.
/// A non-finite loss is returned without touching `params`.
fn batch_step(
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &Dataset,
    idx: &[usize],
    lr: f64,
    dropout: &mut Rng,
) -> Result<f64> {
    let (x, y) = data.batch(idx)?;
    let mut out = forward(spec, params, &x, Mode::Train, dropout)?;
    let (loss_var, _) = out.tape.softmax_xent(out.logits, &y)?;
    let loss = out.tape.scalar(loss_var);
    if !loss.is_finite() {
        return Ok(loss);
    }
    out.tape.backward(loss_var)?;
    let grads: Vec<(String, Vec<f32>)> = out
        .params
        .iter()
        .map(|(name, var)| {
            let g = out
                .tape
                .grad(*var)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; out.tape.value(*var).numel()]);
            (name.clone(), g)
        })
        .collect();
    sgd_step(params, &grads, lr)?;
    out.apply_bn_updates(params)?;
    Ok(loss)
}

/// Percent of `ds` classified correctly in inference mode.
pub fn accuracy(spec: &ModelSpec, params: &ParamStore, ds: &Dataset) -> Result<f64> {
    let pred = predict_dataset(spec, params, ds)?;
    let correct = pred.iter().zip(&ds.labels).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / ds.len().max(1) as f64)
}
