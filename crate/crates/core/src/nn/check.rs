use super::forward::forward;
use super::params::ParamStore;
use super::spec::ModelSpec;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Mode, Tensor};

/// Mean cross-entropy of the train-mode forward pass. Dropout draws from a
/// fresh generator seeded with `dropout_seed`, so repeated calls share a mask.
pub fn model_loss(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<f64> {
    let mut rng = Rng::new(dropout_seed);
    let mut out = forward(spec, params, batch, Mode::Train, &mut rng)?;
    let (loss, _) = out.tape.softmax_xent(out.logits, labels)?;
    Ok(out.tape.scalar(loss))
}

pub type NamedGrads = Vec<(String, Vec<f32>)>;

/// Loss and backpropagated gradient of every trainable, unfrozen tensor.
pub fn model_gradients(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<(f64, NamedGrads)> {
    let mut rng = Rng::new(dropout_seed);
    let mut out = forward(spec, params, batch, Mode::Train, &mut rng)?;
    let (loss, _) = out.tape.softmax_xent(out.logits, labels)?;
    out.tape.backward(loss)?;
    let grads = out
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
    Ok((out.tape.scalar(loss), grads))
}
