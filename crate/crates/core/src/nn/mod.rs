//! Network description, parameter storage and the forward pass.

mod check;
mod forward;
mod params;
mod spec;

pub use check::{model_gradients, model_loss, NamedGrads};
pub use forward::{argmax_rows, forward, predict, BlockTrace, ForwardOutput};
pub use params::{prefix_matches, ParamEntry, ParamStore};
pub use spec::{
    plain_cnn_spec, source_spec, target_spec, ActShape, Layer, ModelSpec, ParamKind, ParamSlot,
    SOURCE_DEFAULT_CLASSES, SOURCE_STAGES, TARGET_DENSE_UNITS, TARGET_DROPOUT, TARGET_FILTERS,
};

use crate::error::Result;

/// Target network and freshly initialized parameters.
pub fn build_target(
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<(ModelSpec, ParamStore)> {
    let spec = target_spec(input_shape, num_classes)?;
    let params = ParamStore::init(&spec, seed)?;
    Ok((spec, params))
}

/// Source (bottleneck) network and freshly initialized parameters.
pub fn build_source(
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<(ModelSpec, ParamStore)> {
    let spec = source_spec(input_shape, num_classes)?;
    let params = ParamStore::init(&spec, seed)?;
    Ok((spec, params))
}

/// Plain CNN baseline and freshly initialized parameters.
pub fn build_plain_cnn(
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<(ModelSpec, ParamStore)> {
    let spec = plain_cnn_spec(input_shape, num_classes)?;
    let params = ParamStore::init(&spec, seed)?;
    Ok((spec, params))
}
