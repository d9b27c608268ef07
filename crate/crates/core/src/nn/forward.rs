use super::params::ParamStore;
use super::spec::{needs_projection, Layer, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchNormState, Mode, Padding, Tape, Tensor, Var};

/// Intermediate values of one residual or bottleneck block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub shortcut: Var,
    pub branch: Var,
    /// `shortcut + branch`, before the final ReLU.
    pub sum: Var,
    pub out: Var,
}

pub struct ForwardOutput {
    pub tape: Tape,
    pub logits: Var,
    /// Trainable, unfrozen parameters and their tape variables.
    pub params: Vec<(String, Var)>,
    /// Updated running statistics keyed by batch-norm prefix (train mode only).
    pub bn_updates: Vec<(String, BatchNormState)>,
    pub blocks: Vec<BlockTrace>,
}

impl ForwardOutput {
    /// Writes the collected running statistics back into `params`, skipping
    /// frozen entries.
    pub fn apply_bn_updates(&self, params: &mut ParamStore) -> Result<()> {
        for (prefix, state) in &self.bn_updates {
            for (suffix, value) in [("running_mean", &state.mean), ("running_var", &state.var)] {
                let name = format!("{prefix}.{suffix}");
                if !params.is_frozen(&name) {
                    params.get_mut(&name)?.data_mut().copy_from_slice(value);
                }
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    params: &'a ParamStore,
    mode: Mode,
    tape: Tape,
    vars: Vec<(String, Var)>,
    bn_updates: Vec<(String, BatchNormState)>,
}

impl Builder<'_> {
    fn leaf(&mut self, name: &str) -> Result<Var> {
        let entry = self
            .params
            .entry(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if entry.trainable && !entry.frozen {
            let v = self.tape.param(entry.tensor.clone());
            self.vars.push((name.to_string(), v));
            Ok(v)
        } else {
            Ok(self.tape.constant(entry.tensor.clone()))
        }
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.leaf(&format!("{prefix}.weight"))?;
        let b = self.leaf(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), stride, Padding::Same)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma_name = format!("{prefix}.gamma");
        let gamma = self.leaf(&gamma_name)?;
        let beta = self.leaf(&format!("{prefix}.beta"))?;
        let state = BatchNormState {
            mean: self
                .params
                .get(&format!("{prefix}.running_mean"))?
                .data()
                .to_vec(),
            var: self
                .params
                .get(&format!("{prefix}.running_var"))?
                .data()
                .to_vec(),
        };
        // a frozen layer keeps its statistics and normalizes with them
        let mode = if self.params.is_frozen(&gamma_name) {
            Mode::Infer
        } else {
            self.mode
        };
        let (y, update) = self.tape.batchnorm(x, gamma, beta, &state, mode)?;
        if let Some(update) = update {
            self.bn_updates.push((prefix.to_string(), update));
        }
        Ok(y)
    }

    fn conv_bn(&mut self, x: Var, conv: &str, bn: &str, stride: usize) -> Result<Var> {
        let y = self.conv(x, conv, stride)?;
        self.bn(y, bn)
    }
}

/// Runs `batch` (`N x C x H x W`) through the network on a fresh tape.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Tensor,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != spec.input_shape {
        let mut want = vec![0];
        want.extend_from_slice(&spec.input_shape);
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: shape.to_vec(),
            right: want,
        });
    }
    let mut b = Builder {
        params,
        mode,
        tape: Tape::new(),
        vars: Vec::new(),
        bn_updates: Vec::new(),
    };
    let mut blocks = Vec::new();
    let mut x = b.tape.constant(batch.clone());
    let mut channels = spec.input_shape[0];
    for layer in &spec.layers {
        x = match layer {
            Layer::Conv {
                name,
                filters,
                stride,
                batch_norm,
                relu,
                ..
            } => {
                let mut y = b.conv(x, &format!("{name}.conv"), *stride)?;
                if *batch_norm {
                    y = b.bn(y, &format!("{name}.bn"))?;
                }
                channels = *filters;
                if *relu {
                    b.tape.relu(y)?
                } else {
                    y
                }
            }
            Layer::MaxPool { pool } => b.tape.maxpool2d(x, *pool)?,
            Layer::Residual { name, filters } => {
                let h = b.conv_bn(x, &format!("{name}.conv1"), &format!("{name}.bn1"), 1)?;
                let h = b.tape.relu(h)?;
                let branch = b.conv_bn(h, &format!("{name}.conv2"), &format!("{name}.bn2"), 1)?;
                let shortcut = b.conv_bn(
                    x,
                    &format!("{name}.shortcut"),
                    &format!("{name}.shortcut_bn"),
                    1,
                )?;
                let sum = b.tape.add(shortcut, branch)?;
                let out = b.tape.relu(sum)?;
                blocks.push(BlockTrace {
                    shortcut,
                    branch,
                    sum,
                    out,
                });
                channels = *filters;
                out
            }
            Layer::Bottleneck {
                name,
                mid: _,
                out: out_c,
                stride,
            } => {
                let h = b.conv_bn(x, &format!("{name}.conv1"), &format!("{name}.bn1"), 1)?;
                let h = b.tape.relu(h)?;
                let h = b.conv_bn(h, &format!("{name}.conv2"), &format!("{name}.bn2"), *stride)?;
                let h = b.tape.relu(h)?;
                let branch = b.conv_bn(h, &format!("{name}.conv3"), &format!("{name}.bn3"), 1)?;
                let shortcut = if needs_projection(channels, *out_c, *stride) {
                    b.conv_bn(
                        x,
                        &format!("{name}.shortcut"),
                        &format!("{name}.shortcut_bn"),
                        *stride,
                    )?
                } else {
                    x
                };
                let sum = b.tape.add(shortcut, branch)?;
                let out = b.tape.relu(sum)?;
                blocks.push(BlockTrace {
                    shortcut,
                    branch,
                    sum,
                    out,
                });
                channels = *out_c;
                out
            }
            Layer::GlobalAvgPool => b.tape.global_avg_pool(x)?,
            Layer::Flatten => b.tape.flatten(x)?,
            Layer::Dense { name, relu, .. } => {
                let w = b.leaf(&format!("{name}.weight"))?;
                let bias = b.leaf(&format!("{name}.bias"))?;
                let y = b.tape.matmul(x, w)?;
                let y = b.tape.add_bias(y, bias)?;
                if *relu {
                    b.tape.relu(y)?
                } else {
                    y
                }
            }
            Layer::Dropout { rate } => b.tape.dropout(x, *rate, rng, mode)?,
        };
    }
    Ok(ForwardOutput {
        tape: b.tape,
        logits: x,
        params: b.vars,
        bn_updates: b.bn_updates,
        blocks,
    })
}

/// Inference-mode logits for `batch`.
pub fn predict(spec: &ModelSpec, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    // dropout is the identity in infer mode, so the generator is never drawn from
    let mut rng = Rng::new(0);
    let mut out = forward(spec, params, batch, Mode::Infer, &mut rng)?;
    Ok(out.tape.take_value(out.logits))
}

/// Index of the largest value in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
