use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TARGET_FILTERS: [usize; 3] = [64, 128, 256];
pub const TARGET_DENSE_UNITS: usize = 128;
pub const TARGET_DROPOUT: f32 = 0.5;
/// Bottleneck stages as (blocks, mid filters, out filters).
pub const SOURCE_STAGES: [(usize, usize, usize); 4] =
    [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)];
pub const SOURCE_DEFAULT_CLASSES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Same-padded convolution, optionally followed by batch norm and ReLU.
    Conv {
        name: String,
        filters: usize,
        kernel: usize,
        stride: usize,
        batch_norm: bool,
        relu: bool,
    },
    MaxPool {
        pool: usize,
    },
    /// Two 3x3 conv + batch-norm stages and a 1x1 projection shortcut with
    /// batch norm; ReLU after the first stage and after the sum.
    Residual {
        name: String,
        filters: usize,
    },
    /// 1x1 -> 3x3 (strided) -> 1x1 bottleneck; projection shortcut when the
    /// channel count or resolution changes, identity otherwise.
    Bottleneck {
        name: String,
        mid: usize,
        out: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        name: String,
        units: usize,
        relu: bool,
    },
    Dropout {
        rate: f32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: String,
    /// channels x mels x frames
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Activation shape after a layer: `[C, H, W]` or `[units]`.
pub type ActShape = Vec<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

fn conv_slots(out: &mut Vec<ParamSlot>, prefix: &str, c_in: usize, filters: usize, k: usize) {
    out.push(ParamSlot {
        name: format!("{prefix}.weight"),
        shape: vec![filters, c_in, k, k],
        kind: ParamKind::Weight {
            fan_in: c_in * k * k,
        },
    });
    out.push(ParamSlot {
        name: format!("{prefix}.bias"),
        shape: vec![filters],
        kind: ParamKind::Bias,
    });
}

fn bn_slots(out: &mut Vec<ParamSlot>, prefix: &str, c: usize) {
    for (suffix, kind) in [
        ("gamma", ParamKind::Gamma),
        ("beta", ParamKind::Beta),
        ("running_mean", ParamKind::RunningMean),
        ("running_var", ParamKind::RunningVar),
    ] {
        out.push(ParamSlot {
            name: format!("{prefix}.{suffix}"),
            shape: vec![c],
            kind,
        });
    }
}

pub(crate) fn needs_projection(c_in: usize, out: usize, stride: usize) -> bool {
    c_in != out || stride != 1
}

impl ModelSpec {
    /// Propagates shapes through the layers, returning the activation shape
    /// after each one.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let bad = |msg: String| Error::InvalidModel(format!("{}: {msg}", self.arch));
        if self.input_shape.contains(&0) {
            return Err(bad(format!("empty input shape {:?}", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(bad(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let mut cur: ActShape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        let spatial = |cur: &ActShape, what: &str| -> Result<(usize, usize, usize)> {
            if cur.len() != 3 {
                return Err(bad(format!("{what} needs a C x H x W input, got {cur:?}")));
            }
            Ok((cur[0], cur[1], cur[2]))
        };
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                    ..
                } => {
                    let (_, h, w) = spatial(&cur, "conv")?;
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad(format!("layer {i}: zero conv extent")));
                    }
                    vec![*filters, h.div_ceil(*stride), w.div_ceil(*stride)]
                }
                Layer::MaxPool { pool } => {
                    let (c, h, w) = spatial(&cur, "maxpool")?;
                    if *pool == 0 || h / pool == 0 || w / pool == 0 {
                        return Err(bad(format!(
                            "layer {i}: pool {pool} collapses {h}x{w} to nothing"
                        )));
                    }
                    vec![c, h / pool, w / pool]
                }
                Layer::Residual { filters, .. } => {
                    let (_, h, w) = spatial(&cur, "residual block")?;
                    vec![*filters, h, w]
                }
                Layer::Bottleneck { out, stride, .. } => {
                    let (_, h, w) = spatial(&cur, "bottleneck")?;
                    vec![*out, h.div_ceil(*stride), w.div_ceil(*stride)]
                }
                Layer::GlobalAvgPool => {
                    let (c, _, _) = spatial(&cur, "global average pool")?;
                    vec![c]
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Dense { units, .. } => {
                    if cur.len() != 1 {
                        return Err(bad(format!(
                            "layer {i}: dense needs a flat input, got {cur:?}"
                        )));
                    }
                    vec![*units]
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::InvalidRate(*rate));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        match self.layers.last() {
            Some(Layer::Dense { units, relu, .. }) if *units == self.num_classes && !relu => {}
            _ => {
                return Err(bad(format!(
                    "must end in a linear dense head of {} units",
                    self.num_classes
                )))
            }
        }
        Ok(out)
    }

    /// Every parameter and running statistic the spec needs, in canonical order.
    pub fn param_slots(&self) -> Result<Vec<ParamSlot>> {
        let shapes = self.shapes()?;
        let mut slots = Vec::new();
        let mut cur: ActShape = self.input_shape.to_vec();
        for (layer, next) in self.layers.iter().zip(&shapes) {
            match layer {
                Layer::Conv {
                    name,
                    filters,
                    kernel,
                    batch_norm,
                    ..
                } => {
                    conv_slots(
                        &mut slots,
                        &format!("{name}.conv"),
                        cur[0],
                        *filters,
                        *kernel,
                    );
                    if *batch_norm {
                        bn_slots(&mut slots, &format!("{name}.bn"), *filters);
                    }
                }
                Layer::Residual { name, filters } => {
                    conv_slots(&mut slots, &format!("{name}.conv1"), cur[0], *filters, 3);
                    bn_slots(&mut slots, &format!("{name}.bn1"), *filters);
                    conv_slots(&mut slots, &format!("{name}.conv2"), *filters, *filters, 3);
                    bn_slots(&mut slots, &format!("{name}.bn2"), *filters);
                    conv_slots(&mut slots, &format!("{name}.shortcut"), cur[0], *filters, 1);
                    bn_slots(&mut slots, &format!("{name}.shortcut_bn"), *filters);
                }
                Layer::Bottleneck {
                    name,
                    mid,
                    out,
                    stride,
                } => {
                    conv_slots(&mut slots, &format!("{name}.conv1"), cur[0], *mid, 1);
                    bn_slots(&mut slots, &format!("{name}.bn1"), *mid);
                    conv_slots(&mut slots, &format!("{name}.conv2"), *mid, *mid, 3);
                    bn_slots(&mut slots, &format!("{name}.bn2"), *mid);
                    conv_slots(&mut slots, &format!("{name}.conv3"), *mid, *out, 1);
                    bn_slots(&mut slots, &format!("{name}.bn3"), *out);
                    if needs_projection(cur[0], *out, *stride) {
                        conv_slots(&mut slots, &format!("{name}.shortcut"), cur[0], *out, 1);
                        bn_slots(&mut slots, &format!("{name}.shortcut_bn"), *out);
                    }
                }
                Layer::Dense { name, units, .. } => {
                    slots.push(ParamSlot {
                        name: format!("{name}.weight"),
                        shape: vec![cur[0], *units],
                        kind: ParamKind::Weight { fan_in: cur[0] },
                    });
                    slots.push(ParamSlot {
                        name: format!("{name}.bias"),
                        shape: vec![*units],
                        kind: ParamKind::Bias,
                    });
                }
                Layer::MaxPool { .. }
                | Layer::GlobalAvgPool
                | Layer::Flatten
                | Layer::Dropout { .. } => {}
            }
            cur = next.clone();
        }
        Ok(slots)
    }

    /// Width of the vector entering the first dense layer.
    pub fn flatten_width(&self) -> Result<Option<usize>> {
        let shapes = self.shapes()?;
        let mut cur: ActShape = self.input_shape.to_vec();
        for (layer, next) in self.layers.iter().zip(&shapes) {
            if matches!(layer, Layer::Dense { .. }) {
                return Ok(Some(cur[0]));
            }
            cur = next.clone();
        }
        Ok(None)
    }

    /// Block counts of consecutive bottleneck stages.
    pub fn stage_block_counts(&self) -> Vec<usize> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for layer in &self.layers {
            if let Layer::Bottleneck { name, .. } = layer {
                let stage = name.split('.').next().unwrap_or(name).to_string();
                match counts.last_mut() {
                    Some((s, n)) if *s == stage => *n += 1,
                    _ => counts.push((stage, 1)),
                }
            }
        }
        counts.into_iter().map(|(_, n)| n).collect()
    }

    /// Name of the final dense layer.
    pub fn head_name(&self) -> Option<&str> {
        match self.layers.last() {
            Some(Layer::Dense { name, .. }) => Some(name),
            _ => None,
        }
    }

    /// SHA-256 over the canonical JSON rendering, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s)
            .map_err(|e| Error::InvalidModel(format!("bad spec json: {e}")))?;
        spec.shapes()?;
        Ok(spec)
    }
}

/// Target network: conv 64/k3 + pool, residual blocks of 64, 128 and
/// 256 filters each followed by pool-by-2, dense 128, dropout 0.5, linear head.
pub fn target_spec(input_shape: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    let mut layers = vec![
        Layer::Conv {
            name: "stem".into(),
            filters: 64,
            kernel: 3,
            stride: 1,
            batch_norm: true,
            relu: true,
        },
        Layer::MaxPool { pool: 2 },
    ];
    for (i, filters) in TARGET_FILTERS.iter().enumerate() {
        layers.push(Layer::Residual {
            name: format!("block{}", i + 1),
            filters: *filters,
        });
        layers.push(Layer::MaxPool { pool: 2 });
    }
    layers.extend([
        Layer::Flatten,
        Layer::Dense {
            name: "dense1".into(),
            units: TARGET_DENSE_UNITS,
            relu: true,
        },
        Layer::Dropout {
            rate: TARGET_DROPOUT,
        },
        Layer::Dense {
            name: "head".into(),
            units: num_classes,
            relu: false,
        },
    ]);
    let spec = ModelSpec {
        arch: "target".into(),
        input_shape,
        num_classes,
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

/// ResNet-50 layout: 7x7/64 stride-2 stem + pool, bottleneck stages of
/// (3, 4, 6, 3) blocks, global average pool, dense head.
pub fn source_spec(input_shape: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    if input_shape[1] < 32 || input_shape[2] < 32 {
        return Err(Error::InvalidModel(format!(
            "source: input {input_shape:?} smaller than 32x32"
        )));
    }
    let mut layers = vec![
        Layer::Conv {
            name: "stem".into(),
            filters: 64,
            kernel: 7,
            stride: 2,
            batch_norm: true,
            relu: true,
        },
        Layer::MaxPool { pool: 2 },
    ];
    for (s, (blocks, mid, out)) in SOURCE_STAGES.iter().enumerate() {
        for b in 0..*blocks {
            layers.push(Layer::Bottleneck {
                name: format!("stage{}.block{}", s + 1, b + 1),
                mid: *mid,
                out: *out,
                stride: if b == 0 && s > 0 { 2 } else { 1 },
            });
        }
    }
    layers.extend([
        Layer::GlobalAvgPool,
        Layer::Dense {
            name: "head".into(),
            units: num_classes,
            relu: false,
        },
    ]);
    let spec = ModelSpec {
        arch: "source".into(),
        input_shape,
        num_classes,
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

/// Target layout with each residual block replaced by two plain conv layers.
pub fn plain_cnn_spec(input_shape: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    let target = target_spec(input_shape, num_classes)?;
    let layers = target
        .layers
        .into_iter()
        .flat_map(|l| match l {
            Layer::Residual { name, filters } => ["a", "b"]
                .iter()
                .map(|s| Layer::Conv {
                    name: format!("{name}{s}"),
                    filters,
                    kernel: 3,
                    stride: 1,
                    batch_norm: true,
                    relu: true,
                })
                .collect::<Vec<_>>(),
            other => vec![other],
        })
        .collect();
    let spec = ModelSpec {
        arch: "plain_cnn".into(),
        input_shape,
        num_classes,
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}
