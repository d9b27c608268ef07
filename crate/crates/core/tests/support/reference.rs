//! Naive f64 forward pass used as a finite-difference oracle for whole-model
//! gradients. Written independently of the tape: direct loops, no im2col.
//!
//! The first call records every ReLU mask and max-pool winner; later calls can
//! replay that pattern so central differences stay on the smooth piece of the
//! loss that contains the base point.

use resnet_asr::nn::{Layer, ModelSpec, ParamStore};
use resnet_asr::{Rng, Tensor};

#[derive(Clone, Debug, Default)]
pub struct Pattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

struct Act {
    shape: Vec<usize>,
    data: Vec<f64>,
}

struct Ctx<'a> {
    params: &'a ParamStore,
    record: bool,
    pattern: &'a mut Pattern,
    relu_i: usize,
    pool_i: usize,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Vec<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|_| panic!("missing {name}"))
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    fn conv(&self, x: &Act, prefix: &str, stride: usize) -> Act {
        let w = self.params.get(&format!("{prefix}.weight")).unwrap();
        let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let w: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
        let b = self.p(&format!("{prefix}.bias"));
        let (n, h, wd) = (x.shape[0], x.shape[2], x.shape[3]);
        assert_eq!(x.shape[1], ci);
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let pad_h = ((ho - 1) * stride + k).saturating_sub(h) / 2;
        let pad_w = ((wo - 1) * stride + k).saturating_sub(wd) / 2;
        // weights as [c][ky][kx][o] so the innermost loop runs over output channels
        let mut wt = vec![0.0; w.len()];
        for o in 0..co {
            for j in 0..ci * k * k {
                wt[j * co + o] = w[o * ci * k * k + j];
            }
        }
        let mut y = vec![0.0; n * co * ho * wo];
        let mut acc = vec![0.0; co];
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    acc.copy_from_slice(&b);
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data[((ni * ci + c) * h + iy as usize) * wd + ix as usize];
                                let col = &wt[((c * k + ky) * k + kx) * co..][..co];
                                for (a, wv) in acc.iter_mut().zip(col) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                    for (o, a) in acc.iter().enumerate() {
                        y[((ni * co + o) * ho + oy) * wo + ox] = *a;
                    }
                }
            }
        }
        Act {
            shape: vec![n, co, ho, wo],
            data: y,
        }
    }

    fn bn(&self, x: &Act, prefix: &str) -> Act {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        let (n, c) = (x.shape[0], x.shape[1]);
        let s: usize = x.shape[2..].iter().product();
        let m = (n * s) as f64;
        let mut y = x.data.clone();
        for ci in 0..c {
            let vals = || (0..n).flat_map(move |ni| (0..s).map(move |j| (ni * c + ci) * s + j));
            let mean = vals().map(|i| x.data[i]).sum::<f64>() / m;
            let var = vals().map(|i| (x.data[i] - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for i in vals() {
                y[i] = g[ci] * (x.data[i] - mean) * inv + b[ci];
            }
        }
        Act {
            shape: x.shape.clone(),
            data: y,
        }
    }

    fn relu(&mut self, mut x: Act) -> Act {
        let mask: Vec<bool> = if self.record {
            let m: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
            self.pattern.relu.push(m.clone());
            m
        } else {
            self.pattern.relu[self.relu_i].clone()
        };
        self.relu_i += 1;
        for (v, keep) in x.data.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        x
    }

    fn maxpool(&mut self, x: &Act, pool: usize) -> Act {
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (ho, wo) = (h / pool, w / pool);
        let mut winners = Vec::with_capacity(n * c * ho * wo);
        let mut y = Vec::with_capacity(n * c * ho * wo);
        for pl in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let slot = winners.len();
                    let best = if self.record {
                        let mut best = pl * h * w + oy * pool * w + ox * pool;
                        for ky in 0..pool {
                            for kx in 0..pool {
                                let i = pl * h * w + (oy * pool + ky) * w + ox * pool + kx;
                                if x.data[i] > x.data[best] {
                                    best = i;
                                }
                            }
                        }
                        best
                    } else {
                        self.pattern.pool[self.pool_i][slot]
                    };
                    winners.push(best);
                    y.push(x.data[best]);
                }
            }
        }
        if self.record {
            self.pattern.pool.push(winners);
        }
        self.pool_i += 1;
        Act {
            shape: vec![n, c, ho, wo],
            data: y,
        }
    }
}

/// Mean cross-entropy of the train-mode forward pass in f64. With `record`
/// the activation pattern is captured into `pattern`, otherwise replayed.
pub fn reference_loss(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
    pattern: &mut Pattern,
    record: bool,
) -> f64 {
    if record {
        *pattern = Pattern::default();
    }
    let mut ctx = Ctx {
        params,
        record,
        pattern,
        relu_i: 0,
        pool_i: 0,
    };
    let mut rng = Rng::new(dropout_seed);
    let mut x = Act {
        shape: batch.shape().to_vec(),
        data: batch.data().iter().map(|&v| v as f64).collect(),
    };
    for layer in &spec.layers {
        x = match layer {
            Layer::Conv {
                name,
                stride,
                batch_norm,
                relu,
                ..
            } => {
                let mut y = ctx.conv(&x, &format!("{name}.conv"), *stride);
                if *batch_norm {
                    y = ctx.bn(&y, &format!("{name}.bn"));
                }
                if *relu {
                    ctx.relu(y)
                } else {
                    y
                }
            }
            Layer::MaxPool { pool } => ctx.maxpool(&x, *pool),
            Layer::Residual { name, .. } => {
                let h = ctx.conv(&x, &format!("{name}.conv1"), 1);
                let h = ctx.bn(&h, &format!("{name}.bn1"));
                let h = ctx.relu(h);
                let h = ctx.conv(&h, &format!("{name}.conv2"), 1);
                let branch = ctx.bn(&h, &format!("{name}.bn2"));
                let s = ctx.conv(&x, &format!("{name}.shortcut"), 1);
                let shortcut = ctx.bn(&s, &format!("{name}.shortcut_bn"));
                let sum = Act {
                    shape: branch.shape.clone(),
                    data: branch
                        .data
                        .iter()
                        .zip(&shortcut.data)
                        .map(|(a, b)| a + b)
                        .collect(),
                };
                ctx.relu(sum)
            }
            Layer::GlobalAvgPool => {
                let (n, c) = (x.shape[0], x.shape[1]);
                let s: usize = x.shape[2..].iter().product();
                Act {
                    shape: vec![n, c],
                    data: x
                        .data
                        .chunks(s)
                        .map(|p| p.iter().sum::<f64>() / s as f64)
                        .collect(),
                }
            }
            Layer::Flatten => {
                let n = x.shape[0];
                let width = x.data.len() / n;
                Act {
                    shape: vec![n, width],
                    data: x.data,
                }
            }
            Layer::Dense { name, units, relu } => {
                let w = ctx.p(&format!("{name}.weight"));
                let b = ctx.p(&format!("{name}.bias"));
                let (n, k) = (x.shape[0], x.shape[1]);
                let mut y = vec![0.0; n * units];
                for ni in 0..n {
                    for u in 0..*units {
                        y[ni * units + u] = b[u]
                            + (0..k)
                                .map(|j| x.data[ni * k + j] * w[j * units + u])
                                .sum::<f64>();
                    }
                }
                let y = Act {
                    shape: vec![n, *units],
                    data: y,
                };
                if *relu {
                    ctx.relu(y)
                } else {
                    y
                }
            }
            Layer::Dropout { rate } => {
                let scale = 1.0 / (1.0 - *rate as f64);
                let data = x
                    .data
                    .iter()
                    .map(|v| {
                        if rng.uniform() < *rate as f64 {
                            0.0
                        } else {
                            v * scale
                        }
                    })
                    .collect();
                Act {
                    shape: x.shape,
                    data,
                }
            }
            Layer::Bottleneck { .. } => unimplemented!("reference covers the target layout"),
        };
    }
    let k = x.shape[1];
    let mut loss = 0.0;
    for (row, &label) in x.data.chunks(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    loss / labels.len() as f64
}

/// Tape gradients of every trainable tensor scored against central
/// differences of [`reference_loss`] with the base-point pattern replayed.
pub fn full_model_check(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
    opts: &resnet_asr::tensor::GradCheckOptions,
) -> Vec<(String, resnet_asr::tensor::GradCheckReport)> {
    let (tape_loss, grads) =
        resnet_asr::nn::model_gradients(spec, params, batch, labels, dropout_seed).unwrap();
    let mut pattern = Pattern::default();
    let base = reference_loss(
        spec,
        params,
        batch,
        labels,
        dropout_seed,
        &mut pattern,
        true,
    );
    assert!(
        (base - tape_loss).abs() <= 1e-4 * base.abs().max(1.0),
        "reference {base} vs tape {tape_loss}"
    );
    grads
        .into_iter()
        .map(|(name, analytic)| {
            let mut probe = params.clone();
            let report = resnet_asr::tensor::grad_check(
                |t| {
                    *probe.get_mut(&name)? = t.clone();
                    Ok(reference_loss(
                        spec,
                        &probe,
                        batch,
                        labels,
                        dropout_seed,
                        &mut pattern,
                        false,
                    ))
                },
                params.get(&name).unwrap(),
                &analytic,
                opts,
            )
            .unwrap();
            (name, report)
        })
        .collect()
}
