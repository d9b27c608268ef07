use std::collections::BTreeMap;

use super::spec::{ModelSpec, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Running statistics are stored alongside parameters but never receive gradients.
    pub trainable: bool,
    pub frozen: bool,
}

/// Named parameters and batch-norm running statistics, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// `prefix` matches a name equal to it or any name below it in the dotted path.
pub fn prefix_matches(prefix: &str, name: &str) -> bool {
    let p = prefix.trim_end_matches('.');
    !p.is_empty()
        && (name == p || (name.starts_with(p) && name.as_bytes().get(p.len()) == Some(&b'.')))
}

impl ParamStore {
    /// He-uniform weights, zero biases and betas, unit gammas, fresh running
    /// statistics. The linear head draws from `U(+-0.5/sqrt(fan_in))` so the
    /// initial prediction sits close to uniform. Each tensor draws from its
    /// own stream of `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let head_weight = spec.head_name().map(|h| format!("{h}.weight"));
        let mut entries = BTreeMap::new();
        for (i, slot) in spec.param_slots()?.into_iter().enumerate() {
            let tensor = match slot.kind {
                ParamKind::Weight { fan_in } => {
                    let gain = if head_weight.as_deref() == Some(&slot.name) {
                        0.25
                    } else {
                        6.0
                    };
                    let limit = (gain / fan_in as f64).sqrt();
                    let mut rng = root.split(i as u64);
                    Tensor::from_fn(&slot.shape, |_| rng.uniform_range(-limit, limit) as f32)
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {
                    Tensor::zeros(&slot.shape)
                }
                ParamKind::Gamma | ParamKind::RunningVar => Tensor::ones(&slot.shape),
            };
            entries.insert(
                slot.name,
                ParamEntry {
                    tensor,
                    trainable: slot.kind.trainable(),
                    frozen: false,
                },
            );
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                tensor,
                trainable,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.frozen)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Freezes every tensor under any of `prefixes`; returns how many matched.
    pub fn freeze_prefixes<S: AsRef<str>>(&mut self, prefixes: &[S]) -> usize {
        let mut count = 0;
        for (name, entry) in self.entries.iter_mut() {
            if prefixes.iter().any(|p| prefix_matches(p.as_ref(), name)) {
                entry.frozen = true;
                count += 1;
            }
        }
        count
    }

    pub fn unfreeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.frozen = false;
        }
    }

    /// Total element count, running statistics included.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Checks that every slot of `spec` is present with the right shape.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for slot in spec.param_slots()? {
            let t = self.get(&slot.name)?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "param store",
                    left: t.shape().to_vec(),
                    right: slot.shape,
                });
            }
        }
        Ok(())
    }

    /// True when every tensor under `names` matches `other` bit for bit.
    pub fn bitwise_eq_on<'a>(
        &self,
        other: &ParamStore,
        mut names: impl Iterator<Item = &'a str>,
    ) -> bool {
        names.all(|n| match (self.get(n), other.get(n)) {
            (Ok(a), Ok(b)) => a.bitwise_eq(b),
            _ => false,
        })
    }
}
