use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::FeatureStats;
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub const META_SPEC: &str = "spec";
pub const META_SPEC_DIGEST: &str = "spec_digest";
pub const META_FROZEN: &str = "frozen";
pub const FEATURE_MEAN: &str = "features.mean";
pub const FEATURE_STD: &str = "features.std";

/// Named tensors plus string metadata, serialized in a fixed little-endian
/// layout so that equal checkpoints produce equal bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Every parameter and running statistic, the feature normalization if
    /// given, and the spec with its digest.
    pub fn from_model(spec: &ModelSpec, params: &ParamStore, stats: Option<&FeatureStats>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, e)| (n.to_string(), e.tensor.clone()))
            .collect();
        if let Some(s) = stats {
            let n = s.mean.len();
            tensors.push((
                FEATURE_MEAN.into(),
                Tensor::new(vec![n], s.mean.clone()).expect("1-d"),
            ));
            tensors.push((
                FEATURE_STD.into(),
                Tensor::new(vec![n], s.std.clone()).expect("1-d"),
            ));
        }
        let frozen: Vec<&str> = params
            .iter()
            .filter(|(_, e)| e.frozen)
            .map(|(n, _)| n)
            .collect();
        let mut metadata = BTreeMap::new();
        metadata.insert(META_SPEC.into(), spec.to_json());
        metadata.insert(META_SPEC_DIGEST.into(), spec.digest());
        metadata.insert(
            META_FROZEN.into(),
            serde_json::to_string(&frozen).expect("names serialize"),
        );
        Self { tensors, metadata }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The stored spec, after checking it against the stored digest.
    pub fn spec(&self) -> Result<ModelSpec> {
        let json = self
            .meta(META_SPEC)
            .ok_or_else(|| Error::Checkpoint("no model spec in metadata".into()))?;
        let spec = ModelSpec::from_json(json)?;
        self.expect_digest(&spec)?;
        Ok(spec)
    }

    /// Errors unless the stored digest equals `spec`'s.
    pub fn expect_digest(&self, spec: &ModelSpec) -> Result<()> {
        let stored = self.meta(META_SPEC_DIGEST).unwrap_or("");
        let want = spec.digest();
        if stored != want {
            return Err(Error::Checkpoint(format!(
                "digest mismatch: checkpoint has `{stored}`, spec is `{want}`"
            )));
        }
        Ok(())
    }

    /// Rebuilds the parameter store for the stored spec, freeze flags included.
    pub fn params(&self) -> Result<ParamStore> {
        let spec = self.spec()?;
        let mut store = ParamStore::default();
        for slot in spec.param_slots()? {
            let t = self
                .tensor(&slot.name)
                .ok_or_else(|| Error::MissingParam(slot.name.clone()))?;
            store.insert(slot.name.clone(), t.clone(), slot.kind.trainable());
        }
        store.validate(&spec)?;
        if let Some(json) = self.meta(META_FROZEN) {
            let frozen: Vec<String> = serde_json::from_str(json)
                .map_err(|e| Error::Checkpoint(format!("bad frozen list: {e}")))?;
            for name in &frozen {
                if !store.contains(name) {
                    return Err(Error::Checkpoint(format!(
                        "frozen tensor `{name}` not in spec"
                    )));
                }
            }
            store.freeze_prefixes(&frozen);
        }
        Ok(store)
    }

    pub fn feature_stats(&self) -> Option<FeatureStats> {
        let mean = self.tensor(FEATURE_MEAN)?;
        let std = self.tensor(FEATURE_STD)?;
        Some(FeatureStats {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("corrupt header: bad magic".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "corrupt header: unsupported version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: unknown dtype code {dtype}"
                )));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: extents overflow")))?;
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let pairs = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..pairs {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        let ck = Self { tensors, metadata };
        if ck.meta(META_SPEC).is_some() {
            ck.spec()?;
        }
        Ok(ck)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated payload: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8 name: {e}")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
