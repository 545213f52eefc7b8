//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "STOPBAND"
//! version    u32
//! n_meta     u32, then n_meta × (key: u32 len + UTF-8, value: u32 len + UTF-8)
//! n_tensors  u32, then n_tensors × record
//! record     name: u32 len + UTF-8
//!            dtype: u8 (0 = f64, 1 = f32, 2 = u8)
//!            rank: u32, dims: rank × u64
//!            data: product(dims) elements, little-endian
//! ```
//!
//! Metadata is written in key order, so encoding a decoded checkpoint
//! reproduces the original bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::models::{BuildOptions, Model, ModelSpec};
use crate::reparam::{Crispness, ReparamConfig};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STOPBAND";
pub const CHECKPOINT_VERSION: u32 = 1;

const MASK_SUFFIX: &str = ".mask";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn to_reals(&self) -> Vec<Real> {
        match self {
            TensorData::F64(v) => v.iter().map(|&x| x as Real).collect(),
            TensorData::F32(v) => v.iter().map(|&x| x as Real).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as Real).collect(),
        }
    }

    #[cfg(not(feature = "f32"))]
    fn from_reals(v: &[Real]) -> Self {
        TensorData::F64(v.to_vec())
    }

    #[cfg(feature = "f32")]
    fn from_reals(v: &[Real]) -> Self {
        TensorData::F32(v.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Model parameters plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    /// Captures every parameter, running statistic and pruning mask.
    pub fn from_model(model: &Model) -> Self {
        let spec = model.spec();
        let mut metadata = BTreeMap::new();
        metadata.insert("model".into(), spec.name.clone());
        metadata.insert("classes".into(), spec.num_classes.to_string());
        metadata.insert(
            "input_shape".into(),
            spec.input_shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x"),
        );
        metadata.insert(
            "crispness".into(),
            model
                .crispness()
                .map_or_else(|| "none".to_string(), |c| c.get().to_string()),
        );
        let mut tensors = Vec::new();
        for p in model.params() {
            tensors.push(StoredTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: TensorData::from_reals(p.value.data()),
            });
            if let Some(mask) = &p.mask {
                tensors.push(StoredTensor {
                    name: format!("{}{MASK_SUFFIX}", p.name),
                    shape: p.value.shape().to_vec(),
                    data: TensorData::U8(mask.iter().map(|&k| k as u8).collect()),
                });
            }
        }
        Self { metadata, tensors }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    /// Records the epoch the parameters come from and a fingerprint of the
    /// resolved configuration text that produced them.
    pub fn with_provenance(self, epoch: usize, config_text: &str) -> Self {
        self.with_meta("epoch", epoch)
            .with_meta("config_sha256", config_fingerprint(config_text))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("checkpoint lacks '{key}'")))
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model> {
        let name = self.meta("model")?;
        let classes: usize = self
            .meta("classes")?
            .parse()
            .map_err(|_| Error::format("bad 'classes' entry"))?;
        let input_shape = self
            .meta("input_shape")?
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format("bad 'input_shape' entry"))?;
        let crispness = match self.meta("crispness")? {
            "none" => None,
            n => Some(Crispness::new(
                n.parse().map_err(|_| Error::format("bad 'crispness' entry"))?,
            )?),
        };
        let spec = ModelSpec::named(name, classes, &input_shape)?;
        let mut model = Model::from_spec(
            spec,
            BuildOptions {
                seed: 0,
                reparam: crispness.map(|crispness| ReparamConfig {
                    crispness,
                    t_init: 1.0,
                }),
            },
        )?;

        let mut by_name: HashMap<&str, &StoredTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for p in model.params_mut() {
            let stored = by_name
                .remove(p.name.as_str())
                .ok_or_else(|| Error::format(format!("checkpoint lacks tensor '{}'", p.name)))?;
            if stored.shape != p.value.shape() {
                return Err(Error::format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(stored.shape.clone(), stored.data.to_reals())?;
            if let Some(mask) = by_name.remove(format!("{}{MASK_SUFFIX}", p.name).as_str()) {
                if mask.shape != p.value.shape() {
                    return Err(Error::format(format!("mask of '{}' has the wrong shape", p.name)));
                }
                let TensorData::U8(bits) = &mask.data else {
                    return Err(Error::format(format!("mask of '{}' is not u8", p.name)));
                };
                p.mask = Some(bits.iter().map(|&b| b != 0).collect());
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format(format!("unexpected tensor '{extra}' in checkpoint")));
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.data.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::format("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("tensor size overflow"))?;
            let data = match tag {
                0 => TensorData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| Error::format("size overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => TensorData::U8(r.take(n)?.to_vec()),
                other => return Err(Error::format(format!("unknown dtype tag {other}"))),
            };
            debug_assert_eq!(data.len(), n);
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Self { metadata, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
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
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 string"))
    }
}

/// Hex SHA-256 of a configuration text.
pub fn config_fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint.encode())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
