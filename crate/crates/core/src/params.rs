//! Named parameter collections and the checkpoint directory format.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.
//! The manifest lists every tensor's name, shape, element count and byte
//! offset into the blob; the blob is the concatenation of all tensors as
//! little-endian `f32`, in manifest order (names sorted ascending).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rawio;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "avpyramid-checkpoint-v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Merge another store; names must not collide.
    pub fn extend(&mut self, other: ParamStore) {
        for (k, v) in other.tensors {
            assert!(self.tensors.insert(k.clone(), v).is_none(), "duplicate parameter {k}");
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Round every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Register every tensor on `graph`, as parameters or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient for every bound tensor (zeros where the output did not depend on it).
    pub fn collect(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, graph.shape(v))))
            .collect()
    }
}

/// Uniform fan-in initialisation: `U(-gain·√(3/fan_in), gain·√(3/fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    /// Byte offset of the first element in `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: String,
    pub init_seed: u64,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (config fingerprint, epoch, …).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    init_seed: u64,
    metadata: BTreeMap<String, String>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            numel: t.numel(),
            offset: blob.len(),
        });
        blob.extend(rawio::encode_f32_le(t.data()));
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        init_seed,
        dtype: "f32le".into(),
        blob: "params.bin".into(),
        tensors,
        metadata,
    };
    rawio::write_atomic(&dir.join(&manifest.blob), &blob)?;
    rawio::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if e.shape.iter().product::<usize>() != e.numel {
            return Err(Error::Format(format!("tensor {} shape/numel mismatch", e.name)));
        }
        let end = e.offset + 4 * e.numel;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the blob", e.name)))?;
        let data = rawio::decode_f32_le(bytes)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("tensor {} holds non-finite values", e.name)));
        }
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data));
    }
    Ok((store, manifest))
}
