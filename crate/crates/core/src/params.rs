//! Named, ordered weight collections and their on-disk checkpoints.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::gzt;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered named tensors with trainable flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkParams {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Usage(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Records every tensor on `tape`: trainable ones as tracked leaves,
    /// frozen ones as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|p| {
                    if p.trainable {
                        tape.var(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.entries.iter().map(|p| tape.constant(p.value.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes, and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.value.le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `manifest.json` and `tensors.gzt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, kind: &str, config: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let offset = blob.len();
            gzt::encode_into(&p.value, &mut blob);
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                offset,
                bytes: blob.len() - offset,
            });
        }
        let manifest = CheckpointManifest {
            format: "GZT1".into(),
            kind: kind.into(),
            tensor_file: TENSOR_FILE.into(),
            config,
            tensors,
        };
        let tpath = dir.join(TENSOR_FILE);
        std::fs::write(&tpath, blob).map_err(|e| Error::io(&tpath, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(NetworkParams, CheckpointManifest)> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != "GZT1" {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", manifest.format)));
        }
        let tpath = dir.join(&manifest.tensor_file);
        let blob = std::fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let params = Self::from_manifest_blob(&manifest, &blob)?;
        Ok((params, manifest))
    }

    /// Pairs a decoded tensor stream with its manifest entries.
    pub fn from_manifest_blob(manifest: &CheckpointManifest, blob: &[u8]) -> Result<NetworkParams> {
        let tensors = gzt::decode_all(blob)?;
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors but the container holds {}",
                manifest.tensors.len(),
                tensors.len()
            )));
        }
        let mut params = NetworkParams::new();
        for (entry, t) in manifest.tensors.iter().zip(tensors) {
            if entry.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            params.insert(entry.name.clone(), t, entry.trainable)?;
        }
        Ok(params)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.gzt";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: String,
    pub tensor_file: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters recorded on a tape, addressable by name.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    /// Substitutes the variable recorded for `name`.
    pub fn replace(&mut self, name: &str, v: Var<'t>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        if self.vars[i].shape() != v.shape() {
            return Err(crate::error::shape_err!("replacement for `{name}` has shape {:?}, expected {:?}", v.shape(), self.vars[i].shape()));
        }
        self.vars[i] = v;
        Ok(())
    }

    /// Gradients in parameter order; untouched or frozen entries get `None`.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.wrt(v).cloned()).collect()
    }
}
