//! Versioned JSON checkpoints holding weights, known-class memory, the model
//! spec and the config snapshot of the run that produced them.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::kms::MetaMemory;
use crate::params::ParamStore;
use crate::pipeline::{DmNet, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + DeserializeOwned")]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + DeserializeOwned")]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub backbone_digest: String,
    pub spec: ModelSpec,
    pub config: Config,
    pub params: Vec<NamedArray<T>>,
    pub memory: MetaMemory<T>,
}

impl<T: Scalar + Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn capture(model: &DmNet<T>, config: &Config, seed: u64, backbone_digest: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            seed,
            backbone_digest: backbone_digest.to_string(),
            spec: model.spec().clone(),
            config: config.clone(),
            params: model
                .params
                .iter()
                .map(|(name, t)| NamedArray {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            memory: model.memory.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let version = head.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {:?} (expected {FORMAT_VERSION})",
                path.display(),
                version
            )));
        }
        let dtype = head.get("dtype").and_then(|v| v.as_str()).unwrap_or("");
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: stored as {dtype}, requested {}",
                path.display(),
                T::DTYPE
            )));
        }
        serde_json::from_value(head).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn into_model(self) -> Result<DmNet<T>> {
        let mut store = ParamStore::new(0);
        for a in &self.params {
            let id = store.add(&a.name, &a.shape, crate::params::Init::Constant(0.0));
            *store.get_mut(id) = Tensor::new(&a.shape, a.data.clone())?;
        }
        DmNet::from_parts(self.spec, store, self.memory)
    }
}
