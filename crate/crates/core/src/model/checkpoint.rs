//! Checkpoint container.
//!
//! Layout: `b"CCK1"`, a little-endian `u32` header length, a JSON header
//! (model kind and config, seed, epoch, training config echo, blob table),
//! then every blob as little-endian `f64` in header order: parameters first,
//! optimizer accumulators second.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LstmConfig, ModelConfig};
use super::{AnyModel, CaptionModel, Captioner, LstmModel, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelSpec {
    Cnn(ModelConfig),
    Lstm(LstmConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
    pub optimizer_steps: u64,
    /// Echo of the training configuration, if any.
    pub train: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Blob {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    meta: CheckpointMeta,
    params: Vec<Blob>,
    optimizer: Vec<Blob>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub meta: CheckpointMeta,
    /// RMSProp mean-square accumulators keyed by parameter name.
    pub optimizer: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new(model: AnyModel, meta: CheckpointMeta) -> Self {
        Self {
            model,
            meta,
            optimizer: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            model: self.model.spec(),
            meta: self.meta.clone(),
            params: params
                .iter()
                .map(|(n, t)| Blob {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self
                .optimizer
                .iter()
                .map(|(n, v)| Blob {
                    name: n.clone(),
                    shape: vec![v.len()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + params.count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let blobs = params
            .iter()
            .map(|(_, t)| t.data())
            .chain(self.optimizer.values().map(Vec::as_slice));
        for blob in blobs {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes through a temporary file so a failed write never leaves a
    /// truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut pos = 8 + hlen;
        let mut read_blob = |numel: usize| -> Result<Vec<f64>> {
            let raw = bytes
                .get(pos..pos + numel * 8)
                .ok_or_else(|| bad("truncated parameter data"))?;
            pos += numel * 8;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut params = ParamSet::new();
        for b in &header.params {
            let data = read_blob(b.shape.iter().product())?;
            params.insert(b.name.clone(), Tensor::new(b.shape.clone(), data)?.requiring_grad());
        }
        let mut optimizer = BTreeMap::new();
        for b in &header.optimizer {
            optimizer.insert(b.name.clone(), read_blob(b.shape.iter().product())?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after blobs"));
        }
        let model = match header.model {
            ModelSpec::Cnn(c) => AnyModel::Cnn(CaptionModel::from_params(c, params)?),
            ModelSpec::Lstm(c) => AnyModel::Lstm(LstmModel::from_params(c, params)?),
        };
        Ok(Self {
            model,
            meta: header.meta,
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and rejects checkpoints whose model kind or config differ from `spec`.
    pub fn load_expecting(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let ck = Self::load(path)?;
        let found = ck.model.spec();
        if &found != spec {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint holds {}, expected {}",
                serde_json::to_string(&found)?,
                serde_json::to_string(spec)?
            )));
        }
        Ok(ck)
    }
}
