use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datatrain::config::TrainConfig;
use crate::datatrain::model::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::nnkit::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub box_ciou: f64,
    pub obj_bce: f64,
    pub cls_bce: f64,
    pub map50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub fused: bool,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters plus configuration and training metadata.
///
/// On disk: header length as u64 LE, the JSON header, then every tensor as
/// little-endian f32 in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub fused: bool,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, store: ParamStore) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION.to_string(),
            model,
            train: None,
            fused: false,
            epoch: 0,
            history: Vec::new(),
            store,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (name, p) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: p.tensor.shape().to_vec(),
                kind: p.kind,
                offset,
            });
            offset += p.tensor.numel();
            for &v in p.tensor.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            format_version: self.format_version.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            fused: self.fused,
            epoch: self.epoch,
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().expect("8 bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflows"))?;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {:?}, expected {FORMAT_VERSION:?}",
                header.format_version
            )));
        }
        let blob = &bytes[8 + hlen..];
        let mut store = ParamStore::new();
        let mut expected = 0;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset != expected {
                return Err(Error::Checkpoint(format!("{}: offset {} out of sequence", t.name, t.offset)));
            }
            let raw = blob
                .get(4 * t.offset..4 * (t.offset + n))
                .ok_or_else(|| Error::Checkpoint(format!("{}: blob too short", t.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            store.insert(t.name.clone(), Tensor::new(&t.shape, data)?, t.kind);
            expected += n;
        }
        if blob.len() != 4 * expected {
            return Err(bad("trailing bytes after the parameter blob"));
        }
        Ok(Checkpoint {
            format_version: header.format_version,
            model: header.model,
            train: header.train,
            fused: header.fused,
            epoch: header.epoch,
            history: header.history,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and checks that every stored tensor fits it.
    pub fn detector(&self) -> Result<(Detector, ParamStore)> {
        let mut fresh = ParamStore::new();
        let mut det = Detector::new(&mut fresh, 0, self.model.clone())?;
        if self.fused {
            det.fuse(&mut fresh)?;
        }
        let names: Vec<(&String, &[usize])> = fresh.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
        let stored: Vec<(&String, &[usize])> = self.store.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
        if names != stored {
            return Err(Error::Checkpoint("parameter table does not match the model configuration".into()));
        }
        let mut store = self.store.clone();
        for (_, p) in store.iter_mut() {
            p.frozen = false;
        }
        Ok((det, store))
    }
}
