//! Binary checkpoint format.
//!
//! Layout: magic `ECK1`, little-endian u32 header length, JSON header
//! (format version, architecture, head kind, provenance, tensor index,
//! payload hash), then every tensor's f64 values little-endian in canonical
//! order. The payload hash makes corruption detectable.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::manifest::hash_bytes;

use super::net::{HeadSpec, Model, Params};
use super::{ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"ECK1";
const VERSION: u32 = 1;

/// Where a checkpoint came from: enough to re-derive it from scratch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// pipeline stage that produced it, e.g. "pretrain" or "finetune"
    pub stage: String,
    /// content hash of the dataset trained on
    pub data_hash: String,
    /// hash of the training configuration
    pub train_config_hash: String,
    /// backbone hash of the checkpoint this one was finetuned from
    pub parent_backbone: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub head_spec: HeadSpec,
    pub params: Params,
    pub provenance: Provenance,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, provenance: Provenance) -> ModelCheckpoint {
        ModelCheckpoint {
            config: model.config.clone(),
            head_spec: model.head_spec.clone(),
            params: model.params.clone(),
            provenance,
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            config: self.config,
            head_spec: self.head_spec,
            params: self.params,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    head_spec: HeadSpec,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
    payload_hash: String,
}

pub fn save_checkpoint<W: Write>(ckpt: &ModelCheckpoint, mut w: W) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in ckpt.params.tensors() {
        tensors.push(TensorEntry {
            name,
            rows: t.nrows(),
            cols: t.ncols(),
        });
        for v in t.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        config: ckpt.config.clone(),
        head_spec: ckpt.head_spec.clone(),
        provenance: ckpt.provenance.clone(),
        tensors,
        payload_hash: hash_bytes(&payload),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn save_checkpoint_file(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("eck.tmp");
    let f = std::fs::File::create(&tmp)?;
    save_checkpoint(ckpt, std::io::BufWriter::new(f))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<ModelCheckpoint, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json)?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| ModelError::Format(e.to_string()))?;
    if header.version != VERSION {
        return Err(ModelError::Format(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if hash_bytes(&payload) != header.payload_hash {
        return Err(ModelError::Format("payload hash mismatch".into()));
    }

    // instantiate the architecture, then fill tensors in canonical order
    let model = Model::new(header.config.clone(), header.head_spec.clone())
        .map_err(|e| ModelError::Format(format!("invalid stored config: {e}")))?;
    let mut params = model.params;
    let mut offset = 0usize;
    let live = params.tensors_mut();
    if live.len() != header.tensors.len() {
        return Err(ModelError::Format("tensor count mismatch".into()));
    }
    for ((name, t), entry) in live.into_iter().zip(&header.tensors) {
        if name != entry.name || t.nrows() != entry.rows || t.ncols() != entry.cols {
            return Err(ModelError::Format(format!(
                "tensor index mismatch at {name}"
            )));
        }
        let n_bytes = entry.rows * entry.cols * 8;
        if offset + n_bytes > payload.len() {
            return Err(ModelError::Format("payload truncated".into()));
        }
        for (v, chunk) in t.iter_mut().zip(payload[offset..offset + n_bytes].chunks(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        offset += n_bytes;
    }
    if offset != payload.len() {
        return Err(ModelError::Format("trailing payload bytes".into()));
    }
    Ok(ModelCheckpoint {
        config: header.config,
        head_spec: header.head_spec,
        params,
        provenance: header.provenance,
    })
}

pub fn load_checkpoint_file(path: &Path) -> Result<ModelCheckpoint, ModelError> {
    let f = std::fs::File::open(path)?;
    load_checkpoint(std::io::BufReader::new(f))
}
