//! Checkpoint container: a JSON index over a raw little-endian f64 payload,
//! keyed by module path.
//!
//! Layout: `b"RIDC"` magic, `u32` version, `u64` index length, the index
//! JSON, then the payload. The index lists every tensor's key, shape and
//! element offset. Model weights and buffers use their store names
//! (`trunk.stem.conv.weight`, `neck.local.gamma`, ...); optimizer moments are
//! stored under `adam.m/<name>` and `adam.v/<name>`.

use crate::autodiff::TensorData;
use crate::model::ReidModel;
use crate::training::Adam;
use anyhow::{bail, ensure, Context, Result};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RIDC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    key: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    version: u32,
    epoch: usize,
    step: u64,
    num_identities: usize,
    entries: Vec<IndexEntry>,
}

/// Everything read back from a checkpoint file.
pub struct CheckpointData {
    pub epoch: usize,
    pub step: u64,
    pub num_identities: usize,
    pub tensors: HashMap<String, TensorData>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ReidModel,
    optimizer: Option<&Adam>,
    epoch: usize,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |key: String, tensor: &TensorData| {
        entries.push(IndexEntry {
            key,
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
            len: tensor.len() as u64,
        });
        payload.extend(tensor.iter().copied());
    };
    for (_, name, value, _) in model.store.iter() {
        push(name.to_string(), value);
    }
    let mut step = 0;
    if let Some(opt) = optimizer {
        step = opt.step_count;
        let mut names: Vec<&String> = opt.moments().keys().collect();
        names.sort();
        for name in names {
            let (m, v) = &opt.moments()[name];
            push(format!("adam.m/{name}"), m);
            push(format!("adam.v/{name}"), v);
        }
    }
    let index = Index {
        version: VERSION,
        epoch,
        step,
        num_identities: model.num_identities,
        entries,
    };
    let index_json = serde_json::to_vec(&index)?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating checkpoint {path:?}"))?,
    );
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(index_json.len() as u64).to_le_bytes())?;
    file.write_all(&index_json)?;
    for v in payload {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("opening checkpoint {path:?}"))?,
    );
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    ensure!(&magic == MAGIC, "not a checkpoint file: {path:?}");
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    let mut index_json = vec![0u8; index_len];
    file.read_exact(&mut index_json)?;
    let index: Index = serde_json::from_slice(&index_json)?;

    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    ensure!(blob.len() % 8 == 0, "truncated checkpoint payload");
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut tensors = HashMap::new();
    for entry in index.entries {
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        ensure!(end <= values.len(), "checkpoint entry {} out of bounds", entry.key);
        ensure!(
            entry.shape.iter().product::<usize>() == entry.len as usize,
            "inconsistent shape for {}",
            entry.key
        );
        let tensor = TensorData::from_shape_vec(IxDyn(&entry.shape), values[start..end].to_vec())?;
        tensors.insert(entry.key, tensor);
    }
    Ok(CheckpointData {
        epoch: index.epoch,
        step: index.step,
        num_identities: index.num_identities,
        tensors,
    })
}

/// Copy checkpointed tensors into the model, shape-checked key by key.
pub fn restore_model(model: &mut ReidModel, data: &CheckpointData) -> Result<()> {
    let params: Vec<(crate::nn::Param, String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(p, name, value, _)| (p, name.to_string(), value.shape().to_vec()))
        .collect();
    for (param, name, shape) in params {
        let Some(tensor) = data.tensors.get(&name) else {
            bail!("checkpoint is missing tensor {name:?}");
        };
        if tensor.shape() != shape.as_slice() {
            bail!(
                "shape mismatch for {name:?}: checkpoint has {:?} but the configured model needs {:?}",
                tensor.shape(),
                shape
            );
        }
        *model.store.value_mut(param) = tensor.clone();
    }
    Ok(())
}

/// Restore Adam moments saved by [`save_checkpoint`].
pub fn restore_optimizer(optimizer: &mut Adam, data: &CheckpointData) {
    let mut moments = HashMap::new();
    for (key, tensor) in &data.tensors {
        if let Some(name) = key.strip_prefix("adam.m/") {
            let v_key = format!("adam.v/{name}");
            if let Some(v) = data.tensors.get(&v_key) {
                moments.insert(name.to_string(), (tensor.clone(), v.clone()));
            }
        }
    }
    optimizer.restore_moments(moments, data.step);
}
