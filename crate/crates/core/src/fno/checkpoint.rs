//! Checkpoint directory: `checkpoint.json` (config, tensor table, provenance)
//! and `weights.f32le` (every parameter, little-endian, in table order).

use std::fs;
use std::path::Path;

use nopt_diff::Tensor;
use serde::{Deserialize, Serialize};

use super::{FnoConfig, FnoModel, TimeAdapter};
use crate::datamodel::ChannelStats;
use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.f32le";
const CHECKPOINT_VERSION: &str = "1.0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Init,
    Pretrained,
    Finetuned,
}

/// Where a set of weights came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: CheckpointStage,
    pub seed: u64,
    pub epochs: usize,
    /// Fingerprint of the training dataset.
    pub fingerprint: String,
    #[serde(default)]
    pub adapter: Option<TimeAdapter>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    complex: bool,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: String,
    byte_order: String,
    config: FnoConfig,
    head: bool,
    decoder: bool,
    frozen: bool,
    input_norm: Option<ChannelStats>,
    output_norm: Option<ChannelStats>,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &FnoModel<f32>, provenance: &Provenance, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = payload.len() as u64;
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            complex: p.value.is_complex(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.into(),
        byte_order: "little".into(),
        config: model.config.clone(),
        head: model.has_head(),
        decoder: model.has_decoder(),
        frozen: model.frozen,
        input_norm: model.input_norm.clone(),
        output_norm: model.output_norm.clone(),
        provenance: provenance.clone(),
        tensors,
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let wp = dir.join(WEIGHTS_FILE);
    fs::write(&wp, &payload).map_err(io_err(&wp))?;
    let mp = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&mp))?;
    fs::write(&mp, text).map_err(io_err(&mp))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(FnoModel<f32>, Provenance)> {
    let dir = dir.as_ref();
    let mp = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(json_err(&mp))?;
    if m.version.split('.').next() != CHECKPOINT_VERSION.split('.').next() {
        return Err(Error::Version {
            found: m.version,
            supported: 1,
        });
    }
    if m.byte_order != "little" {
        return Err(Error::ByteOrder(m.byte_order));
    }
    let wp = dir.join(WEIGHTS_FILE);
    let payload = fs::read(&wp).map_err(io_err(&wp))?;
    let mut model = FnoModel::<f32>::new(m.config.clone(), 0, m.head, m.decoder)?;
    if model.store.len() != m.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, the config needs {}",
            m.tensors.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, e) in ids.into_iter().zip(&m.tensors) {
        let p = model.store.get_mut(id);
        if p.name != e.name || p.value.shape() != e.shape.as_slice() || p.value.is_complex() != e.complex {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > payload.len() || e.len as usize != 4 * p.value.data().len() {
            return Err(Error::Truncated {
                expected: end as u64,
                found: payload.len() as u64,
            });
        }
        let vals: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        p.value = if e.complex {
            Tensor::from_interleaved(&e.shape, vals)?
        } else {
            Tensor::from_vec(&e.shape, vals)?
        };
    }
    model.frozen = m.frozen;
    model.input_norm = m.input_norm;
    model.output_norm = m.output_norm;
    Ok((model, m.provenance))
}
