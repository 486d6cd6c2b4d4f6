//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (magic, version,
//! config echo, one entry per tensor with its byte offset) and `tensors.bin`,
//! the concatenation of every tensor in [`Tensor::write_to`] format.
//! Model parameters are stored under their store names; extra tensors such
//! as optimizer slots carry their own names.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::WideNetConfig;
use super::params::WideNet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "widenet-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub version: u32,
    pub config: WideNetConfig,
    pub tensors: Vec<TensorEntry>,
    /// Opaque training state (step counter, stream positions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<serde_json::Value>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: WideNet,
    /// Non-model tensors in file order.
    pub extra: Vec<(String, Tensor)>,
    pub train_state: Option<serde_json::Value>,
}

/// Writes `model`, `extra` tensors and an optional training state to `dir`,
/// creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &WideNet,
    extra: &[(String, Tensor)],
    train_state: Option<&serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob = BufWriter::new(fs::File::create(dir.join(BLOB_FILE))?);
    let mut offset = 0u64;
    let model_tensors = model.params().iter().map(|(_, n, t)| (n, t));
    let extra_tensors = extra.iter().map(|(n, t)| (n.as_str(), t));
    for (name, t) in model_tensors.chain(extra_tensors) {
        if entries.iter().any(|e: &TensorEntry| e.name == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        t.write_to(&mut blob)?;
        let bytes = t.encoded_len() as u64;
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    blob.flush()?;
    let manifest = Manifest {
        magic: MAGIC.into(),
        version: VERSION,
        config: model.config().clone(),
        tensors: entries,
        train_state: train_state.cloned(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest {}: {e}", path.display())))?;
    if manifest.magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            manifest.magic,
            path.display()
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, validating every model tensor against the shapes the
/// stored config implies.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut model = WideNet::new(manifest.config.clone(), 0)?;
    let mut extra = Vec::new();
    let mut seen = vec![false; model.params().len()];
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.bytes).filter(|&end| end <= blob.len() as u64);
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("tensor {} extends past the blob", e.name)));
        };
        let mut cur = Cursor::new(&blob[e.offset as usize..end as usize]);
        let t = Tensor::read_from(&mut cur)
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        if t.shape() != e.shape.as_slice() || t.encoded_len() as u64 != e.bytes {
            return Err(Error::Checkpoint(format!(
                "tensor {}: manifest shape {:?} vs stored {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        match model.params().find(&e.name) {
            Some(id) => {
                let want = model.params().get(id).shape().to_vec();
                if want != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {}: config implies shape {want:?}, checkpoint has {:?}",
                        e.name,
                        t.shape()
                    )));
                }
                model.params_mut().get_mut(id).assign(&t)?;
                seen[id.index()] = true;
            }
            None => extra.push((e.name.clone(), t)),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = model.params().ids().nth(i).expect("index in range");
        return Err(Error::Checkpoint(format!(
            "missing parameter {}",
            model.params().name(id)
        )));
    }
    Ok(Checkpoint {
        model,
        extra,
        train_state: manifest.train_state,
    })
}

/// Like [`load_checkpoint`], but also requires the stored config to equal
/// `expected`.
pub fn load_checkpoint_for(dir: &Path, expected: &WideNetConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(dir)?;
    if ck.model.config() != expected {
        return Err(Error::Checkpoint(
            "checkpoint config differs from the requested model config".into(),
        ));
    }
    Ok(ck)
}
