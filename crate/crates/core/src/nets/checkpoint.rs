//! Weight checkpoints: a flat named-tensor container readable from any
//! language.
//!
//! Layout (little-endian):
//!   bytes 0..4    magic "NTC1"
//!   bytes 4..12   u64: JSON manifest length in bytes
//!   manifest      UTF-8 JSON (see [`Manifest`]): tensor names, shapes,
//!                 dtype, byte offsets into the payload, plus free-form
//!                 string metadata
//!   payload       tensor data, f64 little-endian, at the stated offsets
//!
//! Base tensors are stored under `base.<name>`, control tensors under
//! `control.<name>`. The model configuration rides along in
//! `meta["model_config"]` as JSON.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ParamSet, Weights};

const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

pub type CheckpointMeta = std::collections::BTreeMap<String, String>;

/// Serialize weights (and free-form metadata) to `path`.
pub fn save_weights(path: &Path, weights: &Weights, mut meta: CheckpointMeta) -> Result<()> {
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(&weights.config)?,
    );
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let push_set =
        |prefix: &str, set: &ParamSet, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>| {
            for p in set.iter() {
                let offset = payload.len() as u64;
                for v in p.value.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(TensorEntry {
                    name: format!("{prefix}.{}", p.name),
                    shape: p.value.shape().to_vec(),
                    dtype: "f64".to_string(),
                    offset,
                    byte_len: (p.value.numel() * 8) as u64,
                });
            }
        };
    push_set("base", &weights.base, &mut entries, &mut payload);
    if let Some(control) = &weights.control {
        push_set("control", control, &mut entries, &mut payload);
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: entries,
        meta,
    })?;

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&mut f, MAGIC)?;
    write(&mut f, &(manifest.len() as u64).to_le_bytes())?;
    write(&mut f, &manifest)?;
    write(&mut f, &payload)?;
    Ok(())
}

/// Load a checkpoint written by [`save_weights`]. Returns the weights and
/// the stored metadata.
pub fn load_weights(path: &Path) -> Result<(Weights, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::Data(format!(
            "{}: truncated manifest",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])?;
    let payload = &bytes[12 + mlen..];

    let config: ModelConfig = serde_json::from_str(
        manifest
            .meta
            .get("model_config")
            .ok_or_else(|| Error::Data("checkpoint missing model_config".into()))?,
    )?;

    let mut base = ParamSet::new();
    let mut control = ParamSet::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Data(format!("unsupported dtype {}", e.dtype)));
        }
        let start = e.offset as usize;
        let end = start + e.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Data(format!("tensor {} overruns payload", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        if numel * 8 != e.byte_len as usize {
            return Err(Error::Data(format!("tensor {} length mismatch", e.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), data);
        if let Some(name) = e.name.strip_prefix("base.") {
            base.insert(name, t);
        } else if let Some(name) = e.name.strip_prefix("control.") {
            control.insert(name, t);
        } else {
            return Err(Error::Data(format!("tensor {} in unknown set", e.name)));
        }
    }
    let weights = Weights {
        config,
        base,
        control: if control.is_empty() {
            None
        } else {
            Some(control)
        },
    };
    Ok((weights, manifest.meta))
}
