//! Versioned JSON model checkpoints: full config echo plus named
//! parameter tensors. Values round-trip bitwise (shortest-representation
//! float formatting on write, exact re-parse on read).

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    dtype: Dtype,
    spec: ModelSpec,
    params: Vec<ParamRecord>,
}

pub fn save<E: Element>(model: &Model<E>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        dtype: E::DTYPE,
        spec: model.spec.clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.to_f64_vec(),
            })
            .collect(),
    };
    let out = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file)
        .map_err(|e| Error::parse(format!("write {}", path.display()), e.to_string()))?;
    w.flush().map_err(|e| Error::io("flush checkpoint", e))?;
    Ok(())
}

pub fn load<E: Element>(path: &Path) -> Result<Model<E>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    load_from_bytes(&bytes)
}

/// Parse and validate a checkpoint: version and dtype must match, and the
/// parameter list must agree exactly with the spec's layout.
pub fn load_from_bytes<E: Element>(bytes: &[u8]) -> Result<Model<E>> {
    let file: CheckpointFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::parse("checkpoint", e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            "checkpoint",
            format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                file.version
            ),
        ));
    }
    if file.dtype != E::DTYPE {
        return Err(Error::parse(
            "checkpoint",
            format!("dtype {} does not match model dtype {}", file.dtype, E::DTYPE),
        ));
    }
    let (mut model, _warnings) = Model::<E>::build(&file.spec, 0)?;
    if file.params.len() != model.params().len() {
        return Err(Error::parse(
            "checkpoint",
            format!(
                "parameter count {} does not match layout {}",
                file.params.len(),
                model.params().len()
            ),
        ));
    }
    for (rec, entry) in file.params.iter().zip(model.params_mut()) {
        if rec.name != entry.name || rec.shape != entry.tensor.shape() {
            return Err(Error::parse(
                "checkpoint",
                format!(
                    "parameter mismatch: file has {} {:?}, layout expects {} {:?}",
                    rec.name,
                    rec.shape,
                    entry.name,
                    entry.tensor.shape()
                ),
            ));
        }
        if rec.data.len() != entry.tensor.numel() {
            return Err(Error::parse(
                "checkpoint",
                format!("parameter {} has wrong element count", rec.name),
            ));
        }
        if rec.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(
                "checkpoint",
                format!("parameter {} contains non-finite values", rec.name),
            ));
        }
        let data = entry.tensor.data_mut();
        for (d, &v) in data.iter_mut().zip(&rec.data) {
            *d = E::from_f64(v);
        }
    }
    Ok(model)
}
