//! Model checkpoints.
//!
//! Layout: the line `CBMAUC-v1`, one line of JSON (config, parameter
//! names, groups and shapes, normalization statistics), then every
//! parameter tensor as little-endian `f64`, in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use cbm_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nets::{BnStats, Model, Param, ParamGroup};

pub const MAGIC: &[u8] = b"CBMAUC-v1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<Entry>,
    bn: Vec<BnStats>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = Header {
        config: model.cfg.clone(),
        params: model
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        bn: model.bn.clone(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for p in &model.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| CoreError::format(path, "not a CBMAUC-v1 checkpoint"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CoreError::format(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| CoreError::format(path, format!("bad header: {e}")))?;
    let mut blob = rest[nl + 1..].chunks_exact(8);
    if blob.remainder().len() != 0 {
        return Err(CoreError::format(path, "payload is not a whole number of f64 values"));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = blob
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.len() != n {
            return Err(CoreError::format(path, format!("payload ends inside `{}`", e.name)));
        }
        params.push(Param {
            name: e.name,
            group: e.group,
            value: Tensor::new(e.shape, data),
        });
    }
    if blob.next().is_some() {
        return Err(CoreError::format(path, "trailing bytes after the last tensor"));
    }
    Ok(Model::from_parts(header.config, params, header.bn))
}

/// Writes via a temporary file and rename.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| CoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    from_bytes(&bytes, path)
}
