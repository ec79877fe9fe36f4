//! Binary checkpoint of the trainable tensors.
//!
//! Layout: the magic `CKTWAM1\n`, a little-endian `u64` header length, a JSON
//! header, the tensor payload as little-endian `f64`, and a trailing
//! little-endian FNV-1a 64 checksum of the payload. Backbones are not
//! stored; they are regenerated from the seeds in the config echo.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use crate::error::{CktError, Result};
use crate::tensor::{fnv1a64, ParamSet};

pub const MAGIC: &[u8; 8] = b"CKTWAM1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(config: &RunConfig, step: u64, params: &ParamSet) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.numel() * 8);
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        step,
        tensors,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(payload.iter().copied()).to_le_bytes());
    Ok(out)
}

pub fn save(path: &Path, config: &RunConfig, step: u64, params: &ParamSet) -> Result<()> {
    let bytes = encode(config, step, params)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> CktError {
    CktError::Checkpoint(msg.into())
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    let s = bytes.get(at..at + 8).ok_or_else(|| bad("truncated file"))?;
    Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
}

/// Parses and verifies a checkpoint without applying it.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    if bytes.len() < MAGIC.len() + 16 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing CKTWAM1 magic"));
    }
    let hlen = read_u64(bytes, 8)? as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e + 8 <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[body..bytes.len() - 8];
    let want = read_u64(bytes, bytes.len() - 8)?;
    let got = fnv1a64(payload.iter().copied());
    if want != got {
        return Err(bad(format!(
            "payload checksum {got:016x} does not match stored {want:016x}"
        )));
    }
    if !payload.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

/// Loads a checkpoint into `params`. The stored config must describe the
/// same models as `config`, and the tensor manifest must match `params`.
pub fn load(path: &Path, config: &RunConfig, params: &mut ParamSet) -> Result<Header> {
    let bytes = std::fs::read(path)?;
    let (header, values) = decode(&bytes)?;
    let (want, got): (Value, Value) = (config.model_fingerprint(), header.config.model_fingerprint());
    if want != got {
        return Err(bad(format!(
            "checkpoint was written for a different configuration (stored {got}, expected {want})"
        )));
    }
    if header.tensors.len() != params.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model has {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (e, id) in header.tensors.iter().zip(ids) {
        if e.name != params.name(id) || e.shape != params.get(id).shape() || e.dtype != "f64" {
            return Err(bad(format!(
                "tensor '{}' {:?} does not match model '{}' {:?}",
                e.name,
                e.shape,
                params.name(id),
                params.get(id).shape()
            )));
        }
        let (start, n) = ((e.offset / 8) as usize, (e.nbytes / 8) as usize);
        let slice = values
            .get(start..start + n)
            .ok_or_else(|| bad(format!("tensor '{}' outside payload", e.name)))?;
        params.assign(id, slice)?;
    }
    Ok(header)
}
