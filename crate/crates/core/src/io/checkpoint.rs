//! Tensor checkpoints.
//!
//! A checkpoint is one UTF-8 JSON header line followed by the raw
//! little-endian payload:
//!
//! ```text
//! {"format_version":1,"meta":{...},"tensors":[{"name":..,"shape":[..],"dtype":"f64","offset":0,"nbytes":..},..]}\n
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte and tensors are stored back
//! to back in manifest order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sae::SaeModel;
use crate::tensor::{DType, Tensor};
use crate::vit::{ViTConfig, ViTWeights};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default)]
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: free-form metadata plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(tensors: &[(String, Tensor)], meta: &Value) -> Result<Vec<u8>> {
    let mut names = BTreeSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if !names.insert(name.as_str()) {
            return Err(Error::Usage(format!("duplicate tensor name `{name}`")));
        }
        let nbytes = (t.numel() * t.dtype().size_bytes()) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        meta: meta.clone(),
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, t) in tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

/// Parses checkpoint bytes; `path` only labels error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::format(path, msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("header line is not terminated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| bad(format!("corrupt header at byte {}: {e}", e.column().saturating_sub(1))))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "format_version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let start = nl + 1;
    let payload = &bytes[start..];
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected {
            return Err(bad(format!(
                "tensor `{}` starts at payload offset {} but {expected} was expected",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes != (numel * e.dtype.size_bytes()) as u64 {
            return Err(bad(format!(
                "tensor `{}` declares {} bytes for shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let end = e.offset + e.nbytes;
        if end > payload.len() as u64 {
            return Err(bad(format!(
                "payload truncated: tensor `{}` needs bytes {}..{end} (file offset {}) but the payload has {}",
                e.name,
                e.offset,
                start as u64 + e.offset,
                payload.len()
            )));
        }
        let raw = &payload[e.offset as usize..end as usize];
        let t = Tensor::from_le_bytes(e.shape.clone(), e.dtype, raw)
            .map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
        if tensors.iter().any(|(n, _): &(String, Tensor)| *n == e.name) {
            return Err(bad(format!("duplicate tensor name `{}`", e.name)));
        }
        tensors.push((e.name.clone(), t));
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(bad(format!(
            "payload has {} bytes but the manifest accounts for {expected}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)], meta: &Value) -> Result<()> {
    let bytes = encode_checkpoint(tensors, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn meta_field<'a>(ck: &'a Checkpoint, key: &str, path: &Path) -> Result<&'a Value> {
    ck.meta
        .get(key)
        .ok_or_else(|| Error::format(path, format!("metadata lacks `{key}`")))
}

fn expect_kind(ck: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    match meta_field(ck, "kind", path)?.as_str() {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::format(
            path,
            format!("expected a {kind} checkpoint, found {other:?}"),
        )),
    }
}

pub fn save_vit(path: &Path, weights: &ViTWeights) -> Result<()> {
    let meta = serde_json::json!({ "kind": "vit", "config": weights.config });
    save_checkpoint(path, &weights.named_tensors(), &meta)
}

pub fn load_vit(path: &Path) -> Result<ViTWeights> {
    let ck = load_checkpoint(path)?;
    expect_kind(&ck, "vit", path)?;
    let config: ViTConfig = serde_json::from_value(meta_field(&ck, "config", path)?.clone())
        .map_err(|e| Error::format(path, format!("bad ViT config: {e}")))?;
    ViTWeights::from_named_tensors(&config, &ck.tensors)
}

/// SAE checkpoint; `layer` records which latent layer it was trained on.
pub fn save_sae(path: &Path, sae: &SaeModel, layer: Option<usize>) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "sae",
        "decoder_bias_sign": sae.decoder_bias_sign,
        "layer": layer,
    });
    save_checkpoint(path, &sae.named_tensors(), &meta)
}

pub fn load_sae(path: &Path) -> Result<(SaeModel, Option<usize>)> {
    let ck = load_checkpoint(path)?;
    expect_kind(&ck, "sae", path)?;
    let sign = meta_field(&ck, "decoder_bias_sign", path)?
        .as_f64()
        .ok_or_else(|| Error::format(path, "decoder_bias_sign is not a number"))?;
    let layer = ck.meta.get("layer").and_then(Value::as_u64).map(|l| l as usize);
    Ok((SaeModel::from_named_tensors(&ck.tensors, sign)?, layer))
}
