//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `ZOEDCKPT`                          |
//! | 8      | 4    | format version (`u32`, currently 1)       |
//! | 12     | 8    | header length in bytes (`u64`)            |
//! | 20     | n    | UTF-8 JSON header                         |
//! | 20 + n | ...  | tensor payloads                           |
//!
//! The header holds the model config, the precision state, the mixed
//! precision policy for quantized bundles, and a tensor directory of
//! `{name, shape, dtype, offset, nbytes}` entries with offsets relative to
//! the start of the payload section. `f32` payloads are raw little-endian
//! floats, `i8` payloads raw bytes. Each int8 tensor `W` has a sidecar entry
//! `W.scale` (f32, shape `[1]`) and each quantized activation site `S` has a
//! sidecar entry `S.act_scale`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, Precision};
use super::config::ModelConfig;
use crate::quant::{MixedPrecisionPolicy, QuantState};
use crate::tensor::{DType, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ZOEDCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 20;
const SCALE_SUFFIX: &str = ".scale";
const ACT_SCALE_SUFFIX: &str = ".act_scale";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    precision: Precision,
    #[serde(default)]
    policy: Option<MixedPrecisionPolicy>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    nbytes: u64,
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(bundle.storage_bytes() + 64);
    let mut entries = Vec::new();
    let mut push_f32 = |name: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<u8>| {
        let offset = payload.len() as u64;
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(Entry { name, shape, dtype: DType::F32, offset, nbytes: data.len() as u64 * 4 });
    };
    let mut i8_entries = Vec::new();
    for (name, t) in bundle.tensors() {
        match t {
            Tensor::F32 { shape, data } => push_f32(name.to_string(), shape.clone(), data, &mut payload),
            Tensor::I8 { shape, data, scale } => {
                let offset = payload.len() as u64;
                payload.extend(data.iter().map(|&q| q as u8));
                i8_entries.push(Entry {
                    name: name.to_string(),
                    shape: shape.clone(),
                    dtype: DType::I8,
                    offset,
                    nbytes: data.len() as u64,
                });
                push_f32(format!("{name}{SCALE_SUFFIX}"), vec![1], &[*scale], &mut payload);
            }
        }
    }
    let policy = bundle.quant().map(|q| q.policy.clone());
    if let Some(q) = bundle.quant() {
        for (site, s) in &q.activation_scales {
            push_f32(format!("{site}{ACT_SCALE_SUFFIX}"), vec![1], &[*s], &mut payload);
        }
    }
    entries.extend(i8_entries);
    entries.sort_by_key(|e| e.offset);
    let header = Header { config: bundle.config().clone(), precision: bundle.precision(), policy, tensors: entries };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut raw: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let width = match e.dtype {
            DType::F32 => 4,
            DType::I8 => 1,
        };
        if e.nbytes as usize != numel * width {
            return Err(Error::Format(format!("entry {} has inconsistent size", e.name)));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(e.nbytes as usize)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Format(format!("truncated payload for {}", e.name)))?;
        let data = &payload[start..end];
        let t = match e.dtype {
            DType::F32 => Tensor::F32 {
                shape: e.shape.clone(),
                data: data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            },
            DType::I8 => {
                Tensor::I8 { shape: e.shape.clone(), data: data.iter().map(|&b| b as i8).collect(), scale: f32::NAN }
            }
        };
        if raw.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry {}", e.name)));
        }
    }

    let mut activation_scales = BTreeMap::new();
    let mut weight_scales = BTreeMap::new();
    let names: Vec<String> = raw.keys().cloned().collect();
    for name in names {
        if let Some(site) = name.strip_suffix(ACT_SCALE_SUFFIX) {
            activation_scales.insert(site.to_string(), scalar(&raw[&name], &name)?);
            raw.remove(&name);
        } else if let Some(base) = name.strip_suffix(SCALE_SUFFIX) {
            if matches!(raw.get(base), Some(Tensor::I8 { .. })) {
                weight_scales.insert(base.to_string(), scalar(&raw[&name], &name)?);
                raw.remove(&name);
            }
        }
    }
    for (name, t) in raw.iter_mut() {
        if let Tensor::I8 { scale, .. } = t {
            *scale =
                weight_scales.remove(name).ok_or_else(|| Error::Format(format!("missing scale sidecar for {name}")))?;
        }
    }
    let quant = match (header.precision, header.policy) {
        (Precision::Full, None) => None,
        (Precision::MixedQuantized, Some(policy)) => Some(QuantState { policy, activation_scales }),
        _ => return Err(Error::Format("precision and policy disagree".into())),
    };
    ModelBundle::assemble(header.config, raw, header.precision, quant)
}

fn scalar(t: &Tensor, name: &str) -> Result<f32> {
    match t {
        Tensor::F32 { data, .. } if data.len() == 1 => Ok(data[0]),
        _ => Err(Error::Format(format!("sidecar {name} must be a single f32"))),
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(bundle: &ModelBundle, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(bundle)?)
}

/// Loads a checkpoint written by [`save`].
pub fn import_checkpoint(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
