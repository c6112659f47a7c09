//! Checkpoint container.
//!
//! Layout: magic `ITSR`, `u32` format version, `u64` manifest length, the
//! UTF-8 JSON manifest, then the raw little-endian payload. The manifest
//! echoes the model config, carries free-form metadata, and lists every
//! tensor as `{name, shape, dtype, offset}` with `offset` in payload bytes.
//! Tensor names are `group/param`, e.g. `params/bb.shallow.w` or
//! `adam.m/bb.shallow.w`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::model::ModelConfig;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ITSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size_of()) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: manifest plus tensor groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub groups: BTreeMap<String, ParamStore<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn group(&self, name: &str) -> Result<&ParamStore<T>> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group `{name}`")))
    }
}

/// Serializes `groups` to bytes.
pub fn encode<T: Scalar>(
    config: &ModelConfig,
    meta: &serde_json::Value,
    groups: &[(&str, &ParamStore<T>)],
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in groups {
        if group.contains('/') {
            return Err(Error::contract(format!("group name `{group}` contains '/'")));
        }
        for (_, name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let text = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding failed: {e}")))?;
    let mut out = Vec::with_capacity(16 + text.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
    meta: &serde_json::Value,
    groups: &[(&str, &ParamStore<T>)],
) -> Result<()> {
    let bytes = encode(config, meta, groups)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads only the manifest.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("manifest is truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Checkpoint(format!(
            "manifest version {} disagrees with header version {version}",
            manifest.format_version
        )));
    }
    Ok((manifest, end))
}

/// Decodes a checkpoint, converting stored scalars to `T` when the stored
/// precision differs (bit-exact when it matches).
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (manifest, start) = decode_manifest(bytes)?;
    let payload = &bytes[start..];
    let mut groups: BTreeMap<String, ParamStore<T>> = BTreeMap::new();
    for e in &manifest.tensors {
        let (group, name) = e.name.split_once('/').ok_or_else(|| Error::Integrity {
            tensor: e.name.clone(),
            reason: "not of the form group/name".into(),
        })?;
        let n: usize = e.shape.iter().product();
        if n == 0 || e.shape.is_empty() {
            return Err(Error::Integrity {
                tensor: e.name.clone(),
                reason: format!("declared with empty shape {:?}", e.shape),
            });
        }
        let lo = e.offset as usize;
        let hi = lo + e.byte_len() as usize;
        if hi > payload.len() {
            return Err(Error::Integrity {
                tensor: e.name.clone(),
                reason: format!(
                    "missing from the payload (needs bytes {lo}..{hi}, payload has {})",
                    payload.len()
                ),
            });
        }
        let raw = &payload[lo..hi];
        let data: Vec<T> = match e.dtype {
            d if d == T::DTYPE => raw.chunks_exact(d.size_of()).map(T::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        let store = groups.entry(group.to_string()).or_default();
        if store.id(name).is_some() {
            return Err(Error::Integrity {
                tensor: e.name.clone(),
                reason: "listed twice".into(),
            });
        }
        store.add(name, Tensor::from_vec(&e.shape, data));
    }
    Ok(Checkpoint {
        config: manifest.config,
        meta: manifest.meta,
        groups,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Checks that `store` holds exactly the tensors of `reference`, with equal
/// shapes, reporting the first mismatch in `reference` order.
pub fn check_layout<T: Scalar, U: Scalar>(store: &ParamStore<T>, reference: &ParamStore<U>) -> Result<()> {
    for (_, name, t) in reference.iter() {
        match store.by_name(name) {
            None => {
                return Err(Error::Integrity {
                    tensor: name.to_string(),
                    reason: "required by the config but absent".into(),
                })
            }
            Some(s) if s.shape() != t.shape() => {
                return Err(Error::ParamShape {
                    tensor: name.to_string(),
                    stored: s.shape().to_vec(),
                    expected: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some((_, extra, _)) = store.iter().find(|(_, n, _)| reference.id(n).is_none()) {
        return Err(Error::Integrity {
            tensor: extra.to_string(),
            reason: "not part of the configured model".into(),
        });
    }
    Ok(())
}
