//! Volume files: `<name>.f32raw` holds little-endian f32 samples in x-fastest
//! order, `<name>.json` the sidecar describing them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::VoxelVolume;
use crate::hashing::{f32_le_bytes, f64_from_f32_le, sha256_hex};
use crate::{Error, Result};

pub const AXIS_ORDER: &str = "xyz-x-fastest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub intensity_range: [f64; 2],
    pub axis_order: String,
    /// SHA-256 of the payload bytes; checked on read when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// Serializes a volume to `(sidecar JSON, payload bytes)`. Samples are
/// rounded to f32.
pub fn encode_volume(vol: &VoxelVolume) -> (String, Vec<u8>) {
    let payload = f32_le_bytes(vol.data());
    let sidecar = VolumeSidecar {
        dims: vol.dims(),
        spacing: vol.spacing(),
        intensity_range: [vol.intensity_range.0, vol.intensity_range.1],
        axis_order: AXIS_ORDER.to_string(),
        sha256: Some(sha256_hex(&payload)),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    (text, payload)
}

/// Parses a sidecar and payload pair. Never panics on malformed input.
pub fn decode_volume(sidecar: &str, payload: &[u8]) -> Result<VoxelVolume> {
    let meta: VolumeSidecar = serde_json::from_str(sidecar)?;
    if meta.axis_order != AXIS_ORDER {
        return Err(Error::Format {
            what: "volume sidecar",
            reason: format!("unsupported axis_order {:?}", meta.axis_order),
        });
    }
    let count = meta
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            what: "volume sidecar",
            reason: format!("dims {:?} overflow", meta.dims),
        })?;
    if payload.len() != count {
        return Err(Error::LengthMismatch {
            expected: count,
            actual: payload.len(),
        });
    }
    if let Some(expected) = &meta.sha256 {
        let actual = sha256_hex(payload);
        if &actual != expected {
            return Err(Error::HashMismatch {
                path: PathBuf::new(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    let data = f64_from_f32_le(payload).expect("length checked");
    let [lo, hi] = meta.intensity_range;
    Ok(VoxelVolume::new(meta.dims, meta.spacing, data)?.with_intensity_range((lo, hi)))
}

fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("f32raw"), path.with_extension("json"))
}

/// Writes `<path>.f32raw` and `<path>.json` (any extension on `path` is
/// replaced). Returns the payload hash.
pub fn write_volume(vol: &VoxelVolume, path: &Path) -> Result<String> {
    let (raw, json) = pair_paths(path);
    let (sidecar, payload) = encode_volume(vol);
    std::fs::write(&raw, &payload).map_err(|e| Error::io(&raw, e))?;
    std::fs::write(&json, sidecar).map_err(|e| Error::io(&json, e))?;
    Ok(sha256_hex(&payload))
}

pub fn read_volume(path: &Path) -> Result<VoxelVolume> {
    let (raw, json) = pair_paths(path);
    if !json.exists() {
        return Err(Error::MissingSidecar(json));
    }
    let sidecar = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let payload = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    decode_volume(&sidecar, &payload).map_err(|e| match e {
        Error::HashMismatch { expected, actual, .. } => Error::HashMismatch {
            path: raw.clone(),
            expected,
            actual,
        },
        other => other,
    })
}
