//! Field checkpoints: one JSON header line, then 11 little-endian f32 per
//! Gaussian (position, log_scale, quaternion w x y z, raw density).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, FieldConfig, Gaussian3D, GaussianField};
use crate::{Error, Result};

const FORMAT: &str = "ctsr-gaussians";
const VERSION: u32 = 1;
const FLOATS_PER_GAUSSIAN: usize = 11;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    /// Leaky-ReLU slope; absent in softplus mode.
    gamma: Option<f64>,
    activation: String,
    isotropic: bool,
    max_count: usize,
    max_scale: f64,
}

pub fn encode_checkpoint(field: &GaussianField) -> Vec<u8> {
    let c = &field.config;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        count: field.len(),
        gamma: c.activation.gamma(),
        activation: match c.activation {
            Activation::LeakyRelu { .. } => "leaky_relu".into(),
            Activation::Softplus => "softplus".into(),
        },
        isotropic: c.isotropic,
        max_count: c.max_count,
        max_scale: c.max_scale,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(field.len() * FLOATS_PER_GAUSSIAN * 4);
    for g in &field.gaussians {
        let vals = g
            .position
            .iter()
            .chain(&g.log_scale)
            .chain(&g.rotation)
            .chain(std::iter::once(&g.raw_density));
        for &v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GaussianField> {
    let bad = |reason: String| Error::Format {
        what: "checkpoint",
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let activation = match (header.activation.as_str(), header.gamma) {
        ("leaky_relu", Some(gamma)) => Activation::LeakyRelu { gamma },
        ("softplus", None) => Activation::Softplus,
        (a, g) => return Err(bad(format!("activation {a:?} with gamma {g:?}"))),
    };
    let config = FieldConfig {
        activation,
        max_count: header.max_count,
        isotropic: header.isotropic,
        max_scale: header.max_scale,
    };
    config.validate()?;
    let payload = &bytes[nl + 1..];
    let expected = header
        .count
        .checked_mul(FLOATS_PER_GAUSSIAN * 4)
        .ok_or_else(|| bad(format!("count {} overflows", header.count)))?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let mut gaussians = Vec::with_capacity(header.count);
    for rec in payload.chunks_exact(FLOATS_PER_GAUSSIAN * 4) {
        let mut v = [0.0f64; FLOATS_PER_GAUSSIAN];
        for (k, c) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        let g = Gaussian3D {
            position: [v[0], v[1], v[2]],
            log_scale: [v[3], v[4], v[5]],
            rotation: [v[6], v[7], v[8], v[9]],
            raw_density: v[10],
        };
        if !g.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        let qn: f64 = g.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-5 {
            return Err(bad(format!("quaternion norm {qn}")));
        }
        gaussians.push(g);
    }
    GaussianField::with_gaussians(config, gaussians)
}

pub fn write_checkpoint(field: &GaussianField, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(field)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<GaussianField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
