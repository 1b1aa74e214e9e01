//! Signed-density 3D Gaussian primitives.

mod activation;
mod checkpoint;
mod eval;
mod init;

pub use activation::{activate_density, activate_density_softplus, inverse_activate, inverse_softplus, Activation};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use eval::{
    query_density, query_density_grad, query_density_with_cutoff, voxelize, voxelize_backward, Prepared, VoxelGrid,
    CUTOFF_SIGMA,
};
pub use init::{init_from_volume, mean_nearest_neighbor_distance, InitOptions, RESIDUAL_INIT_DENSITY};

use crate::math::{quat_normalize, quat_to_mat, Mat3, Quat, Vec3};
use crate::{Error, Result};

pub const MIN_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub position: Vec3,
    /// Natural log of the per-axis standard deviation, world units.
    pub log_scale: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: Quat,
    /// Pre-activation density.
    pub raw_density: f64,
}

impl Gaussian3D {
    pub fn isotropic(position: Vec3, scale: f64, raw_density: f64) -> Self {
        Self {
            position,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            raw_density,
        }
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    /// Rotation of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_mat(quat_normalize(self.rotation))
    }

    /// `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation_matrix();
        let s2 = self.scales().map(|s| s * s);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
            }
        }
        out
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.raw_density.is_finite()
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub raw_density: f64,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        for k in 0..3 {
            self.position[k] += o.position[k];
            self.log_scale[k] += o.log_scale[k];
        }
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.raw_density += o.raw_density;
    }

    pub fn scaled(mut self, s: f64) -> GaussianGrad {
        self.position = self.position.map(|v| v * s);
        self.log_scale = self.log_scale.map(|v| v * s);
        self.rotation = self.rotation.map(|v| v * s);
        self.raw_density *= s;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.log_scale)
            .chain(&self.rotation)
            .all(|v| v.is_finite())
            && self.raw_density.is_finite()
    }

    /// Ties the three scale gradients and drops rotation, for the isotropic
    /// parameterization.
    pub(crate) fn make_isotropic(&mut self) {
        let s: f64 = self.log_scale.iter().sum();
        self.log_scale = [s; 3];
        self.rotation = [0.0; 4];
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub activation: Activation,
    pub max_count: usize,
    pub isotropic: bool,
    /// Upper bound on any per-axis standard deviation.
    pub max_scale: f64,
}

impl FieldConfig {
    pub fn leaky(gamma: f64) -> Self {
        Self {
            activation: Activation::LeakyRelu { gamma },
            max_count: 500_000,
            isotropic: false,
            max_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        if self.max_count == 0 {
            return Err(Error::invalid("max_count must be >= 1"));
        }
        if !(self.max_scale > MIN_SCALE) {
            return Err(Error::invalid(format!("max_scale must exceed {MIN_SCALE}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub gaussians: Vec<Gaussian3D>,
    pub config: FieldConfig,
}

impl GaussianField {
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            gaussians: Vec::new(),
            config,
        })
    }

    pub fn with_gaussians(config: FieldConfig, gaussians: Vec<Gaussian3D>) -> Result<Self> {
        let mut f = Self::new(config)?;
        if gaussians.len() > config.max_count {
            return Err(Error::invalid(format!(
                "{} Gaussians exceed the cap {}",
                gaussians.len(),
                config.max_count
            )));
        }
        f.gaussians = gaussians;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    /// Activated density of Gaussian `i`.
    pub fn density(&self, i: usize) -> f64 {
        self.config.activation.activate(self.gaussians[i].raw_density)
    }

    /// Renormalizes quaternions and clamps scales into `[MIN_SCALE, max_scale]`.
    pub fn enforce_invariants(&mut self) {
        let (lo, hi) = (MIN_SCALE.ln(), self.config.max_scale.ln());
        let iso = self.config.isotropic;
        for g in &mut self.gaussians {
            g.rotation = if iso {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                quat_normalize(g.rotation)
            };
            g.log_scale = g.log_scale.map(|v| v.clamp(lo, hi));
        }
    }
}
