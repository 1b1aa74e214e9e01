use super::VoxelVolume;
use crate::math::{mat_vec, sub, Mat3};
use crate::{Error, Result};

/// One ellipsoid of an additive phantom, in normalized `[-1, 1]^3`
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// z-x-z Euler angles in radians.
    pub rotation: [f64; 3],
    pub density_delta: f64,
}

impl EllipsoidSpec {
    pub fn sphere(center: [f64; 3], radius: f64, density_delta: f64) -> Self {
        Self {
            center,
            semi_axes: [radius; 3],
            rotation: [0.0; 3],
            density_delta,
        }
    }

    /// World-to-body rotation for the z-x-z Euler angles.
    fn body_rotation(&self) -> Mat3 {
        let [phi, theta, psi] = self.rotation;
        let (sf, cf) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = psi.sin_cos();
        [
            [cp * cf - ct * sf * sp, cp * sf + ct * cf * sp, sp * st],
            [-sp * cf - ct * sf * cp, -sp * sf + ct * cf * cp, cp * st],
            [st * sf, -st * cf, ct],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = mat_vec(&self.body_rotation(), sub(p, self.center));
        let mut s = 0.0;
        for a in 0..3 {
            let r = q[a] / self.semi_axes[a];
            s += r * r;
        }
        s <= 1.0
    }
}

/// The modified 3D Shepp-Logan head phantom (ten ellipsoids).
pub fn shepp_logan_3d() -> Vec<EllipsoidSpec> {
    const TABLE: [[f64; 10]; 10] = [
        [1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0, 0.0, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0, 0.0, 10.0],
        [-0.2, 0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0, 0.0, 10.0],
        [0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0, 0.0, 0.0],
        [0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0, 0.0, 0.0],
        [0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0, 0.0, 0.0],
        [0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0, 0.0, 0.0],
        [0.1, 0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0, 0.0, 0.0],
        [0.1, 0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0, 0.0, 0.0],
    ];
    TABLE
        .iter()
        .map(|r| EllipsoidSpec {
            density_delta: r[0],
            semi_axes: [r[1], r[2], r[3]],
            center: [r[4], r[5], r[6]],
            rotation: [r[7].to_radians(), r[8].to_radians(), r[9].to_radians()],
        })
        .collect()
}

/// Rasterizes ellipsoids onto a `dims` grid spanning `[-1, 1]^3`. Each voxel
/// holds the summed `density_delta` of the ellipsoids containing its centre,
/// clipped to `[0, 1]`.
pub fn make_phantom(specs: &[EllipsoidSpec], dims: [usize; 3]) -> Result<VoxelVolume> {
    if specs.is_empty() {
        return Err(Error::invalid("phantom needs at least one ellipsoid"));
    }
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::invalid(format!(
            "phantom dims must be >= 8 per axis, got {dims:?}"
        )));
    }
    if let Some(bad) = specs.iter().find(|s| s.semi_axes.iter().any(|&a| !(a > 0.0))) {
        return Err(Error::invalid(format!(
            "semi-axes must be positive: {:?}",
            bad.semi_axes
        )));
    }
    let spacing = [2.0 / dims[0] as f64, 2.0 / dims[1] as f64, 2.0 / dims[2] as f64];
    let mut vol = VoxelVolume::zeros(dims, spacing)?;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = vol.voxel_center(x, y, z);
                let v: f64 = specs.iter().filter(|s| s.contains(p)).map(|s| s.density_delta).sum();
                vol.set(x, y, z, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(vol)
}
