//! Dense voxel grids: the low-resolution input, the ground-truth phantom and
//! the reconstructed output all live in a [`VoxelVolume`].
//!
//! Axis order is x-fastest everywhere: voxel `(x, y, z)` is stored at
//! `x + nx * (y + ny * z)`. A volume is centred on the world origin, so voxel
//! `i` along an axis has world coordinate `(i + 0.5) * spacing - extent`.

mod filter;
mod io;
mod phantom;

pub(crate) use filter::gaussian_kernel;
pub use filter::{degrade, gaussian_blur, resample_cubic, resample_trilinear};
pub use io::{decode_volume, encode_volume, read_volume, write_volume, VolumeSidecar, AXIS_ORDER};
pub use phantom::{make_phantom, shepp_logan_3d, EllipsoidSpec};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    /// Clipping window the values were normalized from.
    pub intensity_range: (f64, f64),
}

impl VoxelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::dims(n, data.len()));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            intensity_range: (0.0, 1.0),
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::filled(dims, spacing, 0.0)
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel index.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn with_intensity_range(mut self, range: (f64, f64)) -> Self {
        self.intensity_range = range;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// World half-extent along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            0.5 * self.dims[0] as f64 * self.spacing[0],
            0.5 * self.dims[1] as f64 * self.spacing[1],
            0.5 * self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// World position of a voxel centre.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let e = self.extent();
        [
            (x as f64 + 0.5) * self.spacing[0] - e[0],
            (y as f64 + 0.5) * self.spacing[1] - e[1],
            (z as f64 + 0.5) * self.spacing[2] - e[2],
        ]
    }

    /// Trilinear sample at a world position. Sample coordinates are clamped
    /// to the outermost voxel centres, so the volume extends its edge values
    /// up to the cube boundary.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let e = self.extent();
        let mut i0 = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let c = ((p[a] + e[a]) / self.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let f = c.floor();
            let mut i = f as usize;
            let mut t = c - f;
            if i >= n - 1 {
                i = n.saturating_sub(2);
                t = if n == 1 { 0.0 } else { 1.0 };
            }
            i0[a] = i;
            frac[a] = t;
        }
        let nx = self.dims[0];
        let nxy = nx * self.dims[1];
        let step = [
            usize::from(self.dims[0] > 1),
            if self.dims[1] > 1 { nx } else { 0 },
            if self.dims[2] > 1 { nxy } else { 0 },
        ];
        let base = i0[0] + nx * i0[1] + nxy * i0[2];
        let d = &self.data;
        let c00 = d[base] * (1.0 - frac[0]) + d[base + step[0]] * frac[0];
        let c10 = d[base + step[1]] * (1.0 - frac[0]) + d[base + step[1] + step[0]] * frac[0];
        let c01 = d[base + step[2]] * (1.0 - frac[0]) + d[base + step[2] + step[0]] * frac[0];
        let c11 = d[base + step[2] + step[1]] * (1.0 - frac[0]) + d[base + step[2] + step[1] + step[0]] * frac[0];
        let c0 = c00 * (1.0 - frac[1]) + c10 * frac[1];
        let c1 = c01 * (1.0 - frac[1]) + c11 * frac[1];
        c0 * (1.0 - frac[2]) + c1 * frac[2]
    }

    /// Extracts the sub-box starting at `origin` with size `dims`.
    pub fn crop(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<VoxelVolume> {
        for a in 0..3 {
            if origin[a] + dims[a] > self.dims[a] {
                return Err(Error::invalid(format!(
                    "crop {origin:?}+{dims:?} exceeds volume {:?}",
                    self.dims
                )));
            }
        }
        VoxelVolume::from_fn(dims, self.spacing, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VoxelVolume {
        VoxelVolume {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &VoxelVolume) -> Result<VoxelVolume> {
        if self.dims != other.dims {
            return Err(Error::dims(self.dims, other.dims));
        }
        Ok(VoxelVolume {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    pub fn clip(&self, lo: f64, hi: f64) -> VoxelVolume {
        self.map(|v| v.clamp(lo, hi))
    }
}

/// Clamps to `[lo, hi]` and maps that window linearly onto `[0, 1]`.
pub fn clip_normalize(vol: &VoxelVolume, lo: f64, hi: f64) -> Result<VoxelVolume> {
    if !(lo < hi) {
        return Err(Error::invalid(format!(
            "clip window requires lo < hi, got [{lo}, {hi}]"
        )));
    }
    let w = hi - lo;
    Ok(vol.map(|v| (v.clamp(lo, hi) - lo) / w).with_intensity_range((lo, hi)))
}
