//! Shared desk-scale setup for integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use ctsr_core::ddnm::DegradationOp;
use ctsr_core::geometry::{GeometryConfig, ScannerGeometry};
use ctsr_core::projector::{binned_geometry, default_step, project_all, ProjectionSet};
use ctsr_core::volume::{degrade, make_phantom, resample_cubic, resample_trilinear, shepp_logan_3d, VoxelVolume};

/// Cone-beam scanner around the `[-1, 1]^3` cube, `n_angles` over 180 degrees.
pub fn desk_geometry(det: usize, n_angles: usize) -> ScannerGeometry {
    ScannerGeometry::new(GeometryConfig {
        dso: 8.0,
        dsd: 12.0,
        detector_dims: [det, det],
        detector_spacing: [4.6 / det as f64; 2],
        n_angles,
        angle_start: 0.0,
        angle_end: PI,
        volume_extent: [1.0; 3],
    })
    .unwrap()
}

pub struct Desk {
    pub factor: usize,
    pub gt: VoxelVolume,
    pub lr: VoxelVolume,
    pub lr_cubic: VoxelVolume,
    pub lr_trilinear: VoxelVolume,
    pub hr_geom: ScannerGeometry,
    /// Projections of the ground truth on the full-resolution detector.
    pub gt_proj: ProjectionSet,
    /// Those projections binned onto the low-resolution detector.
    pub lr_meas: ProjectionSet,
    /// Reprojection of the cubic-upsampled LR volume.
    pub lr_proj: ProjectionSet,
}

impl Desk {
    pub fn new(n: usize, factor: usize, det: usize, n_angles: usize) -> Desk {
        let gt = make_phantom(&shepp_logan_3d(), [n; 3]).unwrap();
        let lr = degrade(&gt, factor, None).unwrap();
        let lr_cubic = resample_cubic(&lr, factor).unwrap();
        let lr_trilinear = resample_trilinear(&lr, factor).unwrap();
        let hr_geom = desk_geometry(det, n_angles);
        let gt_proj = project_all(&gt, &hr_geom, default_step(&gt)).unwrap();
        let op = DegradationOp::new(factor, [det, det]).unwrap();
        let binned = gt_proj.projections().iter().map(|p| op.apply(p).unwrap()).collect();
        let lr_meas = ProjectionSet::new(binned_geometry(&hr_geom, factor).unwrap(), binned).unwrap();
        let lr_proj = project_all(&lr_cubic, &hr_geom, default_step(&lr_cubic)).unwrap();
        Desk {
            factor,
            gt,
            lr,
            lr_cubic,
            lr_trilinear,
            hr_geom,
            gt_proj,
            lr_meas,
            lr_proj,
        }
    }
}
