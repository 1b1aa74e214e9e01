//! Circular cone-beam scanner model.
//!
//! Convention: right-handed world frame, rotation about +z. At angle 0 the
//! source sits at `(-dso, 0, 0)`, the detector centre at `(dsd - dso, 0, 0)`,
//! the detector `u` axis points along +y and `v` along +z. Angle `theta`
//! rotates source and detector together by `R_z(theta)`.
//!
//! Detector pixel `(iu, iv)` has its centre at
//! `u = (iu + 0.5 - nu / 2) * su`, `v = (iv + 0.5 - nv / 2) * sv`, which in
//! continuous pixel coordinates is simply `(iu, iv)`.

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::math::{add, dot, mat_vec, normalize, rot_z, scale, sub, Mat3, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub dso: f64,
    pub dsd: f64,
    /// `(nu, nv)` detector pixels.
    pub detector_dims: [usize; 2],
    /// World units per pixel along `u` and `v`.
    pub detector_spacing: [f64; 2],
    pub n_angles: usize,
    /// Radians; angles are uniform on `[angle_start, angle_end)`.
    pub angle_start: f64,
    pub angle_end: f64,
    /// World half-extents of the reconstruction cube.
    pub volume_extent: [f64; 3],
}

impl GeometryConfig {
    /// Near-parallel beam: the source is pushed far away with the detector
    /// one unit behind the origin, so magnification is `1 + 1e-6`.
    pub fn parallel_like(
        detector_dims: [usize; 2],
        detector_spacing: [f64; 2],
        n_angles: usize,
        angle_end: f64,
        volume_extent: [f64; 3],
    ) -> Self {
        Self {
            dso: 1.0e6,
            dsd: 1.0e6 + 1.0,
            detector_dims,
            detector_spacing,
            n_angles,
            angle_start: 0.0,
            angle_end,
            volume_extent,
        }
    }
}

/// Per-angle source position and detector frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleFrame {
    pub angle: f64,
    pub source: Vec3,
    pub detector_center: Vec3,
    /// Rows are the source-to-detector axis, then `u`, then `v`: the
    /// world-to-camera rotation.
    pub world_to_camera: Mat3,
}

impl AngleFrame {
    pub fn forward(&self) -> Vec3 {
        self.world_to_camera[0]
    }
    pub fn u_axis(&self) -> Vec3 {
        self.world_to_camera[1]
    }
    pub fn v_axis(&self) -> Vec3 {
        self.world_to_camera[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Whether the ray crosses the reconstruction cube.
    pub fn hits(&self) -> bool {
        self.t_near <= self.t_far
    }

    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScannerGeometry {
    config: GeometryConfig,
    frames: Vec<AngleFrame>,
}

impl ScannerGeometry {
    pub fn new(config: GeometryConfig) -> Result<Self> {
        let c = &config;
        if !(c.dso > 0.0 && c.dso < c.dsd) || !c.dsd.is_finite() {
            return Err(Error::invalid(format!(
                "geometry requires 0 < dso < dsd, got dso={} dsd={}",
                c.dso, c.dsd
            )));
        }
        if c.n_angles == 0 {
            return Err(Error::invalid("n_angles must be >= 1"));
        }
        if c.detector_dims.contains(&0)
            || c.detector_spacing.iter().any(|&s| !(s > 0.0))
            || c.volume_extent.iter().any(|&e| !(e > 0.0))
        {
            return Err(Error::invalid(
                "detector dims, spacing and volume extent must be positive",
            ));
        }
        if !(c.angle_end > c.angle_start) {
            return Err(Error::invalid("angle range must be increasing"));
        }
        let radius = c.volume_extent[0].hypot(c.volume_extent[1]);
        if c.dso <= radius {
            return Err(Error::invalid(format!(
                "source at dso={} lies inside the volume's bounding cylinder (radius {radius})",
                c.dso
            )));
        }
        let step = (c.angle_end - c.angle_start) / c.n_angles as f64;
        let frames = (0..c.n_angles)
            .map(|k| {
                let angle = c.angle_start + k as f64 * step;
                let r = rot_z(angle);
                let forward = mat_vec(&r, [1.0, 0.0, 0.0]);
                let u = mat_vec(&r, [0.0, 1.0, 0.0]);
                let v = [0.0, 0.0, 1.0];
                AngleFrame {
                    angle,
                    source: scale(forward, -c.dso),
                    detector_center: scale(forward, c.dsd - c.dso),
                    world_to_camera: [forward, u, v],
                }
            })
            .collect();
        let geom = Self { config, frames };
        geom.check_footprint()?;
        Ok(geom)
    }

    fn check_footprint(&self) -> Result<()> {
        let e = self.config.volume_extent;
        let half = [
            0.5 * self.config.detector_dims[0] as f64 * self.config.detector_spacing[0],
            0.5 * self.config.detector_dims[1] as f64 * self.config.detector_spacing[1],
        ];
        for (k, f) in self.frames.iter().enumerate() {
            for corner in 0..8 {
                let p = [
                    if corner & 1 == 0 { -e[0] } else { e[0] },
                    if corner & 2 == 0 { -e[1] } else { e[1] },
                    if corner & 4 == 0 { -e[2] } else { e[2] },
                ];
                let c = mat_vec(&f.world_to_camera, sub(p, f.source));
                let u = self.config.dsd * c[1] / c[0];
                let v = self.config.dsd * c[2] / c[0];
                if u.abs() > half[0] + 1e-9 || v.abs() > half[1] + 1e-9 {
                    return Err(Error::invalid(format!(
                        "detector half-size {half:?} does not cover the volume footprint at angle {k} (corner projects to ({u:.4}, {v:.4}))"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    pub fn n_angles(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, angle_index: usize) -> Result<&AngleFrame> {
        self.frames.get(angle_index).ok_or_else(|| {
            Error::invalid(format!(
                "angle index {angle_index} out of range 0..{}",
                self.frames.len()
            ))
        })
    }

    pub fn frames(&self) -> &[AngleFrame] {
        &self.frames
    }

    pub fn angles(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.angle).collect()
    }

    pub fn angle_step(&self) -> f64 {
        (self.config.angle_end - self.config.angle_start) / self.config.n_angles as f64
    }

    pub fn detector_dims(&self) -> [usize; 2] {
        self.config.detector_dims
    }

    pub fn volume_extent(&self) -> [f64; 3] {
        self.config.volume_extent
    }

    /// Detector coordinates (world units) of a continuous pixel position.
    pub fn pixel_to_detector(&self, pu: f64, pv: f64) -> (f64, f64) {
        let c = &self.config;
        (
            (pu + 0.5 - 0.5 * c.detector_dims[0] as f64) * c.detector_spacing[0],
            (pv + 0.5 - 0.5 * c.detector_dims[1] as f64) * c.detector_spacing[1],
        )
    }

    /// Ray from the source through continuous pixel position `(pu, pv)`.
    pub fn ray_through(&self, angle_index: usize, pu: f64, pv: f64) -> Result<Ray> {
        let f = self.frame(angle_index)?;
        let (u, v) = self.pixel_to_detector(pu, pv);
        let target = add(f.detector_center, add(scale(f.u_axis(), u), scale(f.v_axis(), v)));
        let direction = normalize(sub(target, f.source));
        let (t_near, t_far) = slab(f.source, direction, self.config.volume_extent);
        Ok(Ray {
            origin: f.source,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn ray_for_pixel(&self, angle_index: usize, iu: usize, iv: usize) -> Result<Ray> {
        let [nu, nv] = self.config.detector_dims;
        if iu >= nu || iv >= nv {
            return Err(Error::invalid(format!("pixel ({iu}, {iv}) outside detector {nu}x{nv}")));
        }
        self.ray_through(angle_index, iu as f64, iv as f64)
    }

    /// Projects a world point to continuous pixel coordinates plus its depth
    /// along the central axis; `None` when the point is not in front of the
    /// source.
    pub fn project_point(&self, angle_index: usize, p: Vec3) -> Result<Option<(f64, f64, f64)>> {
        let f = self.frame(angle_index)?;
        let c = mat_vec(&f.world_to_camera, sub(p, f.source));
        if c[0] <= 0.0 {
            return Ok(None);
        }
        let cfg = &self.config;
        let pu = cfg.dsd * c[1] / c[0] / cfg.detector_spacing[0] + 0.5 * cfg.detector_dims[0] as f64 - 0.5;
        let pv = cfg.dsd * c[2] / c[0] / cfg.detector_spacing[1] + 0.5 * cfg.detector_dims[1] as f64 - 0.5;
        Ok(Some((pu, pv, c[0])))
    }

    /// Stable identifier of the acquisition, used to tie projection files to
    /// the geometry that produced them.
    pub fn content_hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.config)
                .expect("geometry serializes")
                .as_bytes(),
        )
    }
}

/// Slab intersection with the axis-aligned cube `[-e, e]`. A miss yields
/// `t_near > t_far`.
fn slab(origin: Vec3, dir: Vec3, e: [f64; 3]) -> (f64, f64) {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < -e[a] || origin[a] > e[a] {
                return (f64::INFINITY, f64::NEG_INFINITY);
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((-e[a] - origin[a]) * inv, (e[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0.max(0.0), t1)
}

/// Distance from the source to the detector pixel centre, for checking
/// `dsd / (cos(fan) cos(cone))`-style identities.
pub fn source_to_pixel_distance(geom: &ScannerGeometry, angle_index: usize, iu: usize, iv: usize) -> Result<f64> {
    let f = geom.frame(angle_index)?;
    let (u, v) = geom.pixel_to_detector(iu as f64, iv as f64);
    let target = add(f.detector_center, add(scale(f.u_axis(), u), scale(f.v_axis(), v)));
    let d = sub(target, f.source);
    Ok(dot(d, d).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn desk(n_angles: usize, det: usize) -> GeometryConfig {
        GeometryConfig {
            dso: 8.0,
            dsd: 12.0,
            detector_dims: [det, det],
            detector_spacing: [4.6 / det as f64; 2],
            n_angles,
            angle_start: 0.0,
            angle_end: PI,
            volume_extent: [1.0; 3],
        }
    }

    #[test]
    fn hundred_angles_over_half_turn_step_is_1_8_degrees() {
        let g = ScannerGeometry::new(desk(100, 65)).unwrap();
        assert!((g.angle_step() - PI / 100.0).abs() < 1e-15);
        assert!((g.angle_step().to_degrees() - 1.8).abs() < 1e-12);
        assert_eq!(g.n_angles(), 100);
        assert!((g.angles()[99] - 99.0 * PI / 100.0).abs() < 1e-12);
    }

    #[test]
    fn source_on_negative_x_at_angle_zero() {
        let g = ScannerGeometry::new(desk(4, 65)).unwrap();
        assert_eq!(g.frame(0).unwrap().source, [-8.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_distances_and_small_detector() {
        let mut c = desk(4, 65);
        c.dsd = c.dso;
        assert!(ScannerGeometry::new(c).is_err());
        let mut c = desk(4, 65);
        c.detector_spacing = [0.01, 0.01];
        assert!(ScannerGeometry::new(c).is_err());
        let mut c = desk(4, 65);
        c.n_angles = 0;
        assert!(ScannerGeometry::new(c).is_err());
    }

    #[test]
    fn central_pixel_ray_goes_along_x_through_origin() {
        let g = ScannerGeometry::new(desk(4, 65)).unwrap();
        let r = g.ray_for_pixel(0, 32, 32).unwrap();
        assert!((r.direction[0] - 1.0).abs() < 1e-15);
        assert!(r.direction[1].abs() < 1e-15 && r.direction[2].abs() < 1e-15);
        assert!((r.t_near - 7.0).abs() < 1e-12 && (r.t_far - 9.0).abs() < 1e-12);
        let mid = r.at(8.0);
        assert!(mid.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn out_of_range_indices() {
        let g = ScannerGeometry::new(desk(4, 65)).unwrap();
        assert!(g.ray_for_pixel(4, 0, 0).is_err());
        assert!(g.ray_for_pixel(0, 65, 0).is_err());
        assert!(g.ray_for_pixel(0, 0, 65).is_err());
    }

    #[test]
    fn ray_missing_cube_flags_empty_interval() {
        let mut c = desk(1, 65);
        c.detector_spacing = [0.2, 0.2];
        let g = ScannerGeometry::new(c).unwrap();
        let r = g.ray_for_pixel(0, 0, 0).unwrap();
        assert!(!r.hits());
        assert!(r.t_near > r.t_far);
    }

    /// Hand-rolled oracle: rotate the undeformed pixel position by the angle
    /// and normalize the difference to the rotated source.
    #[test]
    fn corner_pixel_directions_match_scalar_oracle() {
        let g = ScannerGeometry::new(desk(7, 64)).unwrap();
        let k = 5;
        let theta = 5.0 * PI / 7.0;
        let (s, c) = theta.sin_cos();
        let spacing = 4.6 / 64.0;
        for (iu, iv) in [(0, 0), (63, 0), (0, 63), (63, 63), (1, 62), (62, 1), (31, 0), (0, 31)] {
            let u = (iu as f64 + 0.5 - 32.0) * spacing;
            let v = (iv as f64 + 0.5 - 32.0) * spacing;
            // Unrotated: source (-8,0,0), pixel (4, u, v).
            let px = c * 4.0 - s * u;
            let py = s * 4.0 + c * u;
            let sx = -8.0 * c;
            let sy = -8.0 * s;
            let (dx, dy, dz) = (px - sx, py - sy, v);
            let n = (dx * dx + dy * dy + dz * dz).sqrt();
            let r = g.ray_for_pixel(k, iu, iv).unwrap();
            assert!((r.direction[0] - dx / n).abs() < 1e-12);
            assert!((r.direction[1] - dy / n).abs() < 1e-12);
            assert!((r.direction[2] - dz / n).abs() < 1e-12);
            let dnorm = dot(r.direction, r.direction).sqrt();
            assert!((dnorm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotating_scene_with_angle_leaves_rays_invariant() {
        let g = ScannerGeometry::new(desk(8, 64)).unwrap();
        let base = g.ray_for_pixel(0, 10, 50).unwrap();
        for k in [1, 2, 5, 7] {
            let r = g.ray_for_pixel(k, 10, 50).unwrap();
            // Rotating the ray back by -theta recovers the angle-0 ray.
            let back = rot_z(-g.angles()[k]);
            let o = mat_vec(&back, r.origin);
            let d = mat_vec(&back, r.direction);
            for a in 0..3 {
                assert!((o[a] - base.origin[a]).abs() < 1e-12);
                assert!((d[a] - base.direction[a]).abs() < 1e-12);
            }
            // The cube is only symmetric under quarter turns.
            if (g.angles()[k] / (PI / 2.0)).fract().abs() < 1e-12 {
                assert!((r.t_near - base.t_near).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn source_pixel_distance_matches_fan_cone_angles() {
        let g = ScannerGeometry::new(desk(3, 64)).unwrap();
        for (iu, iv) in [(0, 0), (12, 40), (63, 5)] {
            let (u, v) = g.pixel_to_detector(iu as f64, iv as f64);
            let fan = (u / 12.0).atan();
            let cone = (v / (12.0f64.hypot(u))).atan();
            let expect = 12.0 / (fan.cos() * cone.cos());
            let got = source_to_pixel_distance(&g, 2, iu, iv).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn origin_projects_to_detector_centre() {
        let g = ScannerGeometry::new(desk(3, 64)).unwrap();
        let (pu, pv, depth) = g.project_point(1, [0.0; 3]).unwrap().unwrap();
        assert!((pu - 31.5).abs() < 1e-12 && (pv - 31.5).abs() < 1e-12);
        assert!((depth - 8.0).abs() < 1e-12);
    }
}
