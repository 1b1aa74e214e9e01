//! Point queries and grid voxelization, with gradients.

use rayon::prelude::*;

use super::{Activation, Gaussian3D, GaussianField, GaussianGrad};
use crate::math::{mat_t_vec, mat_vec, quat_mat_backward, Mat3, Vec3};
use crate::volume::VoxelVolume;
use crate::{Error, Result};

/// Contributions with Mahalanobis distance above this many standard
/// deviations are dropped; the neglected mass at the boundary is `e^-4.5`.
pub const CUTOFF_SIGMA: f64 = 3.0;

/// A reconstruction grid: `dims` voxels of size `spacing`, centred on the
/// origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl VoxelGrid {
    pub fn of(vol: &VoxelVolume) -> Self {
        Self {
            dims: vol.dims(),
            spacing: vol.spacing(),
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * self.dims[a] as f64 * self.spacing[a])
    }

    /// World coordinate of voxel index `i` along axis `a`.
    #[inline]
    pub fn coord(&self, a: usize, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing[a] - 0.5 * self.dims[a] as f64 * self.spacing[a]
    }

    fn check_crop(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if dims[a] == 0 || origin[a] + dims[a] > self.dims[a] {
                return Err(Error::invalid(format!(
                    "crop origin {origin:?} dims {dims:?} exceeds grid {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Inclusive index range along axis `a` whose centres lie within
    /// `[lo, hi]`, intersected with `[0, n)`. `None` when empty.
    fn index_range(&self, a: usize, lo: f64, hi: f64, origin: usize, n: usize) -> Option<(usize, usize)> {
        let e = 0.5 * self.dims[a] as f64 * self.spacing[a];
        let first = ((lo + e) / self.spacing[a] - 0.5).ceil() - origin as f64;
        let last = ((hi + e) / self.spacing[a] - 0.5).floor() - origin as f64;
        let first = first.max(0.0);
        let last = last.min(n as f64 - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }
}

/// Per-Gaussian quantities reused across every evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct Prepared {
    pub position: Vec3,
    pub rot: Mat3,
    pub inv_s2: Vec3,
    pub rho: f64,
    pub slope: f64,
    /// Conservative half-size of the axis-aligned box holding the cutoff
    /// ellipsoid.
    pub half_box: Vec3,
}

impl Prepared {
    pub fn new(g: &Gaussian3D, act: Activation, cutoff: f64) -> Self {
        let rot = g.rotation_matrix();
        let s = g.scales();
        let half_box = [0, 1, 2].map(|i| {
            let var: f64 = (0..3).map(|k| rot[i][k] * rot[i][k] * s[k] * s[k]).sum();
            cutoff * var.sqrt() * (1.0 + 1e-9)
        });
        Self {
            position: g.position,
            rot,
            inv_s2: s.map(|v| 1.0 / (v * v)),
            rho: act.activate(g.raw_density),
            slope: act.slope(g.raw_density),
            half_box,
        }
    }

    /// Offset from the centre, its rotated coordinates and the squared
    /// Mahalanobis distance.
    #[inline]
    pub fn mahalanobis(&self, x: Vec3) -> (Vec3, Vec3, f64) {
        let d = [
            x[0] - self.position[0],
            x[1] - self.position[1],
            x[2] - self.position[2],
        ];
        let q = mat_t_vec(&self.rot, d);
        let m = q[0] * q[0] * self.inv_s2[0] + q[1] * q[1] * self.inv_s2[1] + q[2] * q[2] * self.inv_s2[2];
        (d, q, m)
    }
}

/// Running sums for one Gaussian's gradient over many evaluation points.
#[derive(Default, Clone, Copy)]
struct PointGradAcc {
    e: f64,
    dp_local: Vec3,
    dls: Vec3,
    dr: Mat3,
}

impl PointGradAcc {
    /// Adds `upstream * d value(x) / d params` for one point.
    #[inline]
    fn push(&mut self, p: &Prepared, d: Vec3, q: Vec3, m: f64, upstream: f64) {
        let e = (-0.5 * m).exp();
        self.e += upstream * e;
        // d value / d m
        let gm = -0.5 * p.rho * e * upstream;
        for k in 0..3 {
            let w = q[k] * p.inv_s2[k];
            self.dp_local[k] += -2.0 * gm * w;
            self.dls[k] += -2.0 * gm * q[k] * w;
            for j in 0..3 {
                self.dr[j][k] += 2.0 * gm * d[j] * w;
            }
        }
    }

    fn finish(&self, g: &Gaussian3D, p: &Prepared, isotropic: bool) -> GaussianGrad {
        let mut out = GaussianGrad {
            position: mat_vec(&p.rot, self.dp_local),
            log_scale: self.dls,
            rotation: quat_mat_backward(g.rotation, &self.dr),
            raw_density: self.e * p.slope,
        };
        if isotropic {
            out.make_isotropic();
        }
        out
    }
}

fn prepare(field: &GaussianField, cutoff: f64) -> Vec<Prepared> {
    let act = field.activation();
    field
        .gaussians
        .par_iter()
        .map(|g| Prepared::new(g, act, cutoff))
        .collect()
}

/// Density at `x`, summing contributions in storage order.
pub fn query_density(field: &GaussianField, x: Vec3) -> f64 {
    query_density_with_cutoff(field, x, Some(CUTOFF_SIGMA))
}

/// As [`query_density`]; `None` disables the cutoff.
pub fn query_density_with_cutoff(field: &GaussianField, x: Vec3, cutoff: Option<f64>) -> f64 {
    let act = field.activation();
    let c = cutoff.unwrap_or(f64::INFINITY);
    let c2 = c * c;
    let mut acc = 0.0;
    for g in &field.gaussians {
        let p = Prepared::new(g, act, c);
        let (_, _, m) = p.mahalanobis(x);
        if m <= c2 {
            acc += p.rho * (-0.5 * m).exp();
        }
    }
    acc
}

/// Gradient of [`query_density_with_cutoff`] with respect to every Gaussian.
pub fn query_density_grad(field: &GaussianField, x: Vec3, cutoff: Option<f64>) -> Vec<GaussianGrad> {
    let act = field.activation();
    let c = cutoff.unwrap_or(f64::INFINITY);
    field
        .gaussians
        .iter()
        .map(|g| {
            let p = Prepared::new(g, act, c);
            let (d, q, m) = p.mahalanobis(x);
            let mut acc = PointGradAcc::default();
            if m <= c * c {
                acc.push(&p, d, q, m, 1.0);
            }
            acc.finish(g, &p, field.config.isotropic)
        })
        .collect()
}

/// Evaluates the field at the centres of the `dims` crop starting at voxel
/// `origin` of `grid`. Each voxel sums contributions in storage order, so the
/// result equals independent [`query_density`] calls bit for bit.
pub fn voxelize(field: &GaussianField, grid: &VoxelGrid, origin: [usize; 3], dims: [usize; 3]) -> Result<VoxelVolume> {
    grid.check_crop(origin, dims)?;
    let prepared = prepare(field, CUTOFF_SIGMA);
    let c2 = CUTOFF_SIGMA * CUTOFF_SIGMA;
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); dims[2]];
    for (i, p) in prepared.iter().enumerate() {
        if let Some((z0, z1)) = grid.index_range(
            2,
            p.position[2] - p.half_box[2],
            p.position[2] + p.half_box[2],
            origin[2],
            dims[2],
        ) {
            for b in &mut buckets[z0..=z1] {
                b.push(i as u32);
            }
        }
    }
    let [nx, ny, nz] = dims;
    let mut data = vec![0.0; nx * ny * nz];
    data.par_chunks_mut(nx * ny)
        .zip(buckets.par_iter())
        .enumerate()
        .for_each(|(kz, (slice, bucket))| {
            let z = grid.coord(2, origin[2] + kz);
            for &i in bucket {
                let p = &prepared[i as usize];
                let Some((y0, y1)) = grid.index_range(
                    1,
                    p.position[1] - p.half_box[1],
                    p.position[1] + p.half_box[1],
                    origin[1],
                    ny,
                ) else {
                    continue;
                };
                let Some((x0, x1)) = grid.index_range(
                    0,
                    p.position[0] - p.half_box[0],
                    p.position[0] + p.half_box[0],
                    origin[0],
                    nx,
                ) else {
                    continue;
                };
                for ky in y0..=y1 {
                    let y = grid.coord(1, origin[1] + ky);
                    for kx in x0..=x1 {
                        let x = grid.coord(0, origin[0] + kx);
                        let (_, _, m) = p.mahalanobis([x, y, z]);
                        if m <= c2 {
                            slice[kx + nx * ky] += p.rho * (-0.5 * m).exp();
                        }
                    }
                }
            }
        });
    VoxelVolume::new(dims, grid.spacing, data)
}

/// Pulls `dl_dv` (gradient w.r.t. the voxelized crop) back to every Gaussian.
pub fn voxelize_backward(
    field: &GaussianField,
    grid: &VoxelGrid,
    origin: [usize; 3],
    dims: [usize; 3],
    dl_dv: &[f64],
) -> Result<Vec<GaussianGrad>> {
    grid.check_crop(origin, dims)?;
    let [nx, ny, nz] = dims;
    if dl_dv.len() != nx * ny * nz {
        return Err(Error::dims(nx * ny * nz, dl_dv.len()));
    }
    let c2 = CUTOFF_SIGMA * CUTOFF_SIGMA;
    let act = field.activation();
    let iso = field.config.isotropic;
    Ok(field
        .gaussians
        .par_iter()
        .map(|g| {
            let p = Prepared::new(g, act, CUTOFF_SIGMA);
            let mut acc = PointGradAcc::default();
            let range = |a: usize, n: usize| {
                grid.index_range(
                    a,
                    p.position[a] - p.half_box[a],
                    p.position[a] + p.half_box[a],
                    origin[a],
                    n,
                )
            };
            if let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = (range(0, nx), range(1, ny), range(2, nz)) {
                for kz in z0..=z1 {
                    let z = grid.coord(2, origin[2] + kz);
                    for ky in y0..=y1 {
                        let y = grid.coord(1, origin[1] + ky);
                        for kx in x0..=x1 {
                            let u = dl_dv[kx + nx * (ky + ny * kz)];
                            if u == 0.0 {
                                continue;
                            }
                            let x = grid.coord(0, origin[0] + kx);
                            let (d, q, m) = p.mahalanobis([x, y, z]);
                            if m <= c2 {
                                acc.push(&p, d, q, m, u);
                            }
                        }
                    }
                }
            }
            acc.finish(g, &p, iso)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::FieldConfig;
    use super::*;
    use crate::math::{add, quat_normalize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_gaussian(
        rng: &mut ChaCha8Rng,
        spread: f64,
        scale: (f64, f64),
        density: (f64, f64),
    ) -> Gaussian3D {
        Gaussian3D {
            position: [0; 3].map(|_| rng.random_range(-spread..spread)),
            log_scale: [0; 3].map(|_| rng.random_range(scale.0..scale.1).ln()),
            rotation: quat_normalize([0; 4].map(|_| rng.random_range(-1.0..1.0))),
            raw_density: rng.random_range(density.0..density.1),
        }
    }

    fn field_of(gs: Vec<Gaussian3D>) -> GaussianField {
        GaussianField::with_gaussians(FieldConfig::leaky(0.09), gs).unwrap()
    }

    #[test]
    fn single_gaussian_examples() {
        let g = Gaussian3D {
            position: [0.1, -0.2, 0.3],
            log_scale: [0.2f64.ln(), 0.1f64.ln(), 0.3f64.ln()],
            rotation: [1.0, 0.0, 0.0, 0.0],
            raw_density: 0.7,
        };
        let f = field_of(vec![g]);
        assert_eq!(query_density(&f, g.position), 0.7);
        let v = query_density(&f, [0.3, -0.2, 0.3]);
        assert!((v - 0.7 * (-0.5f64).exp()).abs() < 1e-15);
        // Outside 3 sigma along x.
        assert_eq!(query_density(&f, [0.1 + 0.61, -0.2, 0.3]), 0.0);
    }

    #[test]
    fn cutoff_sum_matches_dense_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Jittered lattice of compact Gaussians: the cutoff drops only tails
        // far below the local peak.
        let mut gs = Vec::new();
        for i in 0..50 {
            let c = [(i % 4) as f64, ((i / 4) % 4) as f64, (i / 16) as f64].map(|k| 0.3 * k - 0.45);
            let g = random_gaussian(&mut rng, 0.02, (0.03, 0.05), (0.2, 1.0));
            gs.push(Gaussian3D {
                position: add(c, g.position),
                ..g
            });
        }
        let f = field_of(gs.clone());
        for _ in 0..20 {
            let g = gs[rng.random_range(0..gs.len())];
            let x = add(g.position, [0; 3].map(|_| rng.random_range(-0.03..0.03)));
            let a = query_density(&f, x);
            let b = query_density_with_cutoff(&f, x, None);
            assert!(((a - b) / b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn cutoff_error_is_bounded_by_dropped_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gs: Vec<_> = (0..50)
            .map(|_| random_gaussian(&mut rng, 0.3, (0.1, 0.3), (-1.0, 1.0)))
            .collect();
        let f = field_of(gs);
        let total: f64 = (0..f.len()).map(|i| f.density(i).abs()).sum();
        for _ in 0..20 {
            let x = [0; 3].map(|_| rng.random_range(-0.4..0.4));
            let err = (query_density(&f, x) - query_density_with_cutoff(&f, x, None)).abs();
            let dropped: f64 = f
                .gaussians
                .iter()
                .map(|g| Prepared::new(g, f.activation(), CUTOFF_SIGMA))
                .filter_map(|p| {
                    let m = p.mahalanobis(x).2;
                    (m > CUTOFF_SIGMA * CUTOFF_SIGMA).then(|| p.rho.abs() * (-0.5 * m).exp())
                })
                .sum();
            assert!(err <= dropped * (1.0 + 1e-12) + 1e-15, "{err} > {dropped}");
            assert!(dropped <= (-4.5f64).exp() * total);
        }
    }

    #[test]
    fn leaky_field_can_go_negative_softplus_cannot() {
        let g = Gaussian3D::isotropic([0.0; 3], 0.1, -2.0);
        let f = field_of(vec![g]);
        assert!(query_density(&f, [0.0; 3]) < 0.0);
        let mut c = FieldConfig::leaky(0.09);
        c.activation = Activation::Softplus;
        let f = GaussianField::with_gaussians(c, vec![g]).unwrap();
        assert!(query_density(&f, [0.0; 3]) > 0.0);
    }

    #[test]
    fn empty_field_voxelizes_to_zero() {
        let grid = VoxelGrid {
            dims: [32; 3],
            spacing: [2.0 / 32.0; 3],
        };
        let f = field_of(vec![]);
        let v = voxelize(&f, &grid, [0; 3], [32; 3]).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(voxelize(&f, &grid, [1, 0, 0], [32; 3]).is_err());
    }

    #[test]
    fn centred_gaussian_hits_its_voxel() {
        let grid = VoxelGrid {
            dims: [64; 3],
            spacing: [2.0 / 64.0; 3],
        };
        let c = [grid.coord(0, 20), grid.coord(1, 21), grid.coord(2, 22)];
        let f = field_of(vec![Gaussian3D::isotropic(c, 0.05, 0.8)]);
        let v = voxelize(&f, &grid, [4, 5, 6], [32; 3]).unwrap();
        assert_eq!(v.get(16, 16, 16), 0.8);
    }

    #[test]
    fn voxelize_equals_pointwise_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs: Vec<_> = (0..60)
            .map(|_| random_gaussian(&mut rng, 0.9, (0.02, 0.2), (-1.0, 1.0)))
            .collect();
        let f = field_of(gs);
        let grid = VoxelGrid {
            dims: [48; 3],
            spacing: [2.0 / 48.0; 3],
        };
        let origin = [8, 3, 12];
        let v = voxelize(&f, &grid, origin, [32; 3]).unwrap();
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let p = [
                        grid.coord(0, origin[0] + x),
                        grid.coord(1, origin[1] + y),
                        grid.coord(2, origin[2] + z),
                    ];
                    assert_eq!(v.get(x, y, z), query_density(&f, p));
                }
            }
        }
    }

    fn perturb(g: &mut Gaussian3D, k: usize, h: f64) {
        match k {
            0..=2 => g.position[k] += h,
            3..=5 => g.log_scale[k - 3] += h,
            6..=9 => g.rotation[k - 6] += h,
            _ => g.raw_density += h,
        }
    }

    fn grad_component(g: &GaussianGrad, k: usize) -> f64 {
        match k {
            0..=2 => g.position[k],
            3..=5 => g.log_scale[k - 3],
            6..=9 => g.rotation[k - 6],
            _ => g.raw_density,
        }
    }

    /// Relative comparison with an absolute floor tied to the gradient scale.
    pub(crate) fn close(a: f64, b: f64, rel: f64, scale: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(scale)
    }

    #[test]
    fn query_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let g = random_gaussian(&mut rng, 0.2, (0.1, 0.3), (-1.0, 1.0));
            let g = Gaussian3D {
                raw_density: if g.raw_density.abs() < 0.05 { 0.5 } else { g.raw_density },
                ..g
            };
            let f = field_of(vec![g]);
            let x = [0; 3].map(|_| rng.random_range(-0.2..0.2));
            let grad = query_density_grad(&f, x, None)[0];
            let scale = (0..11).map(|k| grad_component(&grad, k).abs()).fold(0.0, f64::max);
            for k in 0..11 {
                let h = 1e-6;
                let mut fp = f.clone();
                perturb(&mut fp.gaussians[0], k, h);
                let mut fm = f.clone();
                perturb(&mut fm.gaussians[0], k, -h);
                let fd =
                    (query_density_with_cutoff(&fp, x, None) - query_density_with_cutoff(&fm, x, None)) / (2.0 * h);
                let an = grad_component(&grad, k);
                assert!(close(an, fd, 1e-4, 1e-3 * scale), "param {k}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn voxelize_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let grid = VoxelGrid {
            dims: [16; 3],
            spacing: [2.0 / 16.0; 3],
        };
        for trial in 0..20 {
            // Compact Gaussians well inside the crop keep every cutoff
            // boundary away from voxel centres.
            let gs: Vec<_> = (0..3)
                .map(|_| random_gaussian(&mut rng, 0.15, (0.05, 0.12), (0.2, 1.0)))
                .collect();
            let f = field_of(gs);
            let weights: Vec<f64> = (0..8 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |f: &GaussianField| -> f64 {
                let v = voxelize(f, &grid, [4; 3], [8; 3]).unwrap();
                v.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
            };
            let grads = voxelize_backward(&f, &grid, [4; 3], [8; 3], &weights).unwrap();
            for (i, grad) in grads.iter().enumerate() {
                let scale = (0..11).map(|k| grad_component(grad, k).abs()).fold(0.0, f64::max);
                for k in 0..11 {
                    let h = 1e-6;
                    let mut fp = f.clone();
                    perturb(&mut fp.gaussians[i], k, h);
                    let mut fm = f.clone();
                    perturb(&mut fm.gaussians[i], k, -h);
                    let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
                    let an = grad_component(grad, k);
                    assert!(
                        close(an, fd, 1e-4, 1e-3 * scale),
                        "trial {trial} g{i} param {k}: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn isotropic_mode_ties_scale_gradients() {
        let mut c = FieldConfig::leaky(0.09);
        c.isotropic = true;
        let f = GaussianField::with_gaussians(c, vec![Gaussian3D::isotropic([0.0; 3], 0.2, 1.0)]).unwrap();
        let g = query_density_grad(&f, [0.1, 0.05, -0.02], None)[0];
        assert_eq!(g.log_scale[0], g.log_scale[1]);
        assert_eq!(g.rotation, [0.0; 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn query_is_linear_in_densities(seed in 0u64..1000, split in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..10).map(|_| random_gaussian(&mut rng, 0.5, (0.05, 0.3), (0.0, 1.0))).collect();
            let x = [0; 3].map(|_| rng.random_range(-0.5..0.5));
            let whole = query_density(&field_of(gs.clone()), x);
            let a = query_density(&field_of(gs[..split].to_vec()), x);
            let b = query_density(&field_of(gs[split..].to_vec()), x);
            prop_assert!((whole - (a + b)).abs() <= 1e-12 * (1.0 + whole.abs()));
        }

        #[test]
        fn softplus_field_is_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..10).map(|_| random_gaussian(&mut rng, 0.5, (0.05, 0.3), (-5.0, 5.0))).collect();
            let mut c = FieldConfig::leaky(0.09);
            c.activation = Activation::Softplus;
            let f = GaussianField::with_gaussians(c, gs).unwrap();
            let x = [0; 3].map(|_| rng.random_range(-0.5..0.5));
            prop_assert!(query_density(&f, x) >= 0.0);
        }
    }
}
