use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FieldConfig, Gaussian3D, GaussianField, MIN_SCALE};
use crate::math::Vec3;
use crate::volume::VoxelVolume;
use crate::{Error, Result};

/// Initial activated density of every Gaussian in residual mode, small
/// enough that the first rendered residual is essentially zero.
pub const RESIDUAL_INIT_DENSITY: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub n_init: usize,
    pub density_thresh: f64,
    /// Scale as a multiple of the mean nearest-neighbour spacing.
    pub scale_term: f64,
    pub residual_mode: bool,
    pub seed: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            n_init: 50_000,
            density_thresh: 0.05,
            scale_term: 0.15,
            residual_mode: true,
            seed: 0,
        }
    }
}

/// Seeds a field at voxel centres drawn uniformly from voxels at or above
/// the density threshold.
pub fn init_from_volume(vol: &VoxelVolume, opts: &InitOptions, config: FieldConfig) -> Result<GaussianField> {
    if opts.n_init == 0 {
        return Err(Error::invalid("n_init must be >= 1"));
    }
    if !(opts.scale_term > 0.0) {
        return Err(Error::invalid("scale_term must be > 0"));
    }
    if opts.n_init > config.max_count {
        return Err(Error::invalid(format!(
            "n_init {} exceeds max_count {}",
            opts.n_init, config.max_count
        )));
    }
    let [nx, ny, _] = vol.dims();
    let eligible: Vec<usize> = vol
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= opts.density_thresh)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "no voxel reaches the density threshold {}",
            opts.density_thresh
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks: Vec<usize> = if opts.n_init <= eligible.len() {
        let mut idx = sample(&mut rng, eligible.len(), opts.n_init).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| eligible[k]).collect()
    } else {
        log::warn!(
            "only {} voxels above threshold for {} Gaussians; sampling with replacement",
            eligible.len(),
            opts.n_init
        );
        (0..opts.n_init)
            .map(|_| eligible[rng.random_range(0..eligible.len())])
            .collect()
    };
    let positions: Vec<Vec3> = picks
        .iter()
        .map(|&i| vol.voxel_center(i % nx, (i / nx) % ny, i / (nx * ny)))
        .collect();
    let min_spacing = vol.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let nn = mean_nearest_neighbor_distance(&positions).unwrap_or(min_spacing);
    let scale = (opts.scale_term * nn).clamp(MIN_SCALE, config.max_scale);
    let gaussians = picks
        .iter()
        .zip(&positions)
        .map(|(&i, &p)| {
            let rho = if opts.residual_mode {
                RESIDUAL_INIT_DENSITY
            } else {
                vol.data()[i]
            };
            let raw = config.activation.inverse(rho)?;
            Ok(Gaussian3D::isotropic(p, scale, raw))
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianField::with_gaussians(config, gaussians)
}

/// Mean distance from each point to its nearest distinct neighbour, via a
/// uniform hash grid. `None` when fewer than two distinct points exist.
pub fn mean_nearest_neighbor_distance(points: &[Vec3]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let vol: f64 = (0..3).map(|a| (hi[a] - lo[a]).max(1e-12)).product();
    let cell = (vol / points.len() as f64).cbrt().max(1e-9);
    let key = |p: &Vec3| [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell).floor() as i64);
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let max_ring = [0, 1, 2]
        .map(|a| ((hi[a] - lo[a]) / cell).ceil() as i64 + 1)
        .into_iter()
        .max()
        .unwrap_or(1);
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            // Every point in ring r is at least (r - 1) * cell away.
            if best.is_finite() && best <= (r - 1) as f64 * cell {
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(list) = cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let q = points[j];
                                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                                if d > 0.0 && d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
        }
        if best.is_finite() {
            total += best;
            counted += 1;
        }
    }
    (counted > 0).then(|| total / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, shepp_logan_3d};

    #[test]
    fn uniform_volume_full_mode() {
        let vol = VoxelVolume::filled([16; 3], [2.0 / 16.0; 3], 0.5).unwrap();
        let opts = InitOptions {
            n_init: 100,
            residual_mode: false,
            ..Default::default()
        };
        let f = init_from_volume(&vol, &opts, FieldConfig::leaky(0.09)).unwrap();
        assert_eq!(f.len(), 100);
        assert!(f.gaussians.iter().all(|g| g.raw_density == 0.5));
        assert!(f.gaussians.iter().all(|g| g.log_scale[0] == g.log_scale[2]));
    }

    #[test]
    fn zero_volume_is_rejected() {
        let vol = VoxelVolume::zeros([8; 3], [0.25; 3]).unwrap();
        assert!(init_from_volume(
            &vol,
            &InitOptions {
                n_init: 10,
                ..Default::default()
            },
            FieldConfig::leaky(0.09)
        )
        .is_err());
    }

    #[test]
    fn oversubscription_samples_with_replacement() {
        let mut vol = VoxelVolume::zeros([8; 3], [0.25; 3]).unwrap();
        vol.set(1, 2, 3, 1.0);
        vol.set(5, 5, 5, 1.0);
        let f = init_from_volume(
            &vol,
            &InitOptions {
                n_init: 10,
                ..Default::default()
            },
            FieldConfig::leaky(0.09),
        )
        .unwrap();
        assert_eq!(f.len(), 10);
        let d = 29f64.sqrt() * 0.25;
        assert!((f.gaussians[0].scales()[0] - 0.15 * d).abs() < 1e-12);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let vol = make_phantom(&shepp_logan_3d(), [32; 3]).unwrap();
        let opts = InitOptions {
            n_init: 500,
            seed: 4,
            ..Default::default()
        };
        let a = init_from_volume(&vol, &opts, FieldConfig::leaky(0.09)).unwrap();
        let b = init_from_volume(&vol, &opts, FieldConfig::leaky(0.09)).unwrap();
        assert_eq!(a, b);
        assert!(a.gaussians.iter().all(|g| g.raw_density == RESIDUAL_INIT_DENSITY));
    }

    #[test]
    fn nearest_neighbor_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..400).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let brute: f64 = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                pts.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / pts.len() as f64;
        let fast = mean_nearest_neighbor_distance(&pts).unwrap();
        assert!((fast - brute).abs() < 1e-12);
        assert!(mean_nearest_neighbor_distance(&pts[..1]).is_none());
    }
}
