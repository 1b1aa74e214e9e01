//! Voxel-grid forward projector and the projection containers.
//!
//! Projections hold raw line integrals (no Beer-Lambert exponentiation). Each
//! pixel value is a trapezoidal sum of trilinear samples along the source ray
//! between its cube entry and exit points.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddnm::TStartRecord;
use crate::geometry::{GeometryConfig, ScannerGeometry};
use crate::hashing::{f32_le_bytes, f64_from_f32_le, sha256_hex};
use crate::volume::VoxelVolume;
use crate::{Error, Result};

/// A detector image, `u`-fastest (row-major with rows along `v`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    dims: [usize; 2],
    data: Vec<f64>,
    pub angle_index: usize,
}

impl Projection {
    pub fn new(dims: [usize; 2], data: Vec<f64>, angle_index: usize) -> Result<Self> {
        if dims[0] == 0 || dims[1] == 0 {
            return Err(Error::invalid(format!(
                "projection dims must be positive, got {dims:?}"
            )));
        }
        if data.len() != dims[0] * dims[1] {
            return Err(Error::dims(dims[0] * dims[1], data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("projection value {v} is not finite")));
        }
        Ok(Self {
            dims,
            data,
            angle_index,
        })
    }

    pub fn zeros(dims: [usize; 2], angle_index: usize) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1]],
            angle_index,
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u + self.dims[0] * v]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Projection {
        Projection {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise `f(self, other)`.
    pub fn zip_with(&self, other: &Projection, f: impl Fn(f64, f64) -> f64) -> Result<Projection> {
        if self.dims != other.dims {
            return Err(Error::dims(self.dims, other.dims));
        }
        Ok(Projection {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        })
    }

    pub fn add(&self, other: &Projection) -> Result<Projection> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Projection) -> Result<Projection> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Adds seeded i.i.d. Gaussian noise of standard deviation `sigma`.
    pub fn with_gaussian_noise(&self, sigma: f64, seed: u64) -> Projection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
    }
}

/// One projection per acquisition angle, all sharing the detector of
/// `geometry`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    geometry: ScannerGeometry,
    projections: Vec<Projection>,
}

impl ProjectionSet {
    pub fn new(geometry: ScannerGeometry, projections: Vec<Projection>) -> Result<Self> {
        if projections.len() != geometry.n_angles() {
            return Err(Error::dims(geometry.n_angles(), projections.len()));
        }
        let dims = geometry.detector_dims();
        for (k, p) in projections.iter().enumerate() {
            if p.dims() != dims {
                return Err(Error::dims(dims, p.dims()));
            }
            if p.angle_index != k {
                return Err(Error::invalid(format!(
                    "projection {k} carries angle index {}",
                    p.angle_index
                )));
            }
        }
        Ok(Self { geometry, projections })
    }

    pub fn geometry(&self) -> &ScannerGeometry {
        &self.geometry
    }

    pub fn projections(&self) -> &[Projection] {
        &self.projections
    }

    pub fn get(&self, angle_index: usize) -> &Projection {
        &self.projections[angle_index]
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn dims(&self) -> [usize; 2] {
        self.geometry.detector_dims()
    }

    pub fn into_projections(self) -> Vec<Projection> {
        self.projections
    }
}

/// Geometry with the detector binned by `factor`: same physical size, pixels
/// `factor` times larger.
pub fn binned_geometry(geom: &ScannerGeometry, factor: usize) -> Result<ScannerGeometry> {
    let mut c = geom.config().clone();
    if factor == 0 || c.detector_dims.iter().any(|d| d % factor != 0) {
        return Err(Error::invalid(format!(
            "detector {:?} not divisible by {factor}",
            c.detector_dims
        )));
    }
    c.detector_dims = [c.detector_dims[0] / factor, c.detector_dims[1] / factor];
    c.detector_spacing = [
        c.detector_spacing[0] * factor as f64,
        c.detector_spacing[1] * factor as f64,
    ];
    ScannerGeometry::new(c)
}

pub(crate) fn check_volume_matches(vol: &VoxelVolume, geom: &ScannerGeometry) -> Result<()> {
    let e = vol.extent();
    let g = geom.volume_extent();
    for a in 0..3 {
        if (e[a] - g[a]).abs() > 1e-9 * g[a].max(1.0) {
            return Err(Error::invalid(format!(
                "volume extent {e:?} does not match geometry extent {g:?}"
            )));
        }
    }
    Ok(())
}

/// Line-integral projection of `vol` at one angle. `step` is the nominal
/// sample spacing in world units; each ray uses the largest uniform spacing
/// not exceeding it.
pub fn forward_project(vol: &VoxelVolume, geom: &ScannerGeometry, angle_index: usize, step: f64) -> Result<Projection> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("ray step must be > 0, got {step}")));
    }
    check_volume_matches(vol, geom)?;
    geom.frame(angle_index)?;
    let [nu, nv] = geom.detector_dims();
    let mut data = vec![0.0; nu * nv];
    data.par_chunks_mut(nu).enumerate().for_each(|(iv, row)| {
        for (iu, out) in row.iter_mut().enumerate() {
            let ray = geom.ray_for_pixel(angle_index, iu, iv).expect("indices are in range");
            if !ray.hits() {
                continue;
            }
            let len = ray.t_far - ray.t_near;
            let n = ((len / step).ceil() as usize).max(1);
            let h = len / n as f64;
            let mut acc = 0.5 * (vol.sample_trilinear(ray.at(ray.t_near)) + vol.sample_trilinear(ray.at(ray.t_far)));
            for k in 1..n {
                acc += vol.sample_trilinear(ray.at(ray.t_near + k as f64 * h));
            }
            *out = acc * h;
        }
    });
    Projection::new([nu, nv], data, angle_index)
}

/// [`forward_project`] at every angle of `geom`.
pub fn project_all(vol: &VoxelVolume, geom: &ScannerGeometry, step: f64) -> Result<ProjectionSet> {
    let projections = (0..geom.n_angles())
        .map(|k| forward_project(vol, geom, k, step))
        .collect::<Result<Vec<_>>>()?;
    ProjectionSet::new(geom.clone(), projections)
}

/// Default ray step: half the smallest voxel spacing.
pub fn default_step(vol: &VoxelVolume) -> f64 {
    0.5 * vol.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionFileEntry {
    pub file: String,
    pub sha256: String,
}

/// Sidecar describing a directory of per-angle `.f32raw` projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionManifest {
    pub geometry_hash: String,
    pub geometry: GeometryConfig,
    /// `[nu, nv]`.
    pub dims: [usize; 2],
    pub angles_deg: Vec<f64>,
    pub files: Vec<ProjectionFileEntry>,
    /// Hash of whatever the set was computed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
    /// Start step chosen per projection by the diffusion upsampler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start: Option<Vec<TStartRecord>>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl ProjectionManifest {
    /// Parses and validates a manifest without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let m: ProjectionManifest = serde_json::from_str(text)?;
        let bad = |reason: String| Error::Format {
            what: "projection manifest",
            reason,
        };
        if m.files.len() != m.angles_deg.len() || m.files.len() != m.geometry.n_angles {
            return Err(bad(format!(
                "{} files, {} angles, geometry has {}",
                m.files.len(),
                m.angles_deg.len(),
                m.geometry.n_angles
            )));
        }
        if m.dims != m.geometry.detector_dims {
            return Err(bad(format!(
                "dims {:?} vs detector {:?}",
                m.dims, m.geometry.detector_dims
            )));
        }
        if let Some(f) = m
            .files
            .iter()
            .find(|f| f.file.contains('/') || f.file.contains('\\') || f.file.starts_with('.'))
        {
            return Err(bad(format!("file name {:?} must be a plain name", f.file)));
        }
        if let Some(records) = &m.t_start {
            if records.len() != m.files.len() {
                return Err(bad("t_start list length differs from projection count".into()));
            }
        }
        Ok(m)
    }
}

/// Writes `dir/manifest.json` and one `proj_NNNN.f32raw` per angle. Returns
/// the manifest hash, which downstream stages record as their source.
pub fn write_projection_set(
    set: &ProjectionSet,
    dir: &Path,
    source_hash: Option<String>,
    t_start: Option<Vec<TStartRecord>>,
) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(set.len());
    for p in set.projections() {
        let name = format!("proj_{:04}.f32raw", p.angle_index);
        let bytes = f32_le_bytes(p.data());
        let path = dir.join(&name);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(ProjectionFileEntry {
            file: name,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = ProjectionManifest {
        geometry_hash: set.geometry().content_hash(),
        geometry: set.geometry().config().clone(),
        dims: set.dims(),
        angles_deg: set.geometry().angles().iter().map(|a| a.to_degrees()).collect(),
        files,
        source_hash,
        t_start,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Reads a projection directory, verifying the geometry hash and every
/// payload hash.
pub fn read_projection_set(dir: &Path) -> Result<(ProjectionSet, ProjectionManifest)> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::MissingSidecar(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = ProjectionManifest::parse(&text)?;
    let geometry = ScannerGeometry::new(manifest.geometry.clone())?;
    if geometry.content_hash() != manifest.geometry_hash {
        return Err(Error::HashMismatch {
            path,
            expected: manifest.geometry_hash.clone(),
            actual: geometry.content_hash(),
        });
    }
    let n = manifest.dims[0] * manifest.dims[1];
    let mut projections = Vec::with_capacity(manifest.files.len());
    for (k, entry) in manifest.files.iter().enumerate() {
        let p = dir.join(&entry.file);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != 4 * n {
            return Err(Error::LengthMismatch {
                expected: 4 * n,
                actual: bytes.len(),
            });
        }
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::HashMismatch {
                path: p,
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let data = f64_from_f32_le(&bytes).expect("length checked");
        projections.push(Projection::new(manifest.dims, data, k)?);
    }
    Ok((ProjectionSet::new(geometry, projections)?, manifest))
}
