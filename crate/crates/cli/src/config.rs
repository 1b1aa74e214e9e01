//! Run configuration: one TOML document shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ctsr_core::ddnm::{NoiseSchedule, PasConfig, PasNorm, SamplerConfig};
use ctsr_core::geometry::{GeometryConfig, ScannerGeometry};
use ctsr_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub volume: VolumeSection,
    pub geometry: GeometrySection,
    pub degradation: DegradationSection,
    pub ddnm: DdnmSection,
    pub trainer: TrainConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    /// Size of the generated phantom.
    pub dims: [usize; 3],
    /// Ground-truth volume to use instead of the phantom (path without
    /// extension, or with either `.json` or `.f32raw`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Window mapped to `[0, 1]` when reading `input`.
    pub clip: [f64; 2],
}

impl Default for VolumeSection {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            input: None,
            clip: [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub dso: f64,
    pub dsd: f64,
    /// Full-resolution detector `[nu, nv]`.
    pub detector_dims: [usize; 2],
    /// Physical detector width and height.
    pub detector_size: [f64; 2],
    pub n_angles: usize,
    pub angle_start_deg: f64,
    pub angle_end_deg: f64,
    /// Half-extents of the reconstruction cube; taken from the volume when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume_extent: Option<[f64; 3]>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            dso: 8.0,
            dsd: 12.0,
            detector_dims: [96, 96],
            detector_size: [4.6, 4.6],
            n_angles: 100,
            angle_start_deg: 0.0,
            angle_end_deg: 180.0,
            volume_extent: None,
        }
    }
}

impl GeometrySection {
    pub fn build(&self, volume_extent: [f64; 3]) -> ctsr_core::Result<ScannerGeometry> {
        ScannerGeometry::new(GeometryConfig {
            dso: self.dso,
            dsd: self.dsd,
            detector_dims: self.detector_dims,
            detector_spacing: [
                self.detector_size[0] / self.detector_dims[0].max(1) as f64,
                self.detector_size[1] / self.detector_dims[1].max(1) as f64,
            ],
            n_angles: self.n_angles,
            angle_start: self.angle_start_deg.to_radians(),
            angle_end: self.angle_end_deg.to_radians(),
            volume_extent: self.volume_extent.unwrap_or(volume_extent),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSection {
    pub factor: usize,
    /// Pre-smoothing std in voxels; `factor / 2` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl Default for DegradationSection {
    fn default() -> Self {
        Self { factor: 4, sigma: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    /// Blur-and-rescale prior.
    Shrinkage,
    /// Returns the ground-truth projection; for pipeline checks.
    Oracle,
    /// Child process speaking the frame protocol.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdnmSection {
    pub denoiser: DenoiserKind,
    pub blur_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program: Option<PathBuf>,
    pub args: Vec<String>,
    /// Start-step threshold; the factor's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub candidates: Vec<usize>,
    pub norm: PasNorm,
    pub sigma_y: f64,
    pub seed: u64,
    pub ddim_steps: usize,
    pub normalize: bool,
}

impl Default for DdnmSection {
    fn default() -> Self {
        Self {
            denoiser: DenoiserKind::Shrinkage,
            blur_std: 2.0,
            program: None,
            args: Vec::new(),
            tau: None,
            candidates: vec![1000, 500, 300, 100],
            norm: PasNorm::Total,
            sigma_y: 0.0,
            seed: 0,
            ddim_steps: 50,
            normalize: true,
        }
    }
}

impl DdnmSection {
    pub fn pas(&self, factor: usize) -> ctsr_core::Result<PasConfig> {
        let tau = match self.tau {
            Some(t) => t,
            None => PasConfig::for_factor(factor, self.seed)?.tau,
        };
        Ok(PasConfig {
            tau,
            candidates: self.candidates.clone(),
            seed: self.seed,
            norm: self.norm,
        })
    }

    pub fn schedule(&self) -> ctsr_core::Result<NoiseSchedule> {
        NoiseSchedule::linear(1000, 1e-4, 0.02, self.ddim_steps)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            sigma_y: self.sigma_y,
            normalize: self.normalize,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Invalid(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies command-line overrides: `seed` replaces both the sampler and
    /// trainer seeds.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.ddnm.seed = s;
            self.trainer.seed = s;
        }
        if let Some(dir) = out {
            self.output.dir = dir;
        }
        self
    }

    /// Cross-section checks that do not need any files.
    pub fn validate(&self) -> anyhow::Result<()> {
        let f = self.degradation.factor;
        if f < 1 {
            bail!(Invalid("degradation.factor must be >= 1".into()));
        }
        if self.volume.input.is_none() && self.volume.dims.iter().any(|&d| d % f != 0) {
            bail!(Invalid(format!(
                "volume.dims {:?} must be divisible by factor {f}",
                self.volume.dims
            )));
        }
        if self.geometry.detector_dims.iter().any(|&d| d % f != 0) {
            bail!(Invalid(format!(
                "geometry.detector_dims {:?} must be divisible by factor {f}",
                self.geometry.detector_dims
            )));
        }
        if !(self.volume.clip[0] < self.volume.clip[1]) {
            bail!(Invalid(format!(
                "volume.clip {:?} must be increasing",
                self.volume.clip
            )));
        }
        if self.ddnm.denoiser == DenoiserKind::External && self.ddnm.program.is_none() {
            bail!(Invalid("ddnm.denoiser = \"external\" needs ddnm.program".into()));
        }
        if !(self.ddnm.blur_std > 0.0) {
            bail!(Invalid("ddnm.blur_std must be > 0".into()));
        }
        self.ddnm.pas(f)?.validate(&self.ddnm.schedule()?)?;
        self.trainer.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
