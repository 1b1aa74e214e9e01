//! The six pipeline stages. Stages talk only through files in the output
//! directory; each one records the hashes it read and wrote under
//! `stages/`, and every consumer re-checks the chain before starting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ctsr_core::ddnm::{
    sr_projection_set, DegradationOp, Denoiser, ExternalDenoiser, OracleDenoiser, ShrinkageDenoiser,
};
use ctsr_core::field::write_checkpoint;
use ctsr_core::hashing::sha256_hex;
use ctsr_core::metrics::{psnr_capped, ssim, PSNR_CAP_DB, SSIM_WINDOW};
use ctsr_core::projector::{
    binned_geometry, default_step, project_all, read_projection_set, write_projection_set, ProjectionSet, MANIFEST_NAME,
};
use ctsr_core::trainer::{init_field, train, LogRecord, ResidualTargets, TrainObserver};
use ctsr_core::volume::{
    clip_normalize, degrade, make_phantom, read_volume, resample_cubic, resample_trilinear, shepp_logan_3d,
    write_volume, VoxelVolume,
};
use serde::{Deserialize, Serialize};

use crate::config::{DenoiserKind, RunConfig};

pub const GT: &str = "gt";
pub const LR: &str = "lr";
pub const LR_CUBIC: &str = "lr_cubic";
pub const PROJ_GT: &str = "proj_gt";
pub const PROJ_LR: &str = "proj_lr";
pub const PROJ_MEAS: &str = "proj_meas";
pub const PROJ_SR: &str = "proj_sr";
pub const FIELD: &str = "field.ckpt";
pub const RECON: &str = "recon";
pub const EVALUATION: &str = "evaluation.json";
const STAGES: &str = "stages";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Degrade,
    Project,
    Sr2d,
    Reconstruct,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Degrade => "degrade",
            Stage::Project => "project",
            Stage::Sr2d => "sr2d",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
        }
    }

    /// The stage that writes `artifact`.
    fn producer(artifact: &str) -> Option<Stage> {
        Some(match artifact {
            GT => Stage::Phantom,
            LR => Stage::Degrade,
            LR_CUBIC | PROJ_GT | PROJ_LR | PROJ_MEAS => Stage::Project,
            PROJ_SR => Stage::Sr2d,
            FIELD | RECON => Stage::Reconstruct,
            _ => return None,
        })
    }
}

/// Inputs and outputs of one stage run, keyed by artifact name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Output directory plus the run configuration.
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: RunConfig,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> anyhow::Result<Self> {
        let dir = cfg.output.dir.clone();
        std::fs::create_dir_all(dir.join(STAGES)).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, cfg })
    }

    fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    /// Hash identifying an artifact's current content on disk.
    fn artifact_hash(&self, artifact: &str) -> anyhow::Result<String> {
        let p = self.path(artifact);
        let file = if artifact.starts_with("proj_") {
            p.join(MANIFEST_NAME)
        } else if artifact == FIELD {
            p
        } else {
            p.with_extension("f32raw")
        };
        let bytes = std::fs::read(&file).with_context(|| format!("missing input {} ({})", artifact, file.display()))?;
        Ok(sha256_hex(&bytes))
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(STAGES).join(format!("{}.json", stage.name()))
    }

    fn read_record(&self, stage: Stage) -> anyhow::Result<StageRecord> {
        let p = self.record_path(stage);
        let text = std::fs::read_to_string(&p).with_context(|| {
            format!(
                "no record of `{}` in {}; run it first",
                stage.name(),
                self.dir.display()
            )
        })?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    /// Checks that `artifact` is what its producer wrote and, recursively,
    /// that the producer's own inputs are unchanged since.
    fn verify(&self, artifact: &str) -> anyhow::Result<String> {
        let actual = self.artifact_hash(artifact)?;
        let Some(stage) = Stage::producer(artifact) else {
            return Ok(actual);
        };
        let record = self.read_record(stage)?;
        match record.outputs.get(artifact) {
            Some(h) if *h == actual => {}
            Some(_) => bail!(
                "{artifact} changed since `{}` wrote it; rerun `{}`",
                stage.name(),
                stage.name()
            ),
            None => bail!("`{}` record does not list {artifact}", stage.name()),
        }
        for (input, recorded) in &record.inputs {
            if self.verify(input)? != *recorded {
                bail!(
                    "{artifact} is stale: its input {input} changed; rerun `{}`",
                    stage.name()
                );
            }
        }
        Ok(actual)
    }

    fn inputs(&self, names: &[&str]) -> anyhow::Result<BTreeMap<String, String>> {
        names.iter().map(|n| Ok((n.to_string(), self.verify(n)?))).collect()
    }

    fn finish(&self, stage: Stage, inputs: BTreeMap<String, String>, outputs: &[&str]) -> anyhow::Result<()> {
        let outputs = outputs
            .iter()
            .map(|n| Ok((n.to_string(), self.artifact_hash(n)?)))
            .collect::<anyhow::Result<_>>()?;
        let record = StageRecord {
            stage: stage.name().to_string(),
            inputs,
            outputs,
        };
        write_text(&self.record_path(stage), &serde_json::to_string_pretty(&record)?)?;
        write_text(
            &self.dir.join(format!("config.{}.toml", stage.name())),
            &self.cfg.to_toml(),
        )
    }

    fn volume(&self, artifact: &str) -> anyhow::Result<VoxelVolume> {
        read_volume(&self.path(artifact)).with_context(|| format!("reading volume {artifact}"))
    }

    fn projections(&self, artifact: &str) -> anyhow::Result<ProjectionSet> {
        Ok(read_projection_set(&self.path(artifact))
            .with_context(|| format!("reading projections {artifact}"))?
            .0)
    }

    fn write_vol(&self, vol: &VoxelVolume, artifact: &str) -> anyhow::Result<()> {
        write_volume(vol, &self.path(artifact)).with_context(|| format!("writing {artifact}"))?;
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn phantom(ws: &Workspace) -> anyhow::Result<()> {
    let v = &ws.cfg.volume;
    let gt = match &v.input {
        Some(path) => {
            let raw = read_volume(path).with_context(|| format!("reading {}", path.display()))?;
            clip_normalize(&raw, v.clip[0], v.clip[1])?
        }
        None => make_phantom(&shepp_logan_3d(), v.dims)?,
    };
    ws.write_vol(&gt, GT)?;
    log::info!("ground truth {:?} written", gt.dims());
    ws.finish(Stage::Phantom, BTreeMap::new(), &[GT])
}

pub fn degrade_cmd(ws: &Workspace) -> anyhow::Result<()> {
    let inputs = ws.inputs(&[GT])?;
    let gt = ws.volume(GT)?;
    let d = &ws.cfg.degradation;
    let lr = degrade(&gt, d.factor, d.sigma)?;
    ws.write_vol(&lr, LR)?;
    log::info!("{:?} -> {:?}", gt.dims(), lr.dims());
    ws.finish(Stage::Degrade, inputs, &[LR])
}

pub fn project(ws: &Workspace) -> anyhow::Result<()> {
    let inputs = ws.inputs(&[GT, LR])?;
    let gt = ws.volume(GT)?;
    let lr = ws.volume(LR)?;
    let factor = ws.cfg.degradation.factor;
    let lr_cubic = resample_cubic(&lr, factor)?;
    if lr_cubic.dims() != gt.dims() {
        bail!(crate::Invalid(format!(
            "upsampled LR volume {:?} does not match ground truth {:?}",
            lr_cubic.dims(),
            gt.dims()
        )));
    }
    let geom = ws.cfg.geometry.build(gt.extent())?;
    let gt_proj = project_all(&gt, &geom, default_step(&gt))?;
    let lr_proj = project_all(&lr_cubic, &geom, default_step(&lr_cubic))?;
    let op = DegradationOp::new(factor, geom.detector_dims())?;
    let binned = gt_proj
        .projections()
        .iter()
        .map(|p| op.apply(p))
        .collect::<ctsr_core::Result<Vec<_>>>()?;
    let meas = ProjectionSet::new(binned_geometry(&geom, factor)?, binned)?;
    ws.write_vol(&lr_cubic, LR_CUBIC)?;
    let gt_hash = inputs[GT].clone();
    let lr_hash = ws.artifact_hash(LR_CUBIC)?;
    write_projection_set(&gt_proj, &ws.path(PROJ_GT), Some(gt_hash.clone()), None)?;
    write_projection_set(&meas, &ws.path(PROJ_MEAS), Some(gt_hash), None)?;
    write_projection_set(&lr_proj, &ws.path(PROJ_LR), Some(lr_hash), None)?;
    log::info!("{} angles on a {:?} detector", geom.n_angles(), geom.detector_dims());
    ws.finish(Stage::Project, inputs, &[LR_CUBIC, PROJ_GT, PROJ_LR, PROJ_MEAS])
}

pub fn sr2d(ws: &Workspace) -> anyhow::Result<()> {
    let d = &ws.cfg.ddnm;
    let oracle = d.denoiser == DenoiserKind::Oracle;
    let needed: &[&str] = if oracle { &[PROJ_MEAS, PROJ_GT] } else { &[PROJ_MEAS] };
    let inputs = ws.inputs(needed)?;
    let meas = ws.projections(PROJ_MEAS)?;
    let factor = ws.cfg.degradation.factor;
    let hr_geom = ws.cfg.geometry.build(meas.geometry().config().volume_extent)?;
    let denoiser: Box<dyn Denoiser> = match d.denoiser {
        DenoiserKind::Shrinkage => Box::new(ShrinkageDenoiser { blur_std: d.blur_std }),
        DenoiserKind::Oracle => Box::new(OracleDenoiser::new(ws.projections(PROJ_GT)?.into_projections())),
        DenoiserKind::External => {
            let program = d.program.as_ref().ok_or_else(|| anyhow!("no denoiser program"))?;
            Box::new(ExternalDenoiser::spawn(program, &d.args)?)
        }
    };
    log::info!("denoiser {}", denoiser.describe());
    let (sr, records) = sr_projection_set(
        &meas,
        &hr_geom,
        denoiser.as_ref(),
        &d.pas(factor)?,
        &d.schedule()?,
        &d.sampler(),
        factor,
    )?;
    let flagged = records.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        log::warn!("{flagged} projections had no start step within the threshold");
    }
    write_projection_set(&sr, &ws.path(PROJ_SR), Some(inputs[PROJ_MEAS].clone()), Some(records))?;
    ws.finish(Stage::Sr2d, inputs, &[PROJ_SR])
}

struct Progress<'a> {
    dir: &'a Path,
    interval: usize,
}

impl TrainObserver for Progress<'_> {
    fn log(&mut self, r: &LogRecord) -> ctsr_core::Result<()> {
        log::info!(
            "iter {:>6} loss {:.6} l1 {:.6} dssim {:.6} tv {:.6} gaussians {}",
            r.iter,
            r.total,
            r.l1,
            r.dssim,
            r.tv,
            r.count
        );
        if let Some(d) = &r.densify {
            log::debug!("densify {d:?}");
        }
        Ok(())
    }

    fn checkpoint(&mut self, iter: usize, field: &ctsr_core::field::GaussianField) -> ctsr_core::Result<()> {
        if self.interval > 0 {
            write_checkpoint(field, &self.dir.join(format!("iter_{iter:06}.ckpt")))?;
        }
        Ok(())
    }
}

pub fn reconstruct(ws: &Workspace) -> anyhow::Result<()> {
    let inputs = ws.inputs(&[PROJ_SR, PROJ_LR, LR_CUBIC])?;
    let y = ws.projections(PROJ_SR)?;
    let lr_proj = ws.projections(PROJ_LR)?;
    let lr_cubic = ws.volume(LR_CUBIC)?;
    let targets = ResidualTargets::new(y, lr_proj, lr_cubic)?;
    let cfg = &ws.cfg.trainer;
    let field = init_field(&targets, cfg)?;
    log::info!("initialized {} Gaussians", field.len());
    let ckpt_dir = ws.dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let mut progress = Progress {
        dir: &ckpt_dir,
        interval: cfg.checkpoint_interval,
    };
    let out = train(field, &targets, cfg, &mut progress)?;
    write_checkpoint(&out.field, &ws.path(FIELD))?;
    ws.write_vol(&out.volume, RECON)?;
    ws.finish(Stage::Reconstruct, inputs, &[FIELD, RECON])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub peak: f64,
    pub rows: Vec<MethodScore>,
}

impl Evaluation {
    pub fn score(&self, method: &str) -> Option<&MethodScore> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>9} {:>8}\n", "method", "PSNR", "SSIM");
        for r in &self.rows {
            s += &format!("{:<10} {:>9.4} {:>8.5}\n", r.method, r.psnr, r.ssim);
        }
        s
    }
}

/// Scores `candidates` against `gt`, prefixed by the trilinear and cubic
/// upsamplings of `lr`.
pub fn score_volumes(
    gt: &VoxelVolume,
    lr: &VoxelVolume,
    factor: usize,
    candidates: &[(&str, &VoxelVolume)],
) -> anyhow::Result<Evaluation> {
    let peak = 1.0;
    let tri = resample_trilinear(lr, factor)?.clip(0.0, 1.0);
    let cubic = resample_cubic(lr, factor)?.clip(0.0, 1.0);
    let mut rows = Vec::new();
    for (method, v) in [("trilinear", &tri), ("cubic", &cubic)]
        .into_iter()
        .chain(candidates.iter().copied())
    {
        rows.push(MethodScore {
            method: method.to_string(),
            psnr: psnr_capped(v, gt, peak, PSNR_CAP_DB)?,
            ssim: ssim(v, gt, SSIM_WINDOW, peak)?,
        });
    }
    Ok(Evaluation { peak, rows })
}

pub fn evaluate(ws: &Workspace) -> anyhow::Result<Evaluation> {
    let inputs = ws.inputs(&[GT, LR, RECON])?;
    let gt = ws.volume(GT)?;
    let lr = ws.volume(LR)?;
    let recon = ws.volume(RECON)?;
    let eval = score_volumes(&gt, &lr, ws.cfg.degradation.factor, &[("ours", &recon)])?;
    write_text(&ws.path(EVALUATION), &serde_json::to_string_pretty(&eval)?)?;
    ws.finish(Stage::Evaluate, inputs, &[])?;
    Ok(eval)
}
