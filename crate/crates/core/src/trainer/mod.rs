//! Residual-learning optimization of a Gaussian field against upsampled
//! projections.

mod adam;
mod densify;
mod loss;

pub use adam::{adam_step, learning_rates, AdamState, ADAM_EPS, BETA1, BETA2, PARAMS};
pub use densify::{densify_and_prune, DensifyAccum, DensifyReport, SPLIT_SCALE_DIVISOR};
pub use loss::{loss_recon, loss_tv, ReconLoss, SSIM_PEAK};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{
    init_from_volume, voxelize, voxelize_backward, Activation, FieldConfig, GaussianField, InitOptions, VoxelGrid,
};
use crate::geometry::ScannerGeometry;
use crate::projector::{check_volume_matches, Projection, ProjectionSet};
use crate::rasterizer::{render, Frame, RenderOptions};
use crate::volume::VoxelVolume;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    LeakyRelu,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// DSSIM weight.
    pub lambda1: f64,
    /// TV weight.
    pub lambda2: f64,
    pub lr_position: f64,
    pub lr_density: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_final_factor: f64,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub grad_threshold: f64,
    pub prune_band: f64,
    /// Negative slope of the leaky-ReLU density activation.
    pub gamma: f64,
    pub activation: ActivationKind,
    pub isotropic: bool,
    pub max_count: usize,
    /// Clone/split boundary as a fraction of the scene half-extent.
    pub percent_dense: f64,
    pub tv_crop: usize,
    /// Compositing skip threshold. Zero keeps every contribution so the
    /// near-zero initial residual still receives gradients.
    pub alpha_skip: f64,
    pub n_init: usize,
    pub density_thresh: f64,
    pub scale_term: f64,
    pub residual_mode: bool,
    pub seed: u64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lambda1: 0.5,
            lambda2: 0.05,
            lr_position: 2e-4,
            lr_density: 1e-3,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_final_factor: 0.1,
            densify_from: 500,
            densify_until: 5000,
            densify_interval: 100,
            grad_threshold: 5e-5,
            prune_band: 1e-5,
            gamma: 0.09,
            activation: ActivationKind::LeakyRelu,
            isotropic: false,
            max_count: 500_000,
            percent_dense: 0.01,
            tv_crop: 32,
            alpha_skip: 0.0,
            n_init: 50_000,
            density_thresh: 0.05,
            scale_term: 0.15,
            residual_mode: true,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_position", self.lr_position),
            ("lr_density", self.lr_density),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_final_factor", self.lr_final_factor),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {r}")));
            }
        }
        for (name, w) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        if self.iterations > 0 && !(self.densify_from < self.densify_until && self.densify_until <= self.iterations) {
            return Err(Error::invalid(format!(
                "need densify_from < densify_until <= iterations, got {} / {} / {}",
                self.densify_from, self.densify_until, self.iterations
            )));
        }
        if self.densify_interval == 0 || self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::invalid("intervals must be >= 1"));
        }
        if !(self.prune_band >= 0.0) || !(self.grad_threshold >= 0.0) || !(self.alpha_skip >= 0.0) {
            return Err(Error::invalid("thresholds must be >= 0"));
        }
        if self.tv_crop < 2 {
            return Err(Error::invalid("tv_crop must be >= 2"));
        }
        self.field_config().validate()
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            activation: match self.activation {
                ActivationKind::LeakyRelu => Activation::LeakyRelu { gamma: self.gamma },
                ActivationKind::Softplus => Activation::Softplus,
            },
            max_count: self.max_count,
            isotropic: self.isotropic,
            ..FieldConfig::leaky(self.gamma)
        }
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            n_init: self.n_init,
            density_thresh: self.density_thresh,
            scale_term: self.scale_term,
            residual_mode: self.residual_mode,
            seed: self.seed,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            alpha_skip: self.alpha_skip,
            ..RenderOptions::default()
        }
    }
}

/// Training targets. `y_hat = y - lr_proj`, and `y` is rebuilt as
/// `y_hat + lr_proj` so the two agree exactly.
#[derive(Debug, Clone)]
pub struct ResidualTargets {
    y: ProjectionSet,
    lr_proj: ProjectionSet,
    y_hat: ProjectionSet,
    lr_volume_up: VoxelVolume,
}

impl ResidualTargets {
    pub fn new(y: ProjectionSet, lr_proj: ProjectionSet, lr_volume_up: VoxelVolume) -> Result<Self> {
        if y.geometry().config() != lr_proj.geometry().config() {
            return Err(Error::invalid("targets and LR reprojections use different geometries"));
        }
        check_volume_matches(&lr_volume_up, y.geometry())?;
        let geom = y.geometry().clone();
        let mut y_hat = Vec::with_capacity(y.len());
        let mut y_fixed = Vec::with_capacity(y.len());
        for (a, b) in y.projections().iter().zip(lr_proj.projections()) {
            let r = a.sub(b)?;
            y_fixed.push(r.add(b)?);
            y_hat.push(r);
        }
        Ok(Self {
            y: ProjectionSet::new(geom.clone(), y_fixed)?,
            y_hat: ProjectionSet::new(geom, y_hat)?,
            lr_proj,
            lr_volume_up,
        })
    }

    pub fn y(&self) -> &ProjectionSet {
        &self.y
    }

    pub fn lr_proj(&self) -> &ProjectionSet {
        &self.lr_proj
    }

    pub fn y_hat(&self) -> &ProjectionSet {
        &self.y_hat
    }

    pub fn lr_volume_up(&self) -> &VoxelVolume {
        &self.lr_volume_up
    }

    pub fn geometry(&self) -> &ScannerGeometry {
        self.y.geometry()
    }
}

/// `x = x_hat + lr_proj`, unclamped.
pub fn compose_prediction(x_hat: &Projection, lr_proj: &Projection) -> Result<Projection> {
    x_hat.add(lr_proj)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub iter: usize,
    pub angle: usize,
    pub total: f64,
    pub l1: f64,
    pub l_res: f64,
    pub dssim: f64,
    pub tv: f64,
    pub count: usize,
    pub lr_position: f64,
    pub lr_density: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify: Option<DensifyReport>,
}

/// Receives log lines and periodic checkpoints from [`train`].
pub trait TrainObserver {
    fn log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _iter: usize, _field: &GaussianField) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl TrainObserver for Vec<LogRecord> {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub field: GaussianField,
    /// `voxelize(field) + lr_volume_up`, clipped to `[0, 1]`.
    pub volume: VoxelVolume,
}

/// Initializes a field from the cubic-upsampled LR volume per `cfg`.
pub fn init_field(targets: &ResidualTargets, cfg: &TrainConfig) -> Result<GaussianField> {
    init_from_volume(targets.lr_volume_up(), &cfg.init_options(), cfg.field_config())
}

/// Reconstruction loss at one angle, without gradients.
pub fn angle_loss(
    field: &GaussianField,
    targets: &ResidualTargets,
    angle: usize,
    cfg: &TrainConfig,
) -> Result<ReconLoss> {
    let geom = targets.geometry();
    let x_hat = render(field, geom, angle, &cfg.render_options())?;
    let x = compose_prediction(&x_hat, targets.lr_proj().get(angle))?;
    Ok(loss_recon(
        targets.y().get(angle),
        &x,
        targets.y_hat().get(angle),
        &x_hat,
        cfg.lambda1,
    )?
    .0)
}

/// Voxelizes the field over the full grid and adds the LR volume.
pub fn final_volume(field: &GaussianField, lr_volume_up: &VoxelVolume) -> Result<VoxelVolume> {
    let grid = VoxelGrid::of(lr_volume_up);
    let res = voxelize(field, &grid, [0; 3], grid.dims)?;
    Ok(res.add(lr_volume_up)?.clip(0.0, 1.0))
}

fn non_finite(what: &str, iter: usize) -> Error {
    Error::NonFinite {
        what: what.to_string(),
        iteration: iter,
    }
}

/// Runs the optimization loop.
pub fn train(
    mut field: GaussianField,
    targets: &ResidualTargets,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    if cfg.iterations == 0 {
        let volume = final_volume(&field, targets.lr_volume_up())?;
        return Ok(TrainOutput { field, volume });
    }
    cfg.validate()?;
    if field.config.activation != cfg.field_config().activation {
        return Err(Error::invalid(
            "field activation differs from the training configuration",
        ));
    }
    let geom = targets.geometry();
    let n_angles = geom.n_angles();
    let dims = geom.detector_dims();
    let ropts = cfg.render_options();
    let grid = VoxelGrid::of(targets.lr_volume_up());
    let crop = grid.dims.map(|d| cfg.tv_crop.min(d));
    if crop.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!("grid {:?} too small for TV", grid.dims)));
    }
    let scene_extent = grid.extent().into_iter().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(field.len());
    let mut accum = DensifyAccum::new(field.len());
    let mut pending_report: Option<DensifyReport> = None;

    for iter in 0..cfg.iterations {
        let angle = rng.random_range(0..n_angles);
        let origin = [0, 1, 2].map(|a| rng.random_range(0..=grid.dims[a] - crop[a]));

        let frame = Frame::new(&field, geom, angle, &ropts)?;
        let x_hat = frame.render(&ropts)?;
        let x = compose_prediction(&x_hat, targets.lr_proj().get(angle))?;
        let (recon, dl_dxhat) = loss_recon(
            targets.y().get(angle),
            &x,
            targets.y_hat().get(angle),
            &x_hat,
            cfg.lambda1,
        )?;
        let rgrads = frame.backward(&field, geom, &ropts, &dl_dxhat)?;

        let mut tv = 0.0;
        let mut grads = rgrads.gaussians;
        if cfg.lambda2 > 0.0 {
            let res = voxelize(&field, &grid, origin, crop)?;
            let comp = res.add(&targets.lr_volume_up().crop(origin, crop)?)?;
            let (t, g) = loss_tv(&comp)?;
            tv = t;
            let g: Vec<f64> = g.into_iter().map(|v| v * cfg.lambda2).collect();
            let vgrads = voxelize_backward(&field, &grid, origin, crop, &g)?;
            for (a, b) in grads.iter_mut().zip(&vgrads) {
                a.add_assign(b);
            }
        }
        let total = recon.total + cfg.lambda2 * tv;
        if !total.is_finite() {
            return Err(non_finite("loss", iter));
        }

        if iter < cfg.densify_until {
            for i in 0..field.len() {
                if rgrads.visible[i] {
                    let [gu, gv] = rgrads.screen[i];
                    let ndc = (gu * 0.5 * dims[0] as f64).hypot(gv * 0.5 * dims[1] as f64);
                    accum.record(i, ndc, grads[i].position);
                }
            }
        }

        adam_step(&mut field, &grads, &mut adam, cfg, iter)?;

        let step = iter + 1;
        if step >= cfg.densify_from && step <= cfg.densify_until && step % cfg.densify_interval == 0 {
            let report = densify_and_prune(&mut field, &accum, &mut adam, cfg, scene_extent)?;
            log::debug!("iteration {step}: {report:?}, {} Gaussians", field.len());
            accum = DensifyAccum::new(field.len());
            pending_report = Some(match pending_report {
                Some(p) => DensifyReport {
                    split: p.split + report.split,
                    cloned: p.cloned + report.cloned,
                    pruned: p.pruned + report.pruned,
                    capped: p.capped + report.capped,
                },
                None => report,
            });
        }

        if step % cfg.log_interval == 0 || step == cfg.iterations {
            let [lp, ld, ls, lr] = learning_rates(cfg, iter);
            observer.log(&LogRecord {
                iter: step,
                angle,
                total,
                l1: recon.l1,
                l_res: recon.l_res,
                dssim: recon.dssim,
                tv,
                count: field.len(),
                lr_position: lp,
                lr_density: ld,
                lr_scale: ls,
                lr_rotation: lr,
                densify: pending_report.take(),
            })?;
        }
        if step % cfg.checkpoint_interval == 0 {
            observer.checkpoint(step, &field)?;
        }
    }
    let volume = final_volume(&field, targets.lr_volume_up())?;
    Ok(TrainOutput { field, volume })
}

#[cfg(test)]
mod tests;
