//! DDIM sampling with null-space data consistency.

use rayon::prelude::*;

use super::{
    bilinear_upsample, ddnm_plus_project, ddnm_project, pas_init, pas_select_tstart, DegradationOp, Denoiser,
    IntensityMap, NoiseSchedule, PasConfig, TStartRecord,
};
use crate::geometry::ScannerGeometry;
use crate::projector::{binned_geometry, Projection, ProjectionSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Measurement noise level; 0 selects plain null-space projection.
    pub sigma_y: f64,
    /// Final output is clipped to this range.
    pub clip: (f64, f64),
    /// Sample in `[-1, 1]` model units fitted to each input's value range
    /// rather than in physical units.
    pub normalize: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sigma_y: 0.0,
            clip: (0.0, f64::INFINITY),
            normalize: true,
        }
    }
}

impl SamplerConfig {
    pub fn intensity_map(&self, y: &Projection) -> IntensityMap {
        if self.normalize {
            IntensityMap::fit(y)
        } else {
            IntensityMap::IDENTITY
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub image: Projection,
    /// The final consistent estimate before clipping.
    pub unclipped: Projection,
}

fn check_finite(p: &Projection, t: usize) -> Result<()> {
    if p.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("sampler state for projection {}", p.angle_index),
            iteration: t,
        });
    }
    Ok(())
}

/// Runs the deterministic DDIM trajectory from `t_start` to 0. At each step
/// the denoiser's estimate is made consistent with `y` before stepping.
/// `sigma_y` and `clip` are in physical units.
pub fn ddim_ddnm_sample(
    y: &Projection,
    op: &DegradationOp,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    t_start: usize,
    seed: u64,
) -> Result<SampleResult> {
    if schedule.ddim_eta != 0.0 {
        return Err(Error::invalid("only the deterministic sampler (eta = 0) is supported"));
    }
    if !(cfg.sigma_y >= 0.0) {
        return Err(Error::invalid(format!("sigma_y must be >= 0, got {}", cfg.sigma_y)));
    }
    let traj = schedule.trajectory(t_start)?;
    let map = cfg.intensity_map(y);
    let y = &map.forward(y);
    let sigma_y = cfg.sigma_y * map.scale;
    let y_up = bilinear_upsample(y, op.factor())?;
    let mut x = pas_init(&y_up, t_start, schedule, seed)?;
    let mut last = None;
    for w in traj.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let x0 = denoiser.denoise(&x, t, schedule, &map)?;
        if x0.dims() != x.dims() {
            return Err(Error::Denoiser(format!(
                "denoiser returned {:?} for {:?}",
                x0.dims(),
                x.dims()
            )));
        }
        check_finite(&x0, t)?;
        let ab = schedule.alpha_bar(t);
        let ab_next = schedule.alpha_bar(t_next);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps = x.zip_with(&x0, |xt, x0| (xt - sa * x0) / sn)?;
        let (x0_hat, noise_scale) = if sigma_y == 0.0 {
            (ddnm_project(&x0, y, op)?, (1.0 - ab_next).sqrt())
        } else {
            let sigma_t = (1.0 - ab_next).sqrt();
            let scale = super::ddnm_plus_scale(sigma_y, t_next, schedule);
            let gamma = sigma_t * sigma_t - (ab_next.sqrt() * scale * sigma_y).powi(2);
            (
                ddnm_plus_project(&x0, y, op, sigma_y, t_next, schedule)?,
                gamma.max(0.0).sqrt(),
            )
        };
        let a_next = ab_next.sqrt();
        x = x0_hat.zip_with(&eps, |x0, e| a_next * x0 + noise_scale * e)?;
        check_finite(&x, t_next)?;
        last = Some(x0_hat);
    }
    let unclipped = map.inverse(&last.expect("trajectory has at least one step"));
    let (lo, hi) = cfg.clip;
    Ok(SampleResult {
        image: unclipped.map(|v| v.clamp(lo, hi)),
        unclipped,
    })
}

/// Upsamples every projection of `lr_set` to the detector of `hr_geom`,
/// choosing each start step independently. Angles run in parallel with
/// seeds `pas.seed ^ angle_index`.
pub fn sr_projection_set(
    lr_set: &ProjectionSet,
    hr_geom: &ScannerGeometry,
    denoiser: &dyn Denoiser,
    pas: &PasConfig,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    factor: usize,
) -> Result<(ProjectionSet, Vec<TStartRecord>)> {
    let expect = binned_geometry(hr_geom, factor)?;
    if expect.config() != lr_set.geometry().config() {
        return Err(Error::invalid(format!(
            "low-resolution set geometry does not match the {factor}x binned target geometry"
        )));
    }
    let op = DegradationOp::new(factor, hr_geom.detector_dims())?;
    pas.validate(schedule)?;
    let results: Vec<(Projection, TStartRecord)> = lr_set
        .projections()
        .par_iter()
        .map(|y| {
            let run = || -> Result<(Projection, TStartRecord)> {
                let record = pas_select_tstart(y, &op, denoiser, pas, schedule, &cfg.intensity_map(y))?;
                let out = ddim_ddnm_sample(
                    y,
                    &op,
                    denoiser,
                    schedule,
                    cfg,
                    record.t_start,
                    pas.seed_for(y.angle_index),
                )?;
                Ok((out.image, record))
            };
            run().map_err(|e| Error::AtAngle {
                angle: y.angle_index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (projections, records) = results.into_iter().unzip();
    Ok((ProjectionSet::new(hr_geom.clone(), projections)?, records))
}
