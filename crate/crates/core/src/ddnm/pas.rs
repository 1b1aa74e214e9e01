//! Per-projection choice of the diffusion start step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bilinear_upsample, ddnm_project, DegradationOp, Denoiser, IntensityMap, NoiseSchedule};
use crate::projector::Projection;
use crate::{Error, Result};

/// How the distance between the projected estimate and the bilinear
/// upsample is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PasNorm {
    /// Plain Euclidean norm over all pixels.
    Total,
    /// Euclidean norm divided by `sqrt(pixel count)`.
    PerPixelRms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasConfig {
    pub tau: f64,
    /// Candidate start steps; order does not matter.
    pub candidates: Vec<usize>,
    pub seed: u64,
    pub norm: PasNorm,
}

impl PasConfig {
    /// Thresholds for 4x and 8x; other factors must set `tau` explicitly.
    pub fn for_factor(factor: usize, seed: u64) -> Result<Self> {
        let tau = match factor {
            4 => 7.0,
            8 => 11.0,
            f => return Err(Error::invalid(format!("no default threshold for factor {f}"))),
        };
        Ok(Self {
            tau,
            candidates: vec![1000, 500, 300, 100],
            seed,
            norm: PasNorm::Total,
        })
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("start-step candidate list is empty"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("threshold must be > 0, got {}", self.tau)));
        }
        for &t in &self.candidates {
            schedule.check_t(t)?;
        }
        Ok(())
    }

    /// Per-projection seed.
    pub fn seed_for(&self, angle_index: usize) -> u64 {
        self.seed ^ angle_index as u64
    }
}

/// Outcome of start-step selection for one projection, as stored in the
/// projection manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TStartRecord {
    pub angle_index: usize,
    pub t_start: usize,
    /// `(t, delta)` for every candidate, descending in `t`.
    pub deltas: Vec<(usize, f64)>,
    /// Set when no candidate met the threshold.
    pub flagged: bool,
}

/// `x_t = z sqrt(1 - alpha_bar_t) + y_up sqrt(alpha_bar_t)` with seeded
/// standard normal `z`.
pub fn pas_init(y_up: &Projection, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Projection> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y_up.map(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * s + v * a
    }))
}

/// Largest `t` with `delta <= tau`; the smallest candidate and a flag when
/// none qualifies.
pub fn select_from_deltas(deltas: &[(usize, f64)], tau: f64) -> Result<(usize, bool)> {
    if deltas.is_empty() {
        return Err(Error::invalid("no candidates"));
    }
    match deltas.iter().filter(|(_, d)| *d <= tau).map(|(t, _)| *t).max() {
        Some(t) => Ok((t, false)),
        None => Ok((deltas.iter().map(|(t, _)| *t).min().expect("non-empty"), true)),
    }
}

fn distance(a: &Projection, b: &Projection, norm: PasNorm) -> Result<f64> {
    let d = a.sub(b)?;
    let ss: f64 = d.data().iter().map(|v| v * v).sum();
    Ok(match norm {
        PasNorm::Total => ss.sqrt(),
        PasNorm::PerPixelRms => (ss / d.data().len() as f64).sqrt(),
    })
}

/// `delta_t = || ddnm_project(denoiser(x_t, t)) - y_up ||` for every
/// candidate, descending in `t`, measured in the model range of `map`. One
/// noise draw is shared by all candidates.
pub fn pas_deltas(
    y: &Projection,
    op: &DegradationOp,
    denoiser: &dyn Denoiser,
    pas: &PasConfig,
    schedule: &NoiseSchedule,
    map: &IntensityMap,
) -> Result<Vec<(usize, f64)>> {
    pas.validate(schedule)?;
    let y = &map.forward(y);
    let y_up = bilinear_upsample(y, op.factor())?;
    let mut ts = pas.candidates.clone();
    ts.sort_unstable_by(|a, b| b.cmp(a));
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let x_t = pas_init(&y_up, t, schedule, pas.seed_for(y.angle_index))?;
            let x0 = denoiser.denoise(&x_t, t, schedule, map)?;
            let projected = ddnm_project(&x0, y, op)?;
            Ok((t, distance(&projected, &y_up, pas.norm)?))
        })
        .collect()
}

pub fn pas_select_tstart(
    y: &Projection,
    op: &DegradationOp,
    denoiser: &dyn Denoiser,
    pas: &PasConfig,
    schedule: &NoiseSchedule,
    map: &IntensityMap,
) -> Result<TStartRecord> {
    let deltas = pas_deltas(y, op, denoiser, pas, schedule, map)?;
    let (t_start, flagged) = select_from_deltas(&deltas, pas.tau)?;
    if flagged {
        log::warn!(
            "projection {}: no start step within threshold {}; using {t_start}",
            y.angle_index,
            pas.tau
        );
    }
    Ok(TStartRecord {
        angle_index: y.angle_index,
        t_start,
        deltas,
        flagged,
    })
}
