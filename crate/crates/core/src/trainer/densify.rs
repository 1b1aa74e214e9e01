use super::adam::AdamState;
use super::TrainConfig;
use crate::field::{Gaussian3D, GaussianField};
use crate::math::{add, column, norm, normalize, scale, Vec3};
use crate::{Error, Result};

/// Child scale divisor on split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Per-Gaussian statistics gathered between densification passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyAccum {
    /// Sum over visible views of the screen-space gradient norm.
    pub grad_sum: Vec<f64>,
    /// Number of views in which the Gaussian was visible.
    pub count: Vec<u32>,
    /// Sum of world-space position gradients, for clone offsets.
    pub position_grad: Vec<Vec3>,
}

impl DensifyAccum {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
            position_grad: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    pub fn record(&mut self, i: usize, screen_grad_norm: f64, position_grad: Vec3) {
        self.grad_sum[i] += screen_grad_norm;
        self.count[i] += 1;
        self.position_grad[i] = add(self.position_grad[i], position_grad);
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct DensifyReport {
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    /// Candidates dropped because the count cap was reached.
    pub capped: usize,
}

fn in_prune_band(raw: f64, eps: f64) -> bool {
    raw.abs() < eps
}

fn halve(g: &Gaussian3D, field: &GaussianField) -> Result<f64> {
    let act = field.activation();
    act.inverse(0.5 * act.activate(g.raw_density))
}

/// Splits or clones Gaussians whose mean screen gradient exceeds the
/// threshold, then prunes raw densities inside `(-prune_band, prune_band)`.
/// Offspring take half the parent density and copy its optimizer moments.
/// The count never exceeds `max_count`; candidates with the largest mean
/// gradient win when it binds.
pub fn densify_and_prune(
    field: &mut GaussianField,
    accum: &DensifyAccum,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    scene_extent: f64,
) -> Result<DensifyReport> {
    let n = field.len();
    if accum.len() != n || adam.len() != n {
        return Err(Error::dims(n, (accum.len(), adam.len())));
    }
    let eps = cfg.prune_band;
    let keep: Vec<bool> = field
        .gaussians
        .iter()
        .map(|g| !in_prune_band(g.raw_density, eps))
        .collect();
    let survivors = keep.iter().filter(|&&k| k).count();
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| keep[i] && accum.mean(i) > cfg.grad_threshold)
        .collect();
    candidates.sort_by(|&a, &b| accum.mean(b).total_cmp(&accum.mean(a)).then(a.cmp(&b)));
    let budget = field.config.max_count.saturating_sub(survivors);
    let mut report = DensifyReport::default();
    if candidates.len() > budget {
        report.capped = candidates.len() - budget;
        candidates.truncate(budget);
    }
    let mut action = vec![0u8; n]; // 0 none, 1 split, 2 clone
    let threshold = cfg.percent_dense * scene_extent;
    for &i in &candidates {
        action[i] = if field.gaussians[i].max_scale() > threshold {
            1
        } else {
            2
        };
    }

    let mut out = Vec::with_capacity(survivors + candidates.len());
    let mut extra = Vec::new();
    for i in 0..n {
        if !keep[i] {
            report.pruned += 1;
            continue;
        }
        let g = field.gaussians[i];
        match action[i] {
            1 => {
                report.split += 1;
                let s = g.scales();
                let k = (0..3).fold(0, |best, a| if s[a] > s[best] { a } else { best });
                let off = scale(column(&g.rotation_matrix(), k), 0.5 * s[k]);
                let raw = halve(&g, field)?;
                let child = |sign: f64| Gaussian3D {
                    position: add(g.position, scale(off, sign)),
                    log_scale: g.log_scale.map(|l| l - SPLIT_SCALE_DIVISOR.ln()),
                    raw_density: raw,
                    ..g
                };
                out.push((child(1.0), i));
                extra.push((child(-1.0), i));
            }
            2 => {
                report.cloned += 1;
                let raw = halve(&g, field)?;
                let dir = accum.position_grad[i];
                let shift = if norm(dir) > 0.0 {
                    scale(normalize(dir), -0.5 * g.max_scale())
                } else {
                    [0.0; 3]
                };
                out.push((Gaussian3D { raw_density: raw, ..g }, i));
                let position = add(g.position, shift);
                extra.push((
                    Gaussian3D {
                        position,
                        raw_density: raw,
                        ..g
                    },
                    i,
                ));
            }
            _ => out.push((g, i)),
        }
    }
    out.extend(extra);
    // Halving can push offspring into the band.
    let before = out.len();
    out.retain(|(g, _)| !in_prune_band(g.raw_density, eps));
    report.pruned += before - out.len();
    adam.m = out.iter().map(|&(_, p)| adam.m[p]).collect();
    adam.v = out.iter().map(|&(_, p)| adam.v[p]).collect();
    field.gaussians = out.into_iter().map(|(g, _)| g).collect();
    field.enforce_invariants();
    Ok(report)
}
