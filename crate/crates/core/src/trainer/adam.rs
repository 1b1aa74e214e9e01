use super::TrainConfig;
use crate::field::{GaussianField, GaussianGrad};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters per Gaussian: position (3), log scale (3), quaternion (4),
/// raw density (1).
pub const PARAMS: usize = 11;

pub(crate) fn flatten(g: &GaussianGrad) -> [f64; PARAMS] {
    let mut out = [0.0; PARAMS];
    out[..3].copy_from_slice(&g.position);
    out[3..6].copy_from_slice(&g.log_scale);
    out[6..10].copy_from_slice(&g.rotation);
    out[10] = g.raw_density;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<[f64; PARAMS]>,
    pub v: Vec<[f64; PARAMS]>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; PARAMS]; n],
            v: vec![[0.0; PARAMS]; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Learning rates `[position, density, scale, rotation]` at `iter`, decayed
/// exponentially to `lr_final_factor` of their initial values at the end.
pub fn learning_rates(cfg: &TrainConfig, iter: usize) -> [f64; 4] {
    let frac = if cfg.iterations == 0 {
        0.0
    } else {
        iter as f64 / cfg.iterations as f64
    };
    let decay = cfg.lr_final_factor.powf(frac);
    [cfg.lr_position, cfg.lr_density, cfg.lr_scale, cfg.lr_rotation].map(|lr| lr * decay)
}

/// One bias-corrected Adam update of every Gaussian, followed by quaternion
/// renormalization and scale clamping.
pub fn adam_step(
    field: &mut GaussianField,
    grads: &[GaussianGrad],
    state: &mut AdamState,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    if grads.len() != field.len() || state.len() != field.len() {
        return Err(Error::dims(field.len(), (grads.len(), state.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient of Gaussian {i}"),
            iteration: iter,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let [lp, ld, ls, lr] = learning_rates(cfg, iter);
    let rate = |k: usize| match k {
        0..=2 => lp,
        3..=5 => ls,
        6..=9 => lr,
        _ => ld,
    };
    for (i, g) in field.gaussians.iter_mut().enumerate() {
        let grad = flatten(&grads[i]);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut delta = [0.0; PARAMS];
        for k in 0..PARAMS {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * grad[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * grad[k] * grad[k];
            delta[k] = rate(k) * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
        }
        for k in 0..3 {
            g.position[k] -= delta[k];
            g.log_scale[k] -= delta[3 + k];
        }
        for k in 0..4 {
            g.rotation[k] -= delta[6 + k];
        }
        g.raw_density -= delta[10];
    }
    field.enforce_invariants();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, Gaussian3D};

    fn one(raw: f64) -> GaussianField {
        GaussianField::with_gaussians(
            FieldConfig::leaky(0.09),
            vec![Gaussian3D::isotropic([0.1, 0.2, 0.3], 0.05, raw)],
        )
        .unwrap()
    }

    #[test]
    fn final_rate_is_a_tenth() {
        let cfg = TrainConfig::default();
        let r = learning_rates(&cfg, cfg.iterations);
        assert!((r[0] - 0.1 * cfg.lr_position).abs() < 1e-18);
        assert_eq!(learning_rates(&cfg, 0)[1], cfg.lr_density);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut f = one(0.4);
        let before = f.clone();
        let mut st = AdamState::new(1);
        adam_step(&mut f, &[GaussianGrad::default()], &mut st, &TrainConfig::default(), 0).unwrap();
        assert_eq!(f, before);
    }

    #[test]
    fn matches_scalar_reference_adam() {
        let cfg = TrainConfig::default();
        let mut f = one(0.4);
        let mut st = AdamState::new(1);
        let g = GaussianGrad {
            raw_density: 0.37,
            ..Default::default()
        };
        // Scalar reference, written out independently.
        let (mut x, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
        for it in 0..100 {
            adam_step(&mut f, &[g], &mut st, &cfg, it).unwrap();
            let lr = 0.001 * 0.1f64.powf(it as f64 / 5000.0);
            m = 0.9 * m + 0.1 * 0.37;
            v = 0.999 * v + 0.001 * 0.37 * 0.37;
            let mh = m / (1.0 - 0.9f64.powi(it as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(it as i32 + 1));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((f.gaussians[0].raw_density - x).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut f = one(0.4);
        let mut st = AdamState::new(1);
        let g = GaussianGrad {
            raw_density: f64::NAN,
            ..Default::default()
        };
        let err = adam_step(&mut f, &[g], &mut st, &TrainConfig::default(), 17).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 17, .. }));
    }
}
