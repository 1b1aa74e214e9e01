use super::NoiseSchedule;
use crate::projector::Projection;
use crate::{Error, Result};

/// Non-overlapping `factor x factor` mean pooling and its pseudo-inverse
/// (block replication).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationOp {
    factor: usize,
    hr_dims: [usize; 2],
}

impl DegradationOp {
    pub fn new(factor: usize, hr_dims: [usize; 2]) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid(format!("factor must be >= 2, got {factor}")));
        }
        if hr_dims.iter().any(|&d| d == 0 || d % factor != 0) {
            return Err(Error::invalid(format!("dims {hr_dims:?} not divisible by {factor}")));
        }
        let op = Self { factor, hr_dims };
        op.probe()?;
        Ok(op)
    }

    /// Checks `A A^+ = I` on a deterministic LR pattern.
    fn probe(&self) -> Result<()> {
        let lr = self.lr_dims();
        let data = (0..lr[0] * lr[1])
            .map(|i| ((i * 7919) % 257) as f64 / 257.0 - 0.5)
            .collect();
        let y = Projection::new(lr, data, 0)?;
        let back = self.apply(&self.apply_pinv(&y)?)?;
        let err = y
            .data()
            .iter()
            .zip(back.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if err > 1e-12 {
            return Err(Error::invalid(format!("pseudo-inverse probe failed: {err}")));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn hr_dims(&self) -> [usize; 2] {
        self.hr_dims
    }

    pub fn lr_dims(&self) -> [usize; 2] {
        [self.hr_dims[0] / self.factor, self.hr_dims[1] / self.factor]
    }

    #[inline]
    fn block_of(&self, i: usize) -> usize {
        let (u, v) = (i % self.hr_dims[0], i / self.hr_dims[0]);
        u / self.factor + self.lr_dims()[0] * (v / self.factor)
    }

    /// `A x`.
    pub fn apply(&self, x: &Projection) -> Result<Projection> {
        if x.dims() != self.hr_dims {
            return Err(Error::dims(self.hr_dims, x.dims()));
        }
        let lr = self.lr_dims();
        let f = self.factor;
        let inv = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; lr[0] * lr[1]];
        for (b, o) in out.iter_mut().enumerate() {
            let (bu, bv) = (b % lr[0], b / lr[0]);
            let mut acc = 0.0;
            for v in bv * f..(bv + 1) * f {
                for u in bu * f..(bu + 1) * f {
                    acc += x.get(u, v);
                }
            }
            *o = acc * inv;
        }
        Projection::new(lr, out, x.angle_index)
    }

    /// `A^+ y`.
    pub fn apply_pinv(&self, y: &Projection) -> Result<Projection> {
        if y.dims() != self.lr_dims() {
            return Err(Error::dims(self.lr_dims(), y.dims()));
        }
        let n = self.hr_dims[0] * self.hr_dims[1];
        let data = (0..n).map(|i| y.data()[self.block_of(i)]).collect();
        Projection::new(self.hr_dims, data, y.angle_index)
    }

    /// `(I - A^+ A) x`.
    pub fn null_component(&self, x: &Projection) -> Result<Projection> {
        let ax = self.apply(x)?;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v - ax.data()[self.block_of(i)])
            .collect();
        Projection::new(self.hr_dims, data, x.angle_index)
    }

    /// `x - s A^+ (A x - y)`, evaluated per pixel as `x + s (y - A x)`.
    fn correct(&self, x0t: &Projection, y: &Projection, s: f64) -> Result<Projection> {
        if y.dims() != self.lr_dims() {
            return Err(Error::dims(self.lr_dims(), y.dims()));
        }
        let ax = self.apply(x0t)?;
        let diff: Vec<f64> = y.data().iter().zip(ax.data()).map(|(a, b)| a - b).collect();
        let data = x0t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if s == 1.0 {
                    v + diff[self.block_of(i)]
                } else {
                    v + s * diff[self.block_of(i)]
                }
            })
            .collect();
        Projection::new(self.hr_dims, data, x0t.angle_index)
    }
}

/// `A^+ y + (I - A^+ A) x0t`; the result satisfies `A result = y`.
pub fn ddnm_project(x0t: &Projection, y: &Projection, op: &DegradationOp) -> Result<Projection> {
    op.correct(x0t, y, 1.0)
}

/// Scale on the range-space correction under measurement noise `sigma_y`,
/// for the step that lands on `t_next`: `min(1, sigma_t / (a_t sigma_y))`
/// with `sigma_t = sqrt(1 - alpha_bar)` and `a_t = sqrt(alpha_bar)`. The
/// operator's singular value is 1 for mean pooling with block replication.
pub fn ddnm_plus_scale(sigma_y: f64, t_next: usize, schedule: &NoiseSchedule) -> f64 {
    if sigma_y == 0.0 {
        return 1.0;
    }
    let ab = schedule.alpha_bar(t_next);
    let sigma_t = (1.0 - ab).sqrt();
    let a_t = ab.sqrt();
    (sigma_t / (a_t * sigma_y)).min(1.0)
}

/// Noise-aware variant of [`ddnm_project`]; identical to it when
/// `sigma_y = 0`.
pub fn ddnm_plus_project(
    x0t: &Projection,
    y: &Projection,
    op: &DegradationOp,
    sigma_y: f64,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Projection> {
    if !(sigma_y >= 0.0) {
        return Err(Error::invalid(format!("sigma_y must be >= 0, got {sigma_y}")));
    }
    if sigma_y == 0.0 {
        return ddnm_project(x0t, y, op);
    }
    op.correct(x0t, y, ddnm_plus_scale(sigma_y, t_next, schedule))
}

/// Bilinear `factor`x upsampling with pixel-centre alignment and clamped
/// edges.
pub fn bilinear_upsample(y: &Projection, factor: usize) -> Result<Projection> {
    if factor == 0 {
        return Err(Error::invalid("factor must be >= 1"));
    }
    let [nu, nv] = y.dims();
    let (hu, hv) = (nu * factor, nv * factor);
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut data = Vec::with_capacity(hu * hv);
    for v in 0..hv {
        let (v0, v1, fv) = coord(v, nv);
        for u in 0..hu {
            let (u0, u1, fu) = coord(u, nu);
            let top = y.get(u0, v0) * (1.0 - fu) + y.get(u1, v0) * fu;
            let bot = y.get(u0, v1) * (1.0 - fu) + y.get(u1, v1) * fu;
            data.push(top * (1.0 - fv) + bot * fv);
        }
    }
    Projection::new([hu, hv], data, y.angle_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 2], seed: u64) -> Projection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projection::new(
            dims,
            (0..dims[0] * dims[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn constant_images_survive_both_operators() {
        let op = DegradationOp::new(4, [16, 8]).unwrap();
        let x = Projection::new([16, 8], vec![0.375; 128], 0).unwrap();
        assert!(op.apply(&x).unwrap().data().iter().all(|&v| v == 0.375));
        let y = Projection::new([4, 2], vec![0.375; 8], 0).unwrap();
        assert!(op.apply_pinv(&y).unwrap().data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn construction_errors() {
        assert!(DegradationOp::new(1, [8, 8]).is_err());
        assert!(DegradationOp::new(4, [8, 10]).is_err());
        let op = DegradationOp::new(4, [8, 8]).unwrap();
        assert!(op.apply(&random([4, 4], 0)).is_err());
        assert!(ddnm_project(&random([8, 8], 0), &random([4, 4], 1), &op).is_err());
    }

    #[test]
    fn pooling_matches_block_average_oracle() {
        let op = DegradationOp::new(2, [4, 4]).unwrap();
        let x = Projection::new([4, 4], (0..16).map(|i| i as f64).collect(), 0).unwrap();
        // Block (0,0) holds 0, 1, 4, 5.
        assert_eq!(op.apply(&x).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn ddnm_examples() {
        let op = DegradationOp::new(4, [16, 16]).unwrap();
        let x = random([16, 16], 2);
        let y = random([4, 4], 3);
        let r = ddnm_project(&x, &y, &op).unwrap();
        let err = op.apply(&r).unwrap().sub(&y).unwrap().max_abs();
        assert!(err < 1e-6);
        let consistent = op.apply(&x).unwrap();
        assert_eq!(ddnm_project(&x, &consistent, &op).unwrap().data(), x.data());
        let zero = Projection::zeros([16, 16], 0);
        assert_eq!(ddnm_project(&zero, &y, &op).unwrap(), op.apply_pinv(&y).unwrap());
    }

    #[test]
    fn ddnm_plus_limits_and_scalar_oracle() {
        let s = NoiseSchedule::default();
        let op = DegradationOp::new(4, [16, 16]).unwrap();
        let x = random([16, 16], 4);
        let y = random([4, 4], 5);
        let a = ddnm_project(&x, &y, &op).unwrap();
        let b = ddnm_plus_project(&x, &y, &op, 0.0, 500, &s).unwrap();
        assert_eq!(a.data(), b.data());
        let huge = ddnm_plus_project(&x, &y, &op, 1e12, 20, &s).unwrap();
        assert!(huge.sub(&x).unwrap().max_abs() < 1e-9);
        // Hand evaluation at t = 500 with sigma_y = 0.0015.
        let ab: f64 = (0..500)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        let expect = ((1.0 - ab).sqrt() / (ab.sqrt() * 0.0015)).min(1.0);
        assert!((ddnm_plus_scale(0.0015, 500, &s) - expect).abs() < 1e-12);
        assert_eq!(expect, 1.0);
        // Near t = 0 the noise level is tiny and the correction is damped.
        let ab1: f64 = 1.0 - 1e-4;
        let expect1 = ((1.0 - ab1).sqrt() / (ab1.sqrt() * 0.02)).min(1.0);
        assert!((ddnm_plus_scale(0.02, 1, &s) - expect1).abs() < 1e-12);
        assert!(expect1 < 1.0);
        assert!(ddnm_plus_project(&x, &y, &op, -1.0, 20, &s).is_err());
    }

    #[test]
    fn bilinear_reproduces_interior_ramps() {
        let y = Projection::new(
            [6, 5],
            (0..30).map(|i| (i % 6) as f64 * 2.0 + (i / 6) as f64).collect(),
            0,
        )
        .unwrap();
        let up = bilinear_upsample(&y, 4).unwrap();
        assert_eq!(up.dims(), [24, 20]);
        for v in 2..18 {
            for u in 2..22 {
                let cu = (u as f64 + 0.5) / 4.0 - 0.5;
                let cv = (v as f64 + 0.5) / 4.0 - 0.5;
                assert!((up.get(u, v) - (2.0 * cu + cv)).abs() < 1e-12);
            }
        }
        // Edge pixels clamp to the outermost LR sample.
        assert_eq!(up.get(0, 0), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pinv_is_right_inverse(seed in 0u64..10_000) {
            let op = DegradationOp::new(4, [12, 8]).unwrap();
            let y = random([3, 2], seed);
            let back = op.apply(&op.apply_pinv(&y).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(y.data()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn null_projector_is_idempotent(seed in 0u64..10_000) {
            let op = DegradationOp::new(4, [16, 16]).unwrap();
            let x = random([16, 16], seed);
            let once = op.null_component(&x).unwrap();
            let twice = op.null_component(&once).unwrap();
            prop_assert!(once.sub(&twice).unwrap().max_abs() < 1e-12);
        }

        #[test]
        fn consistent_pairs_reconstruct(seed in 0u64..10_000) {
            let op = DegradationOp::new(8, [16, 16]).unwrap();
            let x = random([16, 16], seed);
            let y = op.apply(&x).unwrap();
            let r = ddnm_project(&x, &y, &op).unwrap();
            prop_assert!(r.sub(&x).unwrap().max_abs() < 1e-12);
        }
    }
}
