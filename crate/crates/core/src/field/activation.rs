use crate::{Error, Result};

/// Density activation applied to each Gaussian's raw parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// Identity for non-negative inputs, slope `gamma` below zero.
    LeakyRelu { gamma: f64 },
    /// `ln(1 + e^x)`; densities are strictly positive.
    Softplus,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu { gamma } if !(gamma > 0.0 && gamma < 1.0) => Err(Error::invalid(format!(
                "leaky-ReLU slope must lie in (0, 1), got {gamma}"
            ))),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn activate(&self, raw: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { gamma } => activate_density(raw, gamma),
            Activation::Softplus => activate_density_softplus(raw),
        }
    }

    /// `d activate / d raw`.
    #[inline]
    pub fn slope(&self, raw: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { gamma } => {
                if raw >= 0.0 {
                    1.0
                } else {
                    gamma
                }
            }
            Activation::Softplus => {
                // Logistic sigmoid, written to avoid overflow on either side.
                if raw >= 0.0 {
                    1.0 / (1.0 + (-raw).exp())
                } else {
                    let e = raw.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    pub fn inverse(&self, rho: f64) -> Result<f64> {
        match *self {
            Activation::LeakyRelu { gamma } => Ok(inverse_activate(rho, gamma)),
            Activation::Softplus => inverse_softplus(rho),
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            Activation::LeakyRelu { gamma } => Some(gamma),
            Activation::Softplus => None,
        }
    }
}

#[inline]
pub fn activate_density(raw: f64, gamma: f64) -> f64 {
    if raw >= 0.0 {
        raw
    } else {
        gamma * raw
    }
}

/// Inverse of [`activate_density`].
///
/// Scaling by `gamma < 1` is not injective on doubles, so no inverse can
/// recover every `f64`. This one is exact for every raw value representable
/// in `f32` (the storage precision of parameters) and always returns some
/// preimage of `rho` when one is reachable from the quotient.
pub fn inverse_activate(rho: f64, gamma: f64) -> f64 {
    if rho >= 0.0 {
        return rho;
    }
    let q = rho / gamma;
    let q32 = q as f32 as f64;
    if gamma * q32 == rho {
        return q32;
    }
    if gamma * q == rho {
        return q;
    }
    let (mut lo, mut hi) = (q, q);
    for _ in 0..4 {
        lo = lo.next_down();
        hi = hi.next_up();
        if gamma * hi == rho {
            return hi;
        }
        if gamma * lo == rho {
            return lo;
        }
    }
    q
}

pub fn activate_density_softplus(raw: f64) -> f64 {
    if raw > 0.0 {
        raw + (-raw).exp().ln_1p()
    } else {
        raw.exp().ln_1p()
    }
}

/// `ln(e^rho - 1)`; defined for `rho > 0` only.
pub fn inverse_softplus(rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("softplus inverse needs rho > 0, got {rho}")));
    }
    Ok(if rho > 30.0 {
        rho + (-(-rho).exp()).ln_1p()
    } else {
        rho.exp_m1().ln()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn leaky_examples() {
        assert_eq!(activate_density(2.0, 0.09), 2.0);
        assert!((activate_density(-1.0, 0.09) + 0.09).abs() < 1e-15);
        assert_eq!(activate_density(0.0, 0.09), 0.0);
        assert!((inverse_activate(activate_density(-3.7, 0.003), 0.003) + 3.7).abs() < 1e-12);
        assert_eq!(inverse_activate(0.5, 0.09), 0.5);
        assert!((inverse_activate(-0.09, 0.09) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_examples() {
        assert!((activate_density_softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((activate_density_softplus(100.0) - 100.0).abs() < 1e-12);
        let tiny = activate_density_softplus(-100.0);
        assert!(tiny > 0.0 && ((tiny - (-100f64).exp()) / tiny).abs() < 1e-12);
        for x in [-5.0, 0.3, 12.0, 40.0] {
            let back = inverse_softplus(activate_density_softplus(x)).unwrap();
            assert!((back - x).abs() < 1e-9 * x.abs().max(1.0));
        }
        assert!(inverse_softplus(0.0).is_err());
    }

    #[test]
    fn softplus_slope_matches_difference() {
        for x in [-30.0, -1.0, 0.0, 2.5, 50.0] {
            let h = 1e-6;
            let fd = (activate_density_softplus(x + h) - activate_density_softplus(x - h)) / (2.0 * h);
            assert!((Activation::Softplus.slope(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn round_trip_is_exact_for_a_million_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let gammas = [0.09, 0.03, 0.003, 0.0003];
        for i in 0..1_000_000 {
            let gamma = gammas[i % 4];
            let x = rng.random_range(-1e3f32..1e3) as f64;
            assert_eq!(
                inverse_activate(activate_density(x, gamma), gamma),
                x,
                "x={x} gamma={gamma}"
            );
        }
    }

    #[test]
    fn scaling_by_gamma_collides_on_doubles() {
        // Two adjacent doubles with the same image: no inverse can recover both.
        let gamma = 0.09;
        let mut x = -1.9f64;
        let mut found = false;
        for _ in 0..64 {
            let n = x.next_up();
            if gamma * x == gamma * n {
                found = true;
                break;
            }
            x = n;
        }
        assert!(found);
    }

    proptest! {
        #[test]
        fn round_trip_exact(x in -1e6f32..1e6, gamma in 1e-6f64..0.999_999) {
            let x = x as f64;
            prop_assert_eq!(inverse_activate(activate_density(x, gamma), gamma), x);
        }

        #[test]
        fn inverse_is_a_right_inverse(rho in -1e3f64..1e3, gamma in 1e-4f64..0.9999) {
            let r = activate_density(inverse_activate(rho, gamma), gamma);
            prop_assert!((r - rho).abs() <= 2.0 * f64::EPSILON * rho.abs());
        }

        #[test]
        fn monotone_and_continuous(a in -10f64..10.0, b in -10f64..10.0, gamma in 1e-4f64..0.9999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(activate_density(lo, gamma) <= activate_density(hi, gamma));
            prop_assert!(activate_density(-1e-300, gamma).abs() < 1e-299);
        }
    }
}
