use crate::{Error, Result};

/// Discrete diffusion schedule with linearly spaced betas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    pub ddim_steps: usize,
    pub ddim_eta: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02, 50).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64, ddim_steps: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        if ddim_steps == 0 || ddim_steps > t_max || !t_max.is_multiple_of(ddim_steps) {
            return Err(Error::invalid(format!(
                "{ddim_steps} DDIM steps must divide T = {t_max}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
            ddim_steps,
            ddim_eta: 0.0,
        })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative product of `1 - beta` through step `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.t_max())));
        }
        Ok(())
    }

    /// The DDIM subsequence `T/n, 2T/n, ..., T`.
    pub fn ddim_timesteps(&self) -> Vec<usize> {
        let stride = self.t_max() / self.ddim_steps;
        (1..=self.ddim_steps).map(|k| k * stride).collect()
    }

    /// Descending trajectory from `t_start` through the DDIM steps below it,
    /// ending at 0.
    pub fn trajectory(&self, t_start: usize) -> Result<Vec<usize>> {
        self.check_t(t_start)?;
        let mut out = vec![t_start];
        out.extend(self.ddim_timesteps().into_iter().rev().filter(|&t| t < t_start));
        out.push(0);
        Ok(out)
    }
}
