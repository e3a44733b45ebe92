//! Variance-preserving discrete noise schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Parameters that fully determine a [`NoiseSchedule`]; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            timesteps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

/// Per-timestep coefficients, indexed `t = 0..=T` with `t = 0` the clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            kind,
            timesteps,
            beta_min,
            beta_max,
        } = params;
        if timesteps < 1 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "schedule betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta = vec![0.0; timesteps + 1];
        match kind {
            ScheduleKind::Linear => {
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    *b = if timesteps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * (t - 1) as f64 / (timesteps - 1) as f64
                    };
                }
            }
        }
        let mut alpha_bar = vec![1.0; timesteps + 1];
        for t in 1..=timesteps {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            params,
            beta,
            alpha_bar,
            alpha,
            sigma,
        })
    }

    pub fn linear(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleParams {
            kind: ScheduleKind::Linear,
            timesteps,
            beta_min,
            beta_max,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    #[inline]
    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Index {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `beta[t]` for `t ≥ 1`.
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Cumulative product of `1 − beta` up to `t`; `alpha_bar(0) == 1`.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal scale `sqrt(alpha_bar[t])`.
    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Noise scale `sqrt(1 − alpha_bar[t])`.
    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Scale applied to the ε-corrected sample in the one-step reverse update,
    /// `a[t−1] = mean_scale·(a[t] − eps_coef·ε̂) + posterior_std·n`.
    pub fn mean_scale(&self, t: usize) -> f64 {
        1.0 / (1.0 - self.beta[t]).sqrt()
    }

    /// ε coefficient of the one-step reverse update.
    pub fn eps_coef(&self, t: usize) -> f64 {
        self.beta[t] / self.sigma[t]
    }

    /// Standard deviation of the noise injected going from `t` to `t − 1`.
    /// Zero at `t = 1`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        self.transition(t, t - 1).2
    }

    /// Coefficients of the ancestral jump from `t` down to `s < t`:
    /// `mean = c_x0·x̂0 + c_xt·a[t]`, `std`.
    pub fn transition(&self, t: usize, s: usize) -> (f64, f64, f64) {
        debug_assert!(s < t);
        let ab_t = self.alpha_bar[t];
        let ab_s = self.alpha_bar[s];
        let alpha_ts = ab_t / ab_s;
        let beta_ts = 1.0 - alpha_ts;
        let c_x0 = ab_s.sqrt() * beta_ts / (1.0 - ab_t);
        let c_xt = alpha_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let var = (1.0 - ab_s) / (1.0 - ab_t) * beta_ts;
        (c_x0, c_xt, var.max(0.0).sqrt())
    }

    /// Evenly spaced descending timesteps from `T` to `1` (just `[T]` for one step).
    pub fn strided_timesteps(&self, nfe: usize) -> Result<Vec<usize>> {
        let t_max = self.timesteps();
        if nfe < 1 || nfe > t_max {
            return Err(Error::Config(format!("nfe must be in 1..={t_max}, got {nfe}")));
        }
        if nfe == 1 {
            return Ok(vec![t_max]);
        }
        let span = (t_max - 1) as f64;
        Ok((0..nfe)
            .map(|i| (t_max as f64 - span * i as f64 / (nfe - 1) as f64).round() as usize)
            .collect())
    }
}
