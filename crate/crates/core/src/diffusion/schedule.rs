use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Tables of β_t, α_t and ᾱ_t for t = 1..=T, with ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule(
            "T must be at least 1".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let config = ScheduleConfig {
        steps,
        beta_start,
        beta_end,
        kind,
    };
    NoiseSchedule::from_betas_with(config, beta)
}

impl NoiseSchedule {
    /// Schedule from explicit β_1..β_T.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        let config = ScheduleConfig {
            steps: beta.len(),
            beta_start: beta.first().copied().unwrap_or(f64::NAN),
            beta_end: beta.last().copied().unwrap_or(f64::NAN),
            kind: ScheduleKind::Linear,
        };
        Self::from_betas_with(config, beta)
    }

    fn from_betas_with(config: ScheduleConfig, beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() {
            return Err(DiffusionError::InvalidSchedule(
                "T must be at least 1".into(),
            ));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "beta {b} outside (0, 1)"
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        assert!(
            alpha_bar.windows(2).all(|w| w[1] < w[0]) && alpha_bar[0] < 1.0,
            "alpha_bar must be strictly decreasing"
        );
        Ok(Self {
            config,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<usize, DiffusionError> {
        match t {
            0 => Err(DiffusionError::NoStepBelowZero),
            t if t > self.steps() => Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.steps(),
            }),
            t => Ok(t - 1),
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.steps() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta[self.check_step(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha[self.check_step(t)?])
    }

    /// ᾱ_t, defined for t = 0..=T.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check_timestep(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bar[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Drift f(x, t) = -½ β_t x of the variance-preserving SDE.
    pub fn sde_drift(&self, x: &Tensor, t: usize) -> Result<Tensor, DiffusionError> {
        Ok(x.scale(-0.5 * self.beta(t)?))
    }

    /// Diffusion coefficient g(t) = √β_t.
    pub fn sde_diffusion(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta(t)?.sqrt())
    }

    /// Coefficients of the single-step reverse move t → t-1.
    pub fn step(&self, t: usize) -> Result<StepCoefficients, DiffusionError> {
        let i = self.check_step(t)?;
        Ok(StepCoefficients {
            t,
            t_prev: t - 1,
            beta: self.beta[i],
            alpha: self.alpha[i],
            alpha_bar: self.alpha_bar[i],
        })
    }

    /// Reverse move t → t_prev on a subsampled grid, with the respaced
    /// β' = 1 - ᾱ_t / ᾱ_{t_prev}. Consecutive steps use the stored β_t.
    pub fn jump(&self, t: usize, t_prev: usize) -> Result<StepCoefficients, DiffusionError> {
        if t_prev >= t {
            return Err(DiffusionError::InvalidPlan(format!(
                "step {t} -> {t_prev} does not decrease"
            )));
        }
        if t_prev + 1 == t {
            return self.step(t);
        }
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let beta = 1.0 - ab / ab_prev;
        Ok(StepCoefficients {
            t,
            t_prev,
            beta,
            alpha: 1.0 - beta,
            alpha_bar: ab,
        })
    }
}

/// β, α and ᾱ for one reverse move, already respaced for strided plans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    pub t_prev: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
}

impl StepCoefficients {
    /// x̄_{t-1} = x_t - β_t / √(1-ᾱ_t) · ε.
    pub fn mean(&self, x_t: &Tensor, eps: &Tensor) -> Result<Tensor, NumericsError> {
        let k = self.beta / (1.0 - self.alpha_bar).sqrt();
        x_t.zip_map(eps, |x, e| x - k * e)
    }

    pub fn noise_std(&self) -> f64 {
        self.beta.sqrt()
    }

    /// β_t / √α_t, the guidance weight of `theorem3` mode.
    pub fn guidance_weight(&self) -> f64 {
        self.beta / self.alpha.sqrt()
    }
}

/// x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    let ab = sched.alpha_bar(t)?;
    x0.expect_same_shape(eps)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

pub fn ddpm_mean(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    Ok(sched.step(t)?.mean(x_t, eps_pred)?)
}

/// eps_uncond + s · (eps_cond - eps_uncond); s = 0 and s = 1 return the
/// inputs unchanged.
pub fn cfg_epsilon(
    eps_cond: &Tensor,
    eps_uncond: &Tensor,
    s: f64,
) -> Result<Tensor, NumericsError> {
    eps_cond.expect_same_shape(eps_uncond)?;
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

/// Ordered reverse moves from the largest timestep down to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    steps: Vec<StepCoefficients>,
}

impl SamplingPlan {
    /// Every timestep T, T-1, ..., 1.
    pub fn full(sched: &NoiseSchedule) -> Self {
        let steps = (1..=sched.steps())
            .rev()
            .map(|t| sched.step(t).expect("in range"))
            .collect();
        Self { steps }
    }

    /// `count` evenly spaced timesteps 1 + ⌊i·T/count⌋, visited in reverse.
    pub fn strided(sched: &NoiseSchedule, count: usize) -> Result<Self, DiffusionError> {
        let t_max = sched.steps();
        if count == 0 || count > t_max {
            return Err(DiffusionError::InvalidPlan(format!(
                "step count {count} outside 1..={t_max}"
            )));
        }
        let ts: Vec<usize> = (0..count).rev().map(|i| 1 + i * t_max / count).collect();
        Self::from_timesteps(sched, &ts)
    }

    /// Plan over explicit timesteps, which must be strictly decreasing and
    /// within 1..=T.
    pub fn from_timesteps(sched: &NoiseSchedule, ts: &[usize]) -> Result<Self, DiffusionError> {
        if ts.is_empty() {
            return Err(DiffusionError::InvalidPlan("no timesteps".into()));
        }
        if ts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(DiffusionError::InvalidPlan(format!(
                "timesteps {ts:?} are not strictly decreasing"
            )));
        }
        let mut steps = Vec::with_capacity(ts.len());
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            steps.push(sched.jump(t, t_prev)?);
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[StepCoefficients] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.t).collect()
    }
}
