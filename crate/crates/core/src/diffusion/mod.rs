//! DDPM noise schedules, forward noising, the reverse-step mean, classifier-free
//! guidance, and the trainable noise-prediction network.

mod denoiser;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserConfig, DENOISER_COMPONENT};
pub use schedule::{
    cfg_epsilon, ddpm_mean, forward_noise, make_schedule, NoiseSchedule, SamplingPlan,
    ScheduleConfig, ScheduleKind, StepCoefficients,
};
pub use train::{train_denoiser, DenoiserTrainConfig, DenoiserTrainLog, DenoiserTrainer};

use crate::checkpoint::CheckpointError;
use crate::numerics::{NumericsError, Tensor};
use crate::synthdata::Condition;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep 0 has no reverse step below it")]
    NoStepBelowZero,
    #[error("invalid step plan: {0}")]
    InvalidPlan(String),
    #[error("input has shape {got:?}, the model expects {expected} values per motion")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("non-finite training loss {loss} at step {step} (last finite {last_finite})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        last_finite: f64,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything that predicts the noise in `x_t`.
///
/// `x_t` is a single motion `[frames, dim]`; `cond = None` asks for the
/// unconditional prediction.
pub trait NoisePredictor: Sync {
    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Condition>,
    ) -> Result<Tensor, DiffusionError>;

    /// Classifier-free guided prediction. Scales 0 and 1 skip the unused
    /// pass, so they return the unconditional and conditional outputs exactly.
    fn predict_cfg(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: &Condition,
        scale: f64,
    ) -> Result<Tensor, DiffusionError> {
        if scale == 1.0 {
            return self.predict_eps(x_t, t, Some(cond));
        }
        let uncond = self.predict_eps(x_t, t, None)?;
        if scale == 0.0 {
            return Ok(uncond);
        }
        let cond_eps = self.predict_eps(x_t, t, Some(cond))?;
        Ok(cfg_epsilon(&cond_eps, &uncond, scale)?)
    }
}
