//! Step-aware reward model: a transformer motion encoder with a prepended
//! timestep token, a condition encoder, a motion decoder, their training
//! losses, and the cosine rewards built on top of them.

mod losses;
mod model;
mod rewards;
mod train;

pub use losses::{
    contrastive_loss, negative_mask, representation_loss, representation_loss_from_parts,
};
pub use model::{LatentEmbedding, Modality, RewardConfig, RewardModel, REWARD_COMPONENT};
pub use rewards::{
    cosine, reward_grad, reward_motion, reward_text, reward_total, DualReward, StepToken,
};
pub use train::{train_reward_model, RewardTrainConfig, RewardTrainLog, RewardTrainer};

use crate::checkpoint::CheckpointError;
use crate::diffusion::DiffusionError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("timestep {t} outside the step-token table 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("condition token {token} outside the vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("motion has shape {got:?}, the model expects {expected} values")]
    MotionShape { expected: usize, got: Vec<usize> },
    #[error("cosine of a zero-norm vector")]
    ZeroNorm,
    #[error("empty batch")]
    EmptyBatch,
    #[error("motion-aligned reward weight is nonzero but no anchor embedding was given")]
    MissingAnchor,
    #[error("reward weights must be finite, got mu={mu}, eta={eta}")]
    InvalidWeights { mu: f64, eta: f64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x the initial {initial}")]
    Diverged {
        epoch: usize,
        loss: f64,
        initial: f64,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
