//! Embedding index over the training pairs, anchor lookup, and the
//! small-batch retrieval protocol.

mod eval;
mod index;

pub use eval::{
    rank_with_ties, retrieval_eval, retrieval_from_features, RetrievalReport, RECALL_KS,
};
pub use index::{
    build_index, retrieve_anchor, Anchor, IndexEntry, RetrievalIndex, INDEX_MAGIC, INDEX_VERSION,
};

use crate::container::FormatError;
use crate::diffusion::DiffusionError;
use crate::numerics::NumericsError;
use crate::reward::RewardError;
use crate::synthdata::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("index was built with reward checkpoint {index}, query uses {query}")]
    HashMismatch { index: String, query: String },
    #[error("split of {len} pairs is smaller than the batch size {batch}")]
    SplitTooSmall { len: usize, batch: usize },
    #[error("feature sets disagree: {0}")]
    FeatureMismatch(String),
    #[error("index shape {index:?} does not match the reward model {model:?}")]
    ShapeMismatch {
        index: [usize; 3],
        model: [usize; 3],
    },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
