//! Procedural (condition, trajectory) pairs and their on-disk format.

mod dataset;
mod families;
mod io;

pub use dataset::{
    build_dataset, build_splits, condition_for_seed, generate_motion, generate_motion_with_jitter,
    pair_seed, sample_condition, Dataset, DatasetSpec, MotionSequence, Pair, Split, Splits,
    JITTER_STD, MOTION_DIM, SPLIT_SEED_SPAN,
};
pub use families::{
    position, velocity, Condition, MotionClass, MotionParams, PARAM_BINS, TOKENS_PER_CONDITION,
    VOCAB_SIZE,
};
pub use io::{
    decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION,
};

use crate::container::FormatError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("unknown motion class id {0}")]
    UnknownClass(u32),
    #[error("unknown motion class {0:?}")]
    UnknownClassName(String),
    #[error("condition spec {0:?} is not of the form class:speed,curvature,amplitude")]
    BadConditionSpec(String),
    #[error("non-finite parameters for {0}")]
    InvalidParams(MotionClass),
    #[error("a motion needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("motion must be [frames >= 2, dim], got {0:?}")]
    BadMotionShape(Vec<usize>),
    #[error("motion contains non-finite values")]
    NonFiniteMotion,
    #[error("dataset spec requests no pairs")]
    EmptySpec,
    #[error("dataset spec has a zero count for {0}")]
    ZeroCount(MotionClass),
    #[error("unknown split code {0}")]
    UnknownSplit(u32),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
