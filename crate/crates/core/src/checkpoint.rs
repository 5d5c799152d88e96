//! `RGCK` checkpoint container shared by the denoiser and the reward model.
//!
//! ```text
//! magic "RGCK" | version u32 | component str | hyperparameters str (JSON)
//! | param_count u64 | weights param_count x f64 | crc32 u32
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::container::{sha256_hex, verify_crc, ByteReader, ByteWriter, FormatError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("hyperparameter block: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint holds {found} weights, the model needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    pub hyperparams: serde_json::Value,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn new<H: Serialize>(
        component: &str,
        hyperparams: &H,
        weights: Vec<f64>,
    ) -> Result<Self, CheckpointError> {
        Ok(Self {
            component: component.to_string(),
            hyperparams: serde_json::to_value(hyperparams)?,
            weights,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC)
            .u32(CHECKPOINT_VERSION)
            .str(&self.component)
            .str(&self.hyperparams.to_string())
            .u64(self.weights.len() as u64)
            .f64s(&self.weights);
        w.finish()
    }

    /// Magic and version are checked first so that foreign files get a
    /// precise error; any other damage, truncation included, surfaces as a
    /// checksum failure.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut head = ByteReader::new(bytes);
        if bytes.len() >= 4 {
            head.magic(CHECKPOINT_MAGIC)?;
        }
        if bytes.len() >= 8 {
            head.version(CHECKPOINT_VERSION)?;
        }
        let body = verify_crc(bytes)?;
        let mut r = ByteReader::new(body);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let component = r.str()?;
        let hyperparams = serde_json::from_str(&r.str()?)?;
        let n =
            usize::try_from(r.u64()?).map_err(|_| FormatError::Malformed("weight count".into()))?;
        if r.remaining() != n * 8 {
            return Err(FormatError::Malformed(format!(
                "weight block is {} bytes, header declares {n} weights",
                r.remaining()
            ))
            .into());
        }
        let weights = r.f64s(n)?;
        Ok(Self {
            component,
            hyperparams,
            weights,
        })
    }

    pub fn expect_component(&self, tag: &str) -> Result<(), CheckpointError> {
        if self.component != tag {
            return Err(FormatError::ComponentMismatch {
                expected: tag.to_string(),
                found: self.component.clone(),
            }
            .into());
        }
        Ok(())
    }

    pub fn hyperparams_as<H: DeserializeOwned>(&self) -> Result<H, CheckpointError> {
        Ok(serde_json::from_value(self.hyperparams.clone())?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.encode())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String, CheckpointError> {
        let bytes = self.encode();
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a checkpoint and returns it with the SHA-256 of the file bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String), CheckpointError> {
        let bytes = fs::read(path)?;
        let ck = Self::decode(&bytes)?;
        Ok((ck, sha256_hex(&bytes)))
    }
}
