use std::fs;
use std::path::Path;

use super::RetrievalError;
use crate::container::{sha256_hex, verify_crc, ByteReader, ByteWriter, FormatError};
use crate::numerics::Tensor;
use crate::reward::{cosine, LatentEmbedding, Modality, RewardModel};
use crate::synthdata::{Condition, Dataset, MotionSequence};

pub const INDEX_MAGIC: &[u8; 4] = b"RGIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub ordinal: u32,
    pub condition: Condition,
    pub seed: u64,
    pub motion: MotionSequence,
    /// Motion embedding at t = 0.
    pub z_motion: Tensor,
    pub z_cond: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    checkpoint_hash: String,
    n_frames: usize,
    dim: usize,
    d_z: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub ordinal: u32,
    pub score: f64,
    pub motion: MotionSequence,
    pub embedding: LatentEmbedding,
}

/// Embeds every pair of `data` with `model` at t = 0.
pub fn build_index(model: &RewardModel, data: &Dataset) -> Result<RetrievalIndex, RetrievalError> {
    let cfg = model.config();
    if data.n_frames != cfg.n_frames || data.dim() != cfg.dim {
        return Err(RetrievalError::ShapeMismatch {
            index: [data.n_frames, data.dim(), cfg.d_z],
            model: [cfg.n_frames, cfg.dim, cfg.d_z],
        });
    }
    if data.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let f = cfg.motion_len();
    let mut entries = Vec::with_capacity(data.len());
    for (chunk_no, chunk) in data.pairs.chunks(256).enumerate() {
        let mut flat = Vec::with_capacity(chunk.len() * f);
        for p in chunk {
            flat.extend_from_slice(p.motion.frames().data());
        }
        let zm = model.encode_motions(
            &Tensor::matrix(chunk.len(), f, flat)?,
            &vec![0; chunk.len()],
        )?;
        let conds: Vec<Condition> = chunk.iter().map(|p| p.condition).collect();
        let zc = model.encode_conditions(&conds)?;
        for (k, p) in chunk.iter().enumerate() {
            entries.push(IndexEntry {
                ordinal: (chunk_no * 256 + k) as u32,
                condition: p.condition,
                seed: p.seed,
                motion: p.motion.clone(),
                z_motion: Tensor::vector(zm.row(k).to_vec()),
                z_cond: Tensor::vector(zc.row(k).to_vec()),
            });
        }
    }
    Ok(RetrievalIndex {
        checkpoint_hash: model.to_checkpoint().hash(),
        n_frames: cfg.n_frames,
        dim: cfg.dim,
        d_z: cfg.d_z,
        entries,
    })
}

impl RetrievalIndex {
    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_hash(&self, hash: &str) -> Result<(), RetrievalError> {
        if self.checkpoint_hash != hash {
            return Err(RetrievalError::HashMismatch {
                index: self.checkpoint_hash.clone(),
                query: hash.to_string(),
            });
        }
        Ok(())
    }

    /// Entry maximizing cos(z_motion, z_c); the lowest ordinal wins ties.
    pub fn best_match(&self, z_c: &Tensor) -> Result<Anchor, RetrievalError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = cosine(&e.z_motion, z_c)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, score) = best.ok_or(RetrievalError::EmptyIndex)?;
        let e = &self.entries[i];
        Ok(Anchor {
            ordinal: e.ordinal,
            score,
            motion: e.motion.clone(),
            embedding: LatentEmbedding {
                modality: Modality::Motion,
                z: e.z_motion.clone(),
            },
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(INDEX_MAGIC)
            .u32(INDEX_VERSION)
            .str(&self.checkpoint_hash)
            .u32(self.n_frames as u32)
            .u32(self.dim as u32)
            .u32(self.d_z as u32)
            .u32(self.entries.len() as u32);
        for e in &self.entries {
            w.u32(e.ordinal)
                .u32(e.condition.class_id())
                .f64s(&e.condition.params.as_array())
                .u64(e.seed)
                .f64s(e.motion.frames().data())
                .f64s(e.z_motion.data())
                .f64s(e.z_cond.data());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut head = ByteReader::new(bytes);
        if bytes.len() >= 4 {
            head.magic(INDEX_MAGIC)?;
        }
        if bytes.len() >= 8 {
            head.version(INDEX_VERSION)?;
        }
        let body = verify_crc(bytes)?;
        let mut r = ByteReader::new(body);
        r.magic(INDEX_MAGIC)?;
        r.version(INDEX_VERSION)?;
        let checkpoint_hash = r.str()?;
        let n_frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let d_z = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let ordinal = r.u32()?;
            let class_id = r.u32()?;
            let params = [r.f64()?, r.f64()?, r.f64()?];
            let seed = r.u64()?;
            let frames = Tensor::new(vec![n_frames, dim], r.f64s(n_frames * dim)?)?;
            entries.push(IndexEntry {
                ordinal,
                condition: Condition::from_class_id(class_id, params)?,
                seed,
                motion: MotionSequence::new(frames)?,
                z_motion: Tensor::vector(r.f64s(d_z)?),
                z_cond: Tensor::vector(r.f64s(d_z)?),
            });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())).into());
        }
        Ok(Self {
            checkpoint_hash,
            n_frames,
            dim,
            d_z,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String, RetrievalError> {
        let bytes = self.encode();
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::decode(&fs::read(path)?)
    }
}

/// Anchor x^c for condition `c`: the indexed motion closest to z_c.
///
/// `model` must be the checkpoint the index was built from.
pub fn retrieve_anchor(
    index: &RetrievalIndex,
    model: &RewardModel,
    c: &Condition,
) -> Result<Anchor, RetrievalError> {
    index.check_hash(&model.to_checkpoint().hash())?;
    let z_c = model.encode_condition(c)?.z;
    index.best_match(&z_c)
}
