//! `RGDS` dataset files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RGDS" | version u32 | dim u32 | n_frames u32 | pair_count u32
//! | split u32 | generator_seed u64
//! pair_count x { class_id u32 | params 3 x f64 | seed u64 | frames n_frames*dim x f64 }
//! crc32 u32
//! ```

use std::fs;
use std::path::Path;

use super::dataset::{Dataset, MotionSequence, Pair, Split, MOTION_DIM};
use super::families::Condition;
use super::SynthError;
use crate::container::{crc32, ByteReader, ByteWriter, FormatError};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RGDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 8;

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC)
        .u32(DATASET_VERSION)
        .u32(MOTION_DIM as u32)
        .u32(d.n_frames as u32)
        .u32(d.pairs.len() as u32)
        .u32(d.split.code())
        .u64(d.generator_seed);
    for p in &d.pairs {
        w.u32(p.condition.class_id())
            .f64s(&p.condition.params.as_array())
            .u64(p.seed)
            .f64s(p.motion.frames().data());
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, SynthError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(FormatError::Truncated.into());
    }
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let dim = r.u32()? as usize;
    let n_frames = r.u32()? as usize;
    let count = r.u32()? as usize;
    let split = Split::from_code(r.u32()?)?;
    let generator_seed = r.u64()?;
    if dim != MOTION_DIM {
        return Err(
            FormatError::Malformed(format!("frame dim {dim}, expected {MOTION_DIM}")).into(),
        );
    }
    let record = 4 + 3 * 8 + 8 + n_frames * dim * 8;
    let expected = HEADER_LEN + count * record + 4;
    if bytes.len() < expected {
        return Err(FormatError::Truncated.into());
    }
    if bytes.len() > expected {
        return Err(
            FormatError::Malformed(format!("{} trailing bytes", bytes.len() - expected)).into(),
        );
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.u32()?;
        let params = [r.f64()?, r.f64()?, r.f64()?];
        let seed = r.u64()?;
        let frames = r.f64s(n_frames * dim)?;
        let condition = Condition::from_class_id(class_id, params)?;
        let motion = MotionSequence::new(Tensor::new(vec![n_frames, dim], frames)?)?;
        pairs.push(Pair {
            condition,
            motion,
            seed,
        });
    }
    Ok(Dataset {
        split,
        generator_seed,
        n_frames,
        pairs,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), SynthError> {
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SynthError> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, build_splits, DatasetSpec};

    #[test]
    fn round_trip_of_thousand_pairs() {
        let d = build_dataset(&DatasetSpec::with_total(1000, 16), Split::Train, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rgds");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = build_splits(16, 8, 8, 12, 9).unwrap();
        let b = build_splits(16, 8, 8, 12, 9).unwrap();
        assert_eq!(encode_dataset(&a.train), encode_dataset(&b.train));
        assert_eq!(encode_dataset(&a.test), encode_dataset(&b.test));
    }

    fn sample_bytes() -> Vec<u8> {
        encode_dataset(&build_dataset(&DatasetSpec::with_total(5, 8), Split::Val, 1).unwrap())
    }

    fn format_err(r: Result<Dataset, SynthError>) -> FormatError {
        match r {
            Err(SynthError::Format(e)) => e,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_checksum_detected() {
        let mut b = sample_bytes();
        let n = b.len();
        b[n - 1] ^= 0xff;
        assert!(matches!(
            format_err(decode_dataset(&b)),
            FormatError::Checksum { .. }
        ));
        let mut b = sample_bytes();
        b[HEADER_LEN + 10] ^= 0x01;
        assert!(matches!(
            format_err(decode_dataset(&b)),
            FormatError::Checksum { .. }
        ));
    }

    #[test]
    fn empty_and_short_files_are_truncated() {
        assert_eq!(format_err(decode_dataset(&[])), FormatError::Truncated);
        let b = sample_bytes();
        assert_eq!(
            format_err(decode_dataset(&b[..b.len() - 9])),
            FormatError::Truncated
        );
    }

    #[test]
    fn version_mismatch_detected() {
        let mut b = sample_bytes();
        b[4] = 9;
        assert!(matches!(
            format_err(decode_dataset(&b)),
            FormatError::VersionMismatch { found: 9, .. }
        ));
    }

    #[test]
    fn bad_magic_detected() {
        let mut b = sample_bytes();
        b[0] = b'X';
        assert!(matches!(
            format_err(decode_dataset(&b)),
            FormatError::BadMagic { .. }
        ));
    }
}
