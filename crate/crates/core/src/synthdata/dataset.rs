use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::families::{position, Condition, MotionClass, MotionParams};
use super::SynthError;
use crate::numerics::{RngStream, Tensor};

/// Spatial dimensionality of every trajectory frame.
pub const MOTION_DIM: usize = 2;
/// Standard deviation of the per-coordinate jitter added to generated frames.
pub const JITTER_STD: f64 = 0.01;

/// An `N x D` trajectory; row `k` holds the position at frame `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
}

impl MotionSequence {
    pub fn new(frames: Tensor) -> Result<Self, SynthError> {
        let shape = frames.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(SynthError::BadMotionShape(shape.to_vec()));
        }
        if !frames.is_finite() {
            return Err(SynthError::NonFiniteMotion);
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        self.frames.row(k)
    }
}

/// Samples the per-family closed form at `t = 0, 1, ..., n_frames - 1` and
/// adds seeded Gaussian jitter with standard deviation `jitter`.
pub fn generate_motion_with_jitter(
    cond: &Condition,
    n_frames: usize,
    seed: u64,
    jitter: f64,
) -> Result<MotionSequence, SynthError> {
    if n_frames < 2 {
        return Err(SynthError::TooFewFrames(n_frames));
    }
    MotionClass::from_id(cond.class_id())?;
    let mut rng = RngStream::new(seed, 1);
    let mut data = Vec::with_capacity(n_frames * MOTION_DIM);
    for k in 0..n_frames {
        let p = position(cond, k as f64);
        for v in p {
            let noise = if jitter > 0.0 {
                jitter * rng.normal()
            } else {
                0.0
            };
            data.push(v + noise);
        }
    }
    MotionSequence::new(Tensor::new(vec![n_frames, MOTION_DIM], data).expect("consistent shape"))
}

/// [`generate_motion_with_jitter`] at the standard jitter level.
pub fn generate_motion(
    cond: &Condition,
    n_frames: usize,
    seed: u64,
) -> Result<MotionSequence, SynthError> {
    generate_motion_with_jitter(cond, n_frames, seed, JITTER_STD)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self, SynthError> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(SynthError::UnknownSplit(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Pair seeds of a split occupy `[base + code * SPLIT_SEED_SPAN, base + (code + 1) * SPLIT_SEED_SPAN)`.
pub const SPLIT_SEED_SPAN: u64 = 1 << 28;

/// Seed of the `index`-th pair of a split; splits get disjoint ranges.
pub fn pair_seed(generator_seed: u64, split: Split, index: usize) -> u64 {
    generator_seed
        .wrapping_mul(4 * SPLIT_SEED_SPAN)
        .wrapping_add(u64::from(split.code()) * SPLIT_SEED_SPAN)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub condition: Condition,
    pub motion: MotionSequence,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub generator_seed: u64,
    pub n_frames: usize,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        MOTION_DIM
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.pairs.iter().map(|p| p.condition).collect()
    }
}

/// Per-class pair counts and generator settings for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub counts: BTreeMap<MotionClass, usize>,
    pub n_frames: usize,
}

impl DatasetSpec {
    /// The same number of pairs for every family.
    pub fn balanced(per_class: usize, n_frames: usize) -> Self {
        Self {
            counts: MotionClass::ALL.iter().map(|&c| (c, per_class)).collect(),
            n_frames,
        }
    }

    /// `total` pairs spread over the families; classes that would get zero
    /// pairs are left out.
    pub fn with_total(total: usize, n_frames: usize) -> Self {
        let k = MotionClass::ALL.len();
        let counts = MotionClass::ALL
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, total / k + usize::from(i < total % k)))
            .filter(|&(_, n)| n > 0)
            .collect();
        Self { counts, n_frames }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Draws a condition uniformly over the family's parameter ranges.
pub fn sample_condition(class: MotionClass, rng: &mut RngStream) -> Condition {
    let r = class.param_ranges();
    let params = MotionParams {
        speed: rng.uniform_range(r[0].0, r[0].1),
        curvature: rng.uniform_range(r[1].0, r[1].1),
        amplitude: rng.uniform_range(r[2].0, r[2].1),
    };
    Condition::new(class, params).expect("ranges are finite")
}

/// Condition of the pair with the given seed (the first draw of stream 0).
pub fn condition_for_seed(class: MotionClass, seed: u64) -> Condition {
    sample_condition(class, &mut RngStream::new(seed, 0))
}

/// Generates one split. Classes are laid out in class-id order, then the
/// pair order is shuffled with a seeded stream so batches mix families.
pub fn build_dataset(spec: &DatasetSpec, split: Split, seed: u64) -> Result<Dataset, SynthError> {
    if spec.counts.is_empty() || spec.total() == 0 {
        return Err(SynthError::EmptySpec);
    }
    if let Some((class, _)) = spec.counts.iter().find(|(_, &n)| n == 0) {
        return Err(SynthError::ZeroCount(*class));
    }
    let mut classes = Vec::with_capacity(spec.total());
    for (&class, &n) in &spec.counts {
        classes.extend(std::iter::repeat_n(class, n));
    }
    RngStream::derived(seed, split.name(), 0).shuffle(&mut classes);
    let pairs = classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let ps = pair_seed(seed, split, i);
            let condition = condition_for_seed(class, ps);
            let motion = generate_motion(&condition, spec.n_frames, ps)?;
            Ok(Pair {
                condition,
                motion,
                seed: ps,
            })
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(Dataset {
        split,
        generator_seed: seed,
        n_frames: spec.n_frames,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds train/val/test with the requested totals, spread as evenly as
/// possible over the families (earlier class ids take any remainder).
pub fn build_splits(
    train: usize,
    val: usize,
    test: usize,
    n_frames: usize,
    seed: u64,
) -> Result<Splits, SynthError> {
    Ok(Splits {
        train: build_dataset(
            &DatasetSpec::with_total(train, n_frames),
            Split::Train,
            seed,
        )?,
        val: build_dataset(&DatasetSpec::with_total(val, n_frames), Split::Val, seed)?,
        test: build_dataset(&DatasetSpec::with_total(test, n_frames), Split::Test, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(m: &MotionSequence) -> Vec<[f64; 2]> {
        (0..m.frame_count())
            .map(|k| [m.frame(k)[0], m.frame(k)[1]])
            .collect()
    }

    #[test]
    fn line_without_jitter_is_constant_velocity() {
        let c =
            Condition::new(MotionClass::Line, MotionParams::from_array([1.0, 0.0, 0.0])).unwrap();
        let m = generate_motion_with_jitter(&c, 4, 9, 0.0).unwrap();
        assert_eq!(
            frames(&m),
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]
        );
    }

    #[test]
    fn stop_go_at_zero_speed_is_stationary() {
        let c = Condition::new(
            MotionClass::StopGo,
            MotionParams::from_array([0.0, 0.7, 0.0]),
        )
        .unwrap();
        let m = generate_motion_with_jitter(&c, 16, 3, 0.0).unwrap();
        let f = frames(&m);
        assert!(f.iter().all(|p| *p == f[0]));
    }

    #[test]
    fn arc_heading_rotates_by_curvature_times_time() {
        // Arc length s = v t, heading = kappa * s; heading at the end of the
        // n-th frame interval is kappa * v * n * dt with dt = 1 frame.
        let kappa = 0.1;
        let c = Condition::new(
            MotionClass::ArcLeft,
            MotionParams::from_array([1.0, kappa, 0.0]),
        )
        .unwrap();
        let n = 100;
        let m = generate_motion_with_jitter(&c, n, 0, 0.0).unwrap();
        // Chord k -> k+1 of a circle traversed at unit speed points along the
        // tangent at t = k + 1/2; extrapolate half a step to t = n.
        let a = m.frame(n - 2);
        let b = m.frame(n - 1);
        let chord = (b[1] - a[1]).atan2(b[0] - a[0]);
        let final_heading = chord + 1.5 * kappa;
        let expected = n as f64 * kappa;
        let wrapped = (final_heading - expected).rem_euclid(std::f64::consts::TAU);
        let err = wrapped.min(std::f64::consts::TAU - wrapped);
        assert!(err < 1e-9, "heading error {err}");
        let v = super::super::families::velocity(&c, n as f64);
        let tangent = v[1].atan2(v[0]);
        let wrapped = (tangent - expected).rem_euclid(std::f64::consts::TAU);
        assert!(wrapped.min(std::f64::consts::TAU - wrapped) < 1e-9);
    }

    #[test]
    fn too_few_frames_rejected() {
        let c = Condition::parse("line:0.1,0,0").unwrap();
        assert!(matches!(
            generate_motion(&c, 1, 0),
            Err(SynthError::TooFewFrames(1))
        ));
    }

    #[test]
    fn count_contract() {
        let spec = DatasetSpec {
            counts: [(MotionClass::Line, 2)].into_iter().collect(),
            n_frames: 16,
        };
        let d = build_dataset(&spec, Split::Train, 5).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d
            .pairs
            .iter()
            .all(|p| p.condition.class == MotionClass::Line));
        assert!(d.pairs.iter().all(|p| p.condition.in_range()));
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = DatasetSpec {
            counts: BTreeMap::new(),
            n_frames: 16,
        };
        assert!(matches!(
            build_dataset(&spec, Split::Train, 0),
            Err(SynthError::EmptySpec)
        ));
    }

    #[test]
    fn split_sizes_as_requested() {
        let s = build_splits(800, 100, 100, 16, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        assert!(build_splits(800, 0, 100, 16, 1).is_err());
    }

    #[test]
    fn split_seed_ranges_are_disjoint() {
        let s = build_splits(16, 16, 16, 8, 77).unwrap();
        let all: Vec<u64> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| d.pairs.iter().map(|p| p.seed))
            .collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        for d in [&s.train, &s.val, &s.test] {
            let lo = pair_seed(77, d.split, 0);
            assert!(d
                .pairs
                .iter()
                .all(|p| p.seed >= lo && p.seed < lo + SPLIT_SEED_SPAN));
        }
    }

    #[test]
    fn pairs_regenerate_from_their_seed() {
        let d = build_dataset(&DatasetSpec::balanced(3, 16), Split::Val, 4).unwrap();
        for p in &d.pairs {
            assert_eq!(condition_for_seed(p.condition.class, p.seed), p.condition);
            assert_eq!(generate_motion(&p.condition, 16, p.seed).unwrap(), p.motion);
        }
    }
}
