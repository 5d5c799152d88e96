use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample, GuidanceConfig, RewardGuide, SampleTrace, SamplerError};
use crate::diffusion::{Denoiser, NoiseSchedule, SamplingPlan};
use crate::numerics::{RngStream, Tensor};
use crate::retrieval::RetrievalIndex;
use crate::reward::{DualReward, RewardModel};
use crate::synthdata::{Condition, MotionSequence};

/// How each condition's RNG stream id is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKey {
    /// Stream id = position in the input list.
    #[default]
    Position,
    /// Stream id derived from the condition itself, so outputs follow
    /// their conditions under reordering.
    ConditionHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub seed: u64,
    pub key: StreamKey,
    pub workers: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            key: StreamKey::Position,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub condition: Condition,
    pub motion: MotionSequence,
    pub trace: SampleTrace,
    pub anchor: Option<u32>,
}

pub fn condition_stream_id(c: &Condition) -> u64 {
    let mut h = Sha256::new();
    h.update(c.class_id().to_le_bytes());
    for p in c.params.as_array() {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Samples one motion per condition, in input order.
///
/// Guidance needs `reward`; a nonzero η also needs `index`, which must have
/// been built from the same reward checkpoint.
pub fn batch_sample(
    conds: &[Condition],
    denoiser: &Denoiser,
    reward: Option<&RewardModel>,
    index: Option<&RetrievalIndex>,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    opts: &BatchOptions,
) -> Result<Vec<SampleResult>, SamplerError> {
    if conds.is_empty() {
        return Err(SamplerError::NoConditions);
    }
    gcfg.validate()?;
    let plan = gcfg.steps.plan(sched)?;
    let guided = gcfg.guided();
    let reward = match (guided, reward) {
        (true, None) => {
            return Err(SamplerError::InvalidConfig(
                "guidance requires a reward model".into(),
            ))
        }
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let index = match (reward, gcfg.eta != 0.0) {
        (Some(model), true) => {
            let idx = index.ok_or_else(|| {
                SamplerError::InvalidConfig("eta > 0 requires a retrieval index".into())
            })?;
            idx.check_hash(&model.to_checkpoint().hash())?;
            Some(idx)
        }
        _ => None,
    };
    let cfg = denoiser.config();
    let shape = [cfg.n_frames, cfg.dim];
    let run = |i: usize, c: &Condition| -> Result<SampleResult, SamplerError> {
        let stream = match opts.key {
            StreamKey::Position => i as u64,
            StreamKey::ConditionHash => condition_stream_id(c),
        };
        let mut rng = RngStream::derived(opts.seed, "sample", stream);
        sample_one(c, denoiser, reward, index, &plan, gcfg, &shape, &mut rng)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| SamplerError::Pool(e.to_string()))?;
    pool.install(|| {
        conds
            .par_iter()
            .enumerate()
            .map(|(i, c)| run(i, c))
            .collect()
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_one(
    c: &Condition,
    denoiser: &Denoiser,
    reward: Option<&RewardModel>,
    index: Option<&RetrievalIndex>,
    plan: &SamplingPlan,
    gcfg: &GuidanceConfig,
    shape: &[usize],
    rng: &mut RngStream,
) -> Result<SampleResult, SamplerError> {
    let mut anchor = None;
    let guide = match reward {
        Some(model) => {
            let z_anchor: Option<Tensor> = match index {
                Some(idx) => {
                    let a = idx.best_match(&model.encode_condition(c)?.z)?;
                    anchor = Some(a.ordinal);
                    Some(a.embedding.z)
                }
                None => None,
            };
            Some(
                DualReward::new(model, c, z_anchor.as_ref(), gcfg.mu, gcfg.eta)?
                    .with_step_token(gcfg.step_token),
            )
        }
        None => None,
    };
    let (x, trace) = sample(
        shape,
        Some(c),
        denoiser,
        guide.as_ref().map(|g| g as &dyn RewardGuide),
        plan,
        gcfg,
        rng,
    )?;
    Ok(SampleResult {
        condition: *c,
        motion: MotionSequence::new(x)
            .map_err(|e| SamplerError::InvalidConfig(format!("sampled motion: {e}")))?,
        trace,
        anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, ScheduleConfig};
    use crate::guided_sampler::{GuidanceMode, StepSchedule};
    use crate::reward::RewardConfig;
    use crate::synthdata::{build_dataset, DatasetSpec, Split};

    fn fixtures() -> (Denoiser, RewardModel, NoiseSchedule, Vec<Condition>) {
        let d = Denoiser::new(DenoiserConfig::default(), 0);
        let r = RewardModel::new(RewardConfig::default(), 0);
        let s = ScheduleConfig::default().build().unwrap();
        let conds = build_dataset(&DatasetSpec::with_total(6, 16), Split::Test, 1)
            .unwrap()
            .conditions();
        (d, r, s, conds)
    }

    fn cfg() -> GuidanceConfig {
        GuidanceConfig {
            steps: StepSchedule::Strided(10),
            ..GuidanceConfig::default()
        }
    }

    #[test]
    fn single_matches_stream_zero() {
        let (d, r, s, conds) = fixtures();
        let out = batch_sample(
            &conds[..1],
            &d,
            Some(&r),
            None,
            &s,
            &cfg(),
            &BatchOptions::default(),
        )
        .unwrap();
        let plan = cfg().steps.plan(&s).unwrap();
        let mut rng = RngStream::derived(0, "sample", 0);
        let one = sample_one(
            &conds[0],
            &d,
            Some(&r),
            None,
            &plan,
            &cfg(),
            &[16, 2],
            &mut rng,
        )
        .unwrap();
        assert_eq!(out[0], one);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let (d, r, s, conds) = fixtures();
        let one = batch_sample(
            &conds,
            &d,
            Some(&r),
            None,
            &s,
            &cfg(),
            &BatchOptions::default(),
        )
        .unwrap();
        let four = batch_sample(
            &conds,
            &d,
            Some(&r),
            None,
            &s,
            &cfg(),
            &BatchOptions {
                workers: 4,
                ..BatchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn condition_keyed_streams_follow_permutation() {
        let (d, r, s, conds) = fixtures();
        let opts = BatchOptions {
            key: StreamKey::ConditionHash,
            ..BatchOptions::default()
        };
        let a = batch_sample(&conds, &d, Some(&r), None, &s, &cfg(), &opts).unwrap();
        let mut rev = conds.clone();
        rev.reverse();
        let mut b = batch_sample(&rev, &d, Some(&r), None, &s, &cfg(), &opts).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_and_anchor_requirements() {
        let (d, r, s, conds) = fixtures();
        let opts = BatchOptions::default();
        assert!(matches!(
            batch_sample(&conds, &d, None, None, &s, &cfg(), &opts),
            Err(SamplerError::InvalidConfig(_))
        ));
        let eta = GuidanceConfig { eta: 0.5, ..cfg() };
        assert!(batch_sample(&conds, &d, Some(&r), None, &s, &eta, &opts).is_err());
        let off = GuidanceConfig {
            mode: GuidanceMode::Off,
            ..cfg()
        };
        assert!(batch_sample(&conds, &d, None, None, &s, &off, &opts).is_ok());
        assert!(matches!(
            batch_sample(&[], &d, None, None, &s, &off, &opts),
            Err(SamplerError::NoConditions)
        ));
    }
}
