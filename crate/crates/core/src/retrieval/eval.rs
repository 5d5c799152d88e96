use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::numerics::{RngStream, Tensor};
use crate::reward::RewardModel;
use crate::synthdata::{Condition, Dataset};

pub const RECALL_KS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// R@k for each k in `ks`, motion query against the batch's conditions.
    pub motion_to_text: Vec<f64>,
    /// R@k for each k in `ks`, condition query against the batch's motions.
    pub text_to_motion: Vec<f64>,
    pub batch_size: usize,
    pub batches: usize,
    pub queries: usize,
    pub seed: u64,
    pub noise_t: usize,
}

impl RetrievalReport {
    pub fn r_at(&self, k: usize) -> Option<(f64, f64)> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some((self.motion_to_text[i], self.text_to_motion[i]))
    }

    /// True when both directions are nondecreasing in k and inside [0, 1].
    pub fn is_monotone(&self) -> bool {
        [&self.motion_to_text, &self.text_to_motion]
            .into_iter()
            .all(|v| {
                v.windows(2).all(|w| w[0] <= w[1]) && v.iter().all(|x| (0.0..=1.0).contains(x))
            })
    }
}

/// 0-based rank of `scores[target]` when sorted best-first. Equal scores
/// are ordered by index, so the rank counts strictly better entries plus
/// equal entries with a lower index.
pub fn rank_with_ties(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

fn unit_rows(z: &Tensor) -> Vec<Vec<f64>> {
    (0..z.rows())
        .map(|i| {
            let r = z.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Counts hits per k over consecutive batches of already-shuffled rows.
fn batch_hits(zm: &[Vec<f64>], zc: &[Vec<f64>], batch: usize) -> (Vec<usize>, Vec<usize>, usize) {
    let n_batches = zm.len() / batch;
    let per_batch: Vec<(Vec<usize>, Vec<usize>)> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let m = &zm[b * batch..(b + 1) * batch];
            let c = &zc[b * batch..(b + 1) * batch];
            let sim: Vec<Vec<f64>> = m
                .iter()
                .map(|mi| {
                    c.iter()
                        .map(|cj| mi.iter().zip(cj).map(|(x, y)| x * y).sum())
                        .collect()
                })
                .collect();
            let mut m2t = vec![0; RECALL_KS.len()];
            let mut t2m = vec![0; RECALL_KS.len()];
            for i in 0..batch {
                let row_rank = rank_with_ties(&sim[i], i);
                let col: Vec<f64> = (0..batch).map(|j| sim[j][i]).collect();
                let col_rank = rank_with_ties(&col, i);
                for (ki, &k) in RECALL_KS.iter().enumerate() {
                    m2t[ki] += usize::from(row_rank < k);
                    t2m[ki] += usize::from(col_rank < k);
                }
            }
            (m2t, t2m)
        })
        .collect();
    let mut m2t = vec![0; RECALL_KS.len()];
    let mut t2m = vec![0; RECALL_KS.len()];
    for (a, b) in per_batch {
        for k in 0..RECALL_KS.len() {
            m2t[k] += a[k];
            t2m[k] += b[k];
        }
    }
    (m2t, t2m, n_batches)
}

fn report(zm: &Tensor, zc: &Tensor, batch: usize, seed: u64, noise_t: usize) -> RetrievalReport {
    let (m2t, t2m, batches) = batch_hits(&unit_rows(zm), &unit_rows(zc), batch);
    let queries = batches * batch;
    let frac = |v: Vec<usize>| v.into_iter().map(|h| h as f64 / queries as f64).collect();
    RetrievalReport {
        ks: RECALL_KS.to_vec(),
        motion_to_text: frac(m2t),
        text_to_motion: frac(t2m),
        batch_size: batch,
        batches,
        queries,
        seed,
        noise_t,
    }
}

fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derived(seed, "retrieval-shuffle", 0).shuffle(&mut order);
    order
}

fn gather(z: &Tensor, order: &[usize]) -> Tensor {
    let d = z.cols();
    let mut out = Vec::with_capacity(order.len() * d);
    for &i in order {
        out.extend_from_slice(z.row(i));
    }
    Tensor::matrix(order.len(), d, out).expect("non-empty")
}

/// The batch protocol on precomputed paired features: shuffle with `seed`,
/// cut into full batches, rank by cosine within each batch.
pub fn retrieval_from_features(
    z_motion: &Tensor,
    z_cond: &Tensor,
    batch: usize,
    seed: u64,
) -> Result<RetrievalReport, RetrievalError> {
    if z_motion.shape() != z_cond.shape() || z_motion.shape().len() != 2 {
        return Err(RetrievalError::FeatureMismatch(format!(
            "{:?} vs {:?}",
            z_motion.shape(),
            z_cond.shape()
        )));
    }
    let n = z_motion.rows();
    if batch == 0 || n < batch {
        return Err(RetrievalError::SplitTooSmall { len: n, batch });
    }
    let order = shuffled_order(n, seed);
    Ok(report(
        &gather(z_motion, &order),
        &gather(z_cond, &order),
        batch,
        seed,
        0,
    ))
}

/// Batch-`batch` retrieval on `test`, with motions noised to `noise_t`
/// (0 keeps them clean) and encoded with that step's token.
pub fn retrieval_eval(
    model: &RewardModel,
    test: &Dataset,
    sched: &NoiseSchedule,
    batch: usize,
    seed: u64,
    noise_t: usize,
) -> Result<RetrievalReport, RetrievalError> {
    let n = test.len();
    if batch == 0 || n < batch {
        return Err(RetrievalError::SplitTooSmall { len: n, batch });
    }
    sched.check_timestep(noise_t)?;
    let order = shuffled_order(n, seed);
    let used = &order[..(n / batch) * batch];
    let f = model.config().motion_len();
    let chunks: Vec<(Tensor, Tensor)> = used
        .par_chunks(batch)
        .enumerate()
        .map(|(b, idx)| -> Result<(Tensor, Tensor), RetrievalError> {
            let mut rng = RngStream::derived(seed, "retrieval-noise", b as u64);
            let mut flat = Vec::with_capacity(batch * f);
            for &i in idx {
                let x0 = test.pairs[i].motion.frames().reshape(&[f])?;
                let x = if noise_t == 0 {
                    x0
                } else {
                    forward_noise(&x0, noise_t, &rng.gaussian(&[f]), sched)?
                };
                flat.extend_from_slice(x.data());
            }
            let zm =
                model.encode_motions(&Tensor::matrix(batch, f, flat)?, &vec![noise_t; batch])?;
            let conds: Vec<Condition> = idx.iter().map(|&i| test.pairs[i].condition).collect();
            let zc = model.encode_conditions(&conds)?;
            Ok((zm, zc))
        })
        .collect::<Result<_, _>>()?;
    let zm = Tensor::stack(&chunks.iter().map(|c| &c.0).collect::<Vec<_>>())?;
    let zc = Tensor::stack(&chunks.iter().map(|c| &c.1).collect::<Vec<_>>())?;
    let d = model.config().d_z;
    let zm = zm.reshape(&[used.len(), d])?;
    let zc = zc.reshape(&[used.len(), d])?;
    Ok(report(&zm, &zc, batch, seed, noise_t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rank() {
        assert_eq!(rank_with_ties(&[0.5, 0.9, 0.5], 2), 2);
        assert_eq!(rank_with_ties(&[0.5, 0.9, 0.5], 0), 1);
        assert_eq!(rank_with_ties(&[0.1, 0.1, 0.1], 0), 0);
    }

    #[test]
    fn perfect_alignment_scores_one() {
        let mut rng = RngStream::new(0, 0);
        let z = rng.gaussian(&[64, 8]);
        let r = retrieval_from_features(&z, &z, 32, 1).unwrap();
        assert_eq!(r.motion_to_text, vec![1.0; 5]);
        assert_eq!(r.text_to_motion, vec![1.0; 5]);
        assert!(r.is_monotone());
    }

    #[test]
    fn random_features_near_chance() {
        let mut rng = RngStream::new(7, 0);
        let zm = rng.gaussian(&[10_016, 16]);
        let zc = rng.gaussian(&[10_016, 16]);
        let r = retrieval_from_features(&zm, &zc, 32, 3).unwrap();
        assert_eq!(r.queries, 10_016);
        assert!((r.motion_to_text[0] - 1.0 / 32.0).abs() < 0.01);
        assert!(r.is_monotone());
        assert_eq!(r, retrieval_from_features(&zm, &zc, 32, 3).unwrap());
    }

    #[test]
    fn small_split_rejected() {
        let z = Tensor::zeros(&[10, 4]);
        assert!(matches!(
            retrieval_from_features(&z, &z, 32, 0),
            Err(RetrievalError::SplitTooSmall { len: 10, batch: 32 })
        ));
    }
}
