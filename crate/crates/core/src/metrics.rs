//! Evaluation metrics on reward-model features: R-Precision, Fréchet
//! distance, multimodal distance and diversity.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, RngStream, Tensor};
use crate::retrieval::rank_with_ties;
use crate::reward::{RewardError, RewardModel};
use crate::synthdata::{Condition, MotionSequence};

pub const R_PRECISION_BATCH: usize = 32;
pub const DIVERSITY_PAIRS: usize = 300;
const EIGEN_FLOOR: f64 = 1e-10;
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("paired sets differ in size: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("feature dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("features come from different reward checkpoints ({real} vs {generated})")]
    ExtractorMismatch { real: String, generated: String },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// Embeddings `[n, d_z]` tagged with their origin and the extractor hash.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub source: FeatureSource,
    pub checkpoint_hash: String,
}

impl FeatureSet {
    pub fn new(
        features: Tensor,
        source: FeatureSource,
        checkpoint_hash: String,
    ) -> Result<Self, MetricsError> {
        if features.shape().len() != 2 {
            return Err(MetricsError::DimMismatch(features.shape().len(), 2));
        }
        if !features.is_finite() {
            return Err(MetricsError::NonFinite("features"));
        }
        Ok(Self {
            features,
            source,
            checkpoint_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Clean (t = 0) motion latents, one row per motion.
pub fn motion_features(
    model: &RewardModel,
    motions: &[&MotionSequence],
) -> Result<Tensor, MetricsError> {
    if motions.is_empty() {
        return Err(MetricsError::TooFewRows { need: 1, got: 0 });
    }
    let chunks: Vec<Tensor> = motions
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let flat: Vec<Tensor> = chunk
                .iter()
                .map(|m| m.frames().reshape(&[m.frames().len()]))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&Tensor> = flat.iter().collect();
            let x = Tensor::stack(&refs)?;
            Ok(model.encode_motions(&x, &vec![0; chunk.len()])?)
        })
        .collect::<Result<_, MetricsError>>()?;
    concat_rows(&chunks)
}

pub fn condition_features(
    model: &RewardModel,
    conds: &[Condition],
) -> Result<Tensor, MetricsError> {
    if conds.is_empty() {
        return Err(MetricsError::TooFewRows { need: 1, got: 0 });
    }
    let chunks: Vec<Tensor> = conds
        .par_chunks(ENCODE_CHUNK)
        .map(|c| model.encode_conditions(c))
        .collect::<Result<_, _>>()?;
    concat_rows(&chunks)
}

fn concat_rows(chunks: &[Tensor]) -> Result<Tensor, MetricsError> {
    let cols = chunks[0].cols();
    let rows = chunks.iter().map(Tensor::rows).sum();
    let data = chunks
        .iter()
        .flat_map(|c| c.data().iter().copied())
        .collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(), MetricsError> {
    if a.rows() != b.rows() {
        return Err(MetricsError::CountMismatch(a.rows(), b.rows()));
    }
    if a.cols() != b.cols() {
        return Err(MetricsError::DimMismatch(a.cols(), b.cols()));
    }
    Ok(())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Top-k hit rates for each `k`, over seeded shuffled batches.
///
/// Within a batch every motion ranks all conditions by Euclidean distance;
/// a query hits when its own condition is among the k nearest. Rows that do
/// not fill a final batch are dropped.
pub fn r_precision_at(
    motion: &Tensor,
    cond: &Tensor,
    batch: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<f64>, MetricsError> {
    check_pair(motion, cond)?;
    if ks.contains(&0) {
        return Err(MetricsError::ZeroK);
    }
    let n = motion.rows();
    if batch == 0 || n < batch {
        return Err(MetricsError::TooFewRows {
            need: batch.max(1),
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derived(seed, "r-precision", 0).shuffle(&mut order);
    let hits: Vec<Vec<usize>> = order[..n / batch * batch]
        .par_chunks(batch)
        .map(|idx| {
            let mut h = vec![0; ks.len()];
            for (qi, &q) in idx.iter().enumerate() {
                let neg: Vec<f64> = idx
                    .iter()
                    .map(|&c| -euclidean(motion.row(q), cond.row(c)))
                    .collect();
                let rank = rank_with_ties(&neg, qi);
                for (hk, &k) in h.iter_mut().zip(ks) {
                    *hk += usize::from(rank < k);
                }
            }
            h
        })
        .collect();
    let queries = (n / batch * batch) as f64;
    Ok((0..ks.len())
        .map(|i| hits.iter().map(|h| h[i]).sum::<usize>() as f64 / queries)
        .collect())
}

pub fn r_precision(
    motion: &Tensor,
    cond: &Tensor,
    batch: usize,
    k: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    Ok(r_precision_at(motion, cond, batch, &[k], seed)?[0])
}

/// Sample mean and unbiased covariance of the rows.
pub fn mean_and_covariance(x: &Tensor) -> Result<(Vec<f64>, DMatrix<f64>), MetricsError> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(MetricsError::TooFewRows { need: 2, got: n });
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean: Vec<f64> = (0..d).map(|j| m.column(j).mean()).collect();
    let mut c = m.clone();
    for j in 0..d {
        c.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("covariance"));
    }
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix with eigenvalues below the floor
/// treated as zero.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m);
    let root = e
        .eigenvalues
        .map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

fn psd_sqrt_trace(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() })
        .sum()
}

/// ‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2}).
///
/// The cross term is computed as tr((Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}), which
/// has the same value and keeps every decomposition symmetric.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.cols() != b.cols() {
        return Err(MetricsError::DimMismatch(a.cols(), b.cols()));
    }
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb))
}

pub fn frechet_from_moments(ma: &[f64], ca: &DMatrix<f64>, mb: &[f64], cb: &DMatrix<f64>) -> f64 {
    let dm: f64 = ma.iter().zip(mb).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = psd_sqrt(ca.clone());
    let mut inner = &sa * cb * &sa;
    inner = (&inner + inner.transpose()) * 0.5;
    (dm + ca.trace() + cb.trace() - 2.0 * psd_sqrt_trace(inner)).max(0.0)
}

/// Mean Euclidean distance between paired rows.
pub fn mm_dist(motion: &Tensor, cond: &Tensor) -> Result<f64, MetricsError> {
    check_pair(motion, cond)?;
    let n = motion.rows();
    Ok((0..n)
        .map(|i| euclidean(motion.row(i), cond.row(i)))
        .sum::<f64>()
        / n as f64)
}

/// Mean Euclidean distance over explicit row pairs.
pub fn pair_distance(feats: &Tensor, pairs: &[(usize, usize)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::TooFewRows { need: 1, got: 0 });
    }
    Ok(pairs
        .iter()
        .map(|&(i, j)| euclidean(feats.row(i), feats.row(j)))
        .sum::<f64>()
        / pairs.len() as f64)
}

/// Mean distance over `n_pairs` disjoint random pairs.
pub fn diversity(feats: &Tensor, n_pairs: usize, seed: u64) -> Result<f64, MetricsError> {
    let n = feats.rows();
    if n_pairs == 0 || n < 2 * n_pairs {
        return Err(MetricsError::TooFewRows {
            need: 2 * n_pairs.max(1),
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derived(seed, "diversity", 0).shuffle(&mut order);
    let pairs: Vec<(usize, usize)> = (0..n_pairs)
        .map(|i| (order[i], order[i + n_pairs]))
        .collect();
    pair_distance(feats, &pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub batch: usize,
    pub diversity_pairs: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            batch: R_PRECISION_BATCH,
            diversity_pairs: DIVERSITY_PAIRS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Top-1, top-2 and top-3.
    pub r_precision: [f64; 3],
    pub fid: f64,
    pub mm_dist: f64,
    pub diversity_generated: f64,
    pub diversity_real: f64,
    /// |generated − real| diversity.
    pub diversity_gap: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let rows = [
            ("R-Precision top-1", self.r_precision[0]),
            ("R-Precision top-2", self.r_precision[1]),
            ("R-Precision top-3", self.r_precision[2]),
            ("FID", self.fid),
            ("MM Dist", self.mm_dist),
            ("Diversity (generated)", self.diversity_generated),
            ("Diversity (real)", self.diversity_real),
            ("Diversity gap", self.diversity_gap),
        ];
        let mut s = String::new();
        for (name, v) in rows {
            s += &format!("{name:<24}{v:>12.6}\n");
        }
        s += &format!(
            "{:<24}{:>12}\n{:<24}{:>12}\n",
            "real samples", self.n_real, "generated samples", self.n_generated
        );
        s
    }
}

/// All metrics for generated motions against their conditions and a real
/// reference set. Diversity uses as many pairs as both sets allow, up to
/// the configured count.
pub fn evaluate(
    real: &FeatureSet,
    generated: &FeatureSet,
    generated_cond: &Tensor,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    if real.checkpoint_hash != generated.checkpoint_hash {
        return Err(MetricsError::ExtractorMismatch {
            real: real.checkpoint_hash.clone(),
            generated: generated.checkpoint_hash.clone(),
        });
    }
    let g = &generated.features;
    let rp = r_precision_at(g, generated_cond, cfg.batch, &[1, 2, 3], cfg.seed)?;
    let pairs = cfg
        .diversity_pairs
        .min(real.len() / 2)
        .min(generated.len() / 2);
    let diversity_generated = diversity(g, pairs, cfg.seed)?;
    let diversity_real = diversity(&real.features, pairs, cfg.seed)?;
    Ok(MetricsReport {
        r_precision: [rp[0], rp[1], rp[2]],
        fid: frechet_distance(&real.features, g)?,
        mm_dist: mm_dist(g, generated_cond)?,
        diversity_generated,
        diversity_real,
        diversity_gap: (diversity_generated - diversity_real).abs(),
        n_real: real.len(),
        n_generated: generated.len(),
        seed: cfg.seed,
        checkpoint_hash: generated.checkpoint_hash.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        RngStream::new(seed, 0).gaussian(&[n, d])
    }

    #[test]
    fn self_nearest_features_are_perfect() {
        let c = random(64, 4, 1);
        let m = c.map(|v| v * 1.001);
        for k in [1, 2, 3] {
            assert_eq!(r_precision(&m, &c, 32, k, 0).unwrap(), 1.0);
        }
    }

    #[test]
    fn random_features_hit_chance() {
        let (m, c) = (random(10_016, 8, 2), random(10_016, 8, 3));
        let p = r_precision(&m, &c, 32, 1, 5).unwrap();
        assert!((p - 1.0 / 32.0).abs() < 0.01, "{p}");
        assert_eq!(r_precision(&m, &c, 32, 32, 5).unwrap(), 1.0);
    }

    #[test]
    fn r_precision_errors() {
        let a = random(31, 2, 0);
        assert!(matches!(
            r_precision(&a, &a, 32, 1, 0),
            Err(MetricsError::TooFewRows { .. })
        ));
        let b = random(40, 2, 0);
        assert!(matches!(
            r_precision(&a, &b, 8, 1, 0),
            Err(MetricsError::CountMismatch(31, 40))
        ));
        assert!(matches!(
            r_precision(&b, &b, 8, 0, 0),
            Err(MetricsError::ZeroK)
        ));
    }

    #[test]
    fn frechet_identity_and_shift() {
        let a = random(500, 5, 4);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let d = [0.5, -1.0, 2.0, 0.0, 0.25];
        let b = Tensor::matrix(
            500,
            5,
            a.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + d[i % 5])
                .collect(),
        )
        .unwrap();
        let want: f64 = d.iter().map(|x| x * x).sum();
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn frechet_scalar_case() {
        let a = Tensor::matrix(2, 1, vec![-1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]).unwrap();
        let b = a.scale(2.0);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_symmetric_and_rotation_invariant() {
        let a = random(300, 3, 6);
        let b = Tensor::matrix(
            300,
            3,
            random(300, 3, 7)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + (i % 3) as f64) + 0.3)
                .collect(),
        )
        .unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |x: &Tensor| {
            let data = (0..x.rows())
                .flat_map(|i| {
                    let r = x.row(i);
                    [c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]]
                })
                .collect();
            Tensor::matrix(x.rows(), 3, data).unwrap()
        };
        assert!((ab - frechet_distance(&rot(&a), &rot(&b)).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn frechet_matches_closed_form_gaussians() {
        let (ma, mb) = (vec![1.0, 0.0], vec![0.0, 2.0]);
        let ca = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let cb = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 4.0]);
        let want = 1.0 + 4.0 + (2.0 + 0.5 - 2.0) + (1.0 + 4.0 - 2.0 * 2.0);
        assert!((frechet_from_moments(&ma, &ca, &mb, &cb) - want).abs() < 1e-12);
    }

    #[test]
    fn mm_dist_examples() {
        let a = random(10, 3, 8);
        assert_eq!(mm_dist(&a, &a).unwrap(), 0.0);
        let m = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let c = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(mm_dist(&m, &c).unwrap(), 5.0);
        assert!(matches!(
            mm_dist(&a, &m),
            Err(MetricsError::CountMismatch(..))
        ));
    }

    #[test]
    fn diversity_examples() {
        let same = Tensor::full(&[600, 4], 1.5);
        assert_eq!(diversity(&same, 300, 0).unwrap(), 0.0);
        let a = random(600, 4, 9);
        assert_eq!(
            diversity(&a, 300, 3).unwrap(),
            diversity(&a, 300, 3).unwrap()
        );
        assert!(matches!(
            diversity(&a, 301, 0),
            Err(MetricsError::TooFewRows { .. })
        ));
        let clusters = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
        assert_eq!(pair_distance(&clusters, &[(0, 2), (1, 3)]).unwrap(), 5.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn r_precision_monotone_in_k(seed in any::<u64>()) {
            let (m, c) = (random(96, 3, seed), random(96, 3, seed ^ 1));
            let r = r_precision_at(&m, &c, 32, &[1, 2, 3, 5, 10, 32], seed).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn mm_dist_invariant_under_joint_permutation(seed in any::<u64>()) {
            let (m, c) = (random(20, 3, seed), random(20, 3, seed ^ 2));
            let mut order: Vec<usize> = (0..20).collect();
            RngStream::new(seed, 9).shuffle(&mut order);
            let pick = |x: &Tensor| Tensor::matrix(20, 3, order.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
            prop_assert!((mm_dist(&m, &c).unwrap() - mm_dist(&pick(&m), &pick(&c)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn frechet_nonnegative(seed in any::<u64>()) {
            let (a, b) = (random(40, 4, seed), random(50, 4, seed ^ 3));
            prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
        }
    }
}
