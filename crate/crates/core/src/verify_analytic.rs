//! Closed-form check of the guided sampler.
//!
//! With Gaussian data N(m, diag v) the optimal noise predictor is known
//! exactly, and a quadratic reward R(x) = -λ‖x - a‖² tilts it into another
//! Gaussian. Running the sampler with both in place of the learned networks
//! isolates the sampling arithmetic from any training error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    DiffusionError, NoisePredictor, NoiseSchedule, SamplingPlan, StepCoefficients,
};
use crate::guided_sampler::{
    sample, GuidanceConfig, GuidanceMode, RewardGuide, SamplerError, StepSchedule,
};
use crate::numerics::{RngStream, Tensor};
use crate::synthdata::Condition;

pub const MIN_SAMPLES: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("invalid Gaussian spec: {0}")]
    InvalidSpec(String),
    #[error("invalid quadratic reward: {0}")]
    InvalidReward(String),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Diagonal Gaussian N(mean, diag(var)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self, VerifyError> {
        if mean.is_empty() || mean.len() != var.len() {
            return Err(VerifyError::InvalidSpec(format!(
                "{} means for {} variances",
                mean.len(),
                var.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(VerifyError::InvalidSpec("non-finite mean".into()));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(VerifyError::InvalidSpec(format!(
                "variance {v} must be positive"
            )));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// E[x0 | x_t] coordinate `j` under the forward process at ᾱ.
    pub fn posterior_mean(&self, j: usize, x_t: f64, alpha_bar: f64) -> f64 {
        let (m, v) = (self.mean[j], self.var[j]);
        let s = alpha_bar.sqrt();
        m + s * v * (x_t - s * m) / (alpha_bar * v + 1.0 - alpha_bar)
    }
}

/// R(x) = -λ‖x - a‖².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticReward {
    pub target: Vec<f64>,
    pub lambda: f64,
}

impl QuadraticReward {
    pub fn new(target: Vec<f64>, lambda: f64) -> Result<Self, VerifyError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(VerifyError::InvalidReward(format!("lambda {lambda}")));
        }
        if target.is_empty() || target.iter().any(|a| !a.is_finite()) {
            return Err(VerifyError::InvalidReward(
                "target must be finite and nonempty".into(),
            ));
        }
        Ok(Self { target, lambda })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        -self.lambda
            * x.iter()
                .zip(&self.target)
                .map(|(x, a)| (x - a).powi(2))
                .sum::<f64>()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.target)
            .map(|(x, a)| -2.0 * self.lambda * (x - a))
            .collect()
    }
}

impl RewardGuide for QuadraticReward {
    fn value_and_grad(&self, x_t: &Tensor, _t: usize) -> Result<(f64, Tensor), SamplerError> {
        let g = Tensor::new(x_t.shape().to_vec(), self.grad(x_t.data()))?;
        Ok((self.value(x_t.data()), g))
    }
}

/// The exact ε prediction for Gaussian data.
pub fn analytic_epsilon(
    x_t: &Tensor,
    t: usize,
    spec: &GaussianSpec,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::NoStepBelowZero);
    }
    if x_t.len() != spec.dim() {
        return Err(DiffusionError::InputShape {
            expected: spec.dim(),
            got: x_t.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bar(t)?;
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = x_t
        .data()
        .iter()
        .enumerate()
        .map(|(j, &x)| (x - s * spec.posterior_mean(j, x, ab)) / r)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), eps)?)
}

/// [`analytic_epsilon`] as a noise predictor; the condition is ignored.
pub struct AnalyticDenoiser<'a> {
    pub spec: &'a GaussianSpec,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for AnalyticDenoiser<'_> {
    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        _cond: Option<&Condition>,
    ) -> Result<Tensor, DiffusionError> {
        analytic_epsilon(x_t, t, self.spec, self.sched)
    }
}

/// The normalized product p(x)·exp(R(x)).
pub fn product_oracle(
    spec: &GaussianSpec,
    r: &QuadraticReward,
) -> Result<GaussianSpec, VerifyError> {
    if r.target.len() != spec.dim() {
        return Err(VerifyError::InvalidReward(format!(
            "target has {} coordinates, spec has {}",
            r.target.len(),
            spec.dim()
        )));
    }
    let (mean, var) = spec
        .mean
        .iter()
        .zip(&spec.var)
        .zip(&r.target)
        .map(|((&m, &v), &a)| {
            let vp = 1.0 / (1.0 / v + 2.0 * r.lambda);
            (vp * (m / v + 2.0 * r.lambda * a), vp)
        })
        .unzip();
    Ok(GaussianSpec { mean, var })
}

/// Moments of x_0 propagated exactly through the discrete sampler.
///
/// Every term of the update is affine in x_t when the denoiser and reward
/// are the analytic ones, so mean and variance follow a scalar recursion
/// per coordinate. Clipping is assumed off.
pub fn chain_moments(
    spec: &GaussianSpec,
    r: &QuadraticReward,
    plan: &SamplingPlan,
    mode: GuidanceMode,
) -> GaussianSpec {
    let guided = mode != GuidanceMode::Off && r.lambda != 0.0;
    let (mean, var) = (0..spec.dim())
        .map(|j| {
            let (mut mu, mut var) = (0.0, 1.0);
            for step in plan.steps() {
                let (a, b, noise) = affine_step(spec, r, j, step, mode, guided);
                mu = a * mu + b;
                var = a * a * var + noise;
            }
            (mu, var)
        })
        .unzip();
    GaussianSpec { mean, var }
}

/// x_prev = a·x_t + b + noise, with noise of the returned variance.
fn affine_step(
    spec: &GaussianSpec,
    r: &QuadraticReward,
    j: usize,
    step: &StepCoefficients,
    mode: GuidanceMode,
    guided: bool,
) -> (f64, f64, f64) {
    let ab = step.alpha_bar;
    let (s, rt) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (m, v) = (spec.mean[j], spec.var[j]);
    let d = ab * v + 1.0 - ab;
    // posterior mean = m + s·v·(x - s·m)/d = pm_x·x + pm_0
    let pm_x = s * v / d;
    let pm_0 = m - s * v * s * m / d;
    let (eps_x, eps_0) = ((1.0 - s * pm_x) / rt, -s * pm_0 / rt);
    let k = step.beta / rt;
    let sa = step.alpha.sqrt();
    let mut a = (1.0 - k * eps_x) / sa;
    let mut b = -k * eps_0 / sa;
    if guided {
        let w = mode.weight(step);
        a -= w * 2.0 * r.lambda;
        b += w * 2.0 * r.lambda * r.target[j];
    }
    let noise = if step.t > 1 {
        step.beta / step.alpha
    } else {
        0.0
    };
    (a, b, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCheckConfig {
    pub samples: usize,
    pub mode: GuidanceMode,
    pub steps: StepSchedule,
    pub seed: u64,
}

impl Default for AnalyticCheckConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            mode: GuidanceMode::Theorem3,
            steps: StepSchedule::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateReport {
    pub oracle_mean: f64,
    pub oracle_var: f64,
    /// Exact moments of the discrete sampler under the analytic models.
    pub chain_mean: f64,
    pub chain_var: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    /// √(oracle_var / n).
    pub mean_se: f64,
    /// oracle_var · √(2 / (n - 1)).
    pub var_se: f64,
    pub mean_within_3se: bool,
    pub var_within_3se: bool,
    pub var_within_10pct: bool,
    /// Empirical moments within 4 standard errors of the chain moments.
    pub matches_chain: bool,
}

impl CoordinateReport {
    pub fn passed(&self) -> bool {
        self.mean_within_3se && self.var_within_10pct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReport {
    pub spec: GaussianSpec,
    pub reward: QuadraticReward,
    pub config: AnalyticCheckConfig,
    pub step_count: usize,
    pub coordinates: Vec<CoordinateReport>,
}

impl AnalyticReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(CoordinateReport::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "analytic check: mode={} lambda={} samples={} steps={} seed={}\n",
            self.config.mode,
            self.reward.lambda,
            self.config.samples,
            self.step_count,
            self.config.seed
        );
        for (j, c) in self.coordinates.iter().enumerate() {
            s += &format!(
                "  coord {j}: mean {:.5} (oracle {:.5}, chain {:.5}, 3se {:.5}) {}\n",
                c.empirical_mean,
                c.oracle_mean,
                c.chain_mean,
                3.0 * c.mean_se,
                verdict(c.mean_within_3se)
            );
            s += &format!(
                "  coord {j}: var  {:.5} (oracle {:.5}, chain {:.5}, rel err {:.3}) {}\n",
                c.empirical_var,
                c.oracle_var,
                c.chain_var,
                (c.empirical_var / c.oracle_var - 1.0).abs(),
                verdict(c.var_within_10pct)
            );
        }
        s += &format!("result: {}\n", verdict(self.passed()));
        s
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Draws guided samples and compares their moments with the product oracle.
pub fn run_analytic_check(
    spec: &GaussianSpec,
    r: &QuadraticReward,
    sched: &NoiseSchedule,
    cfg: &AnalyticCheckConfig,
) -> Result<AnalyticReport, VerifyError> {
    if cfg.samples < MIN_SAMPLES {
        return Err(VerifyError::TooFewSamples {
            got: cfg.samples,
            min: MIN_SAMPLES,
        });
    }
    let oracle = product_oracle(spec, r)?;
    let plan = cfg.steps.plan(sched)?;
    let chain = chain_moments(spec, r, &plan, cfg.mode);
    let gcfg = GuidanceConfig {
        mu: 1.0,
        eta: 0.0,
        cfg_scale: 1.0,
        steps: cfg.steps.clone(),
        mode: cfg.mode,
        clip: None,
        ..GuidanceConfig::default()
    };
    let denoiser = AnalyticDenoiser { spec, sched };
    let guide = (r.lambda != 0.0).then_some(r as &dyn RewardGuide);
    let d = spec.dim();
    let draws: Vec<Vec<f64>> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::derived(cfg.seed, "analytic", i as u64);
            sample(&[d], None, &denoiser, guide, &plan, &gcfg, &mut rng).map(|(x, _)| x.into_vec())
        })
        .collect::<Result<_, _>>()?;
    let n = cfg.samples as f64;
    let coordinates = (0..d)
        .map(|j| {
            let xs: Vec<f64> = draws.iter().map(|x| x[j]).collect();
            let (em, ev) = moments(&xs);
            let (om, ov) = (oracle.mean[j], oracle.var[j]);
            let (cm, cv) = (chain.mean[j], chain.var[j]);
            let mean_se = (ov / n).sqrt();
            let var_se = ov * (2.0 / (n - 1.0)).sqrt();
            CoordinateReport {
                oracle_mean: om,
                oracle_var: ov,
                chain_mean: cm,
                chain_var: cv,
                empirical_mean: em,
                empirical_var: ev,
                mean_se,
                var_se,
                mean_within_3se: (em - om).abs() <= 3.0 * mean_se,
                var_within_3se: (ev - ov).abs() <= 3.0 * var_se,
                var_within_10pct: (ev - ov).abs() <= 0.1 * ov,
                matches_chain: (em - cm).abs() <= 4.0 * (cv / n).sqrt()
                    && (ev - cv).abs() <= 4.0 * cv * (2.0 / (n - 1.0)).sqrt(),
            }
        })
        .collect();
    Ok(AnalyticReport {
        spec: spec.clone(),
        reward: r.clone(),
        config: cfg.clone(),
        step_count: plan.len(),
        coordinates,
    })
}

/// Sample mean and unbiased variance.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Self-normalized importance-weighted moments of draws from `spec`
/// reweighted by exp(R), coordinate by coordinate.
pub fn importance_moments(
    spec: &GaussianSpec,
    r: &QuadraticReward,
    n: usize,
    seed: u64,
) -> GaussianSpec {
    let mut rng = RngStream::derived(seed, "importance", 0);
    let (mean, var) = (0..spec.dim())
        .map(|j| {
            let (m, sd) = (spec.mean[j], spec.var[j].sqrt());
            let xs: Vec<f64> = (0..n).map(|_| m + sd * rng.normal()).collect();
            let logw: Vec<f64> = xs
                .iter()
                .map(|x| -r.lambda * (x - r.target[j]).powi(2))
                .collect();
            let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            let mu = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
            let var = xs
                .iter()
                .zip(&w)
                .map(|(x, w)| w * (x - mu).powi(2))
                .sum::<f64>()
                / z;
            (mu, var)
        })
        .unzip();
    GaussianSpec { mean, var }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, ScheduleConfig};

    fn sched() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn paper_case() -> (GaussianSpec, QuadraticReward) {
        (
            GaussianSpec::standard(1),
            QuadraticReward::new(vec![2.0], 0.5).unwrap(),
        )
    }

    #[test]
    fn standard_spec_gives_scaled_identity() {
        let s = sched();
        let spec = GaussianSpec::standard(3);
        for t in [1, 10, 500, 1000] {
            let x = Tensor::vector(vec![-1.3, 0.2, 2.5]);
            let eps = analytic_epsilon(&x, t, &spec, &s).unwrap();
            let k = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            for (e, x) in eps.data().iter().zip(x.data()) {
                assert!((e - k * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn epsilon_matches_monte_carlo_regression() {
        let s = sched();
        let spec = GaussianSpec::standard(1);
        let mut rng = RngStream::new(11, 0);
        for t in [50, 400, 900] {
            let (mut sxx, mut sxe) = (0.0, 0.0);
            for _ in 0..100_000 {
                let x0 = Tensor::vector(vec![rng.normal()]);
                let e = Tensor::vector(vec![rng.normal()]);
                let xt = forward_noise(&x0, t, &e, &s).unwrap().item();
                sxx += xt * xt;
                sxe += xt * e.item();
            }
            let slope = sxe / sxx;
            let exact = analytic_epsilon(&Tensor::vector(vec![1.0]), t, &spec, &s)
                .unwrap()
                .item();
            assert!(
                (slope - exact).abs() < 0.01,
                "t={t} slope {slope} exact {exact}"
            );
        }
    }

    #[test]
    fn zero_timestep_rejected() {
        let r = analytic_epsilon(
            &Tensor::vector(vec![0.0]),
            0,
            &GaussianSpec::standard(1),
            &sched(),
        );
        assert!(matches!(r, Err(DiffusionError::NoStepBelowZero)));
    }

    #[test]
    fn point_mass_limit() {
        let s = sched();
        let spec = GaussianSpec::new(vec![5.0], vec![1e-12]).unwrap();
        let t = 300;
        let ab = s.alpha_bar(t).unwrap();
        let x = 1.7;
        let eps = analytic_epsilon(&Tensor::vector(vec![x]), t, &spec, &s)
            .unwrap()
            .item();
        let want = (x - ab.sqrt() * 5.0) / (1.0 - ab).sqrt();
        assert!((eps - want).abs() < 1e-9);
    }

    #[test]
    fn oracle_examples() {
        let (spec, r) = paper_case();
        let o = product_oracle(&spec, &r).unwrap();
        assert!((o.mean[0] - 1.0).abs() < 1e-15 && (o.var[0] - 0.5).abs() < 1e-15);
        let none = product_oracle(&spec, &QuadraticReward::new(vec![2.0], 0.0).unwrap()).unwrap();
        assert_eq!(none, spec);
        let flat = GaussianSpec::new(vec![-3.0], vec![1e12]).unwrap();
        let o = product_oracle(&flat, &r).unwrap();
        assert!((o.mean[0] - 2.0).abs() < 1e-9 && (o.var[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn importance_weighting_reproduces_oracle() {
        let spec = GaussianSpec::new(vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
        let r = QuadraticReward::new(vec![2.0, -1.0], 0.5).unwrap();
        let o = product_oracle(&spec, &r).unwrap();
        let iw = importance_moments(&spec, &r, 200_000, 3);
        for j in 0..2 {
            assert!((iw.mean[j] - o.mean[j]).abs() < 0.01, "{iw:?} vs {o:?}");
            assert!((iw.var[j] / o.var[j] - 1.0).abs() < 0.02, "{iw:?} vs {o:?}");
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let r = QuadraticReward::new(vec![2.0, -1.0], 0.7).unwrap();
        let x = [0.3, 0.4];
        let g = r.grad(&x);
        for j in 0..2 {
            let mut p = x;
            let mut m = x;
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (r.value(&p) - r.value(&m)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn unguided_chain_recovers_data_distribution() {
        let spec = GaussianSpec::new(vec![0.5, -1.0], vec![1.0, 0.25]).unwrap();
        let r = QuadraticReward::new(vec![0.0, 0.0], 0.0).unwrap();
        let c = chain_moments(
            &spec,
            &r,
            &SamplingPlan::full(&sched()),
            GuidanceMode::Theorem3,
        );
        for j in 0..2 {
            assert!((c.mean[j] - spec.mean[j]).abs() < 1e-3, "{c:?}");
            assert!((c.var[j] / spec.var[j] - 1.0).abs() < 0.01, "{c:?}");
        }
    }

    #[test]
    fn chain_moments_match_independent_simulation() {
        let s = sched();
        let (spec, r) = paper_case();
        let plan = SamplingPlan::strided(&s, 50).unwrap();
        let c = chain_moments(&spec, &r, &plan, GuidanceMode::Unweighted);
        let mut rng = RngStream::new(5, 0);
        let (a, lam) = (2.0, 0.5);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| {
                let mut x = rng.normal();
                for st in plan.steps() {
                    let eps = (1.0 - st.alpha_bar).sqrt() * x;
                    let xbar = x - st.beta / (1.0 - st.alpha_bar).sqrt() * eps;
                    let z = if st.t > 1 { rng.normal() } else { 0.0 };
                    x = (xbar + st.beta.sqrt() * z) / st.alpha.sqrt() - 2.0 * lam * (x - a);
                }
                x
            })
            .collect();
        let (m, v) = moments(&xs);
        assert!(
            (m - c.mean[0]).abs() < 4.0 * (c.var[0] / 20_000.0).sqrt(),
            "{m} vs {c:?}"
        );
        assert!((v / c.var[0] - 1.0).abs() < 0.05, "{v} vs {c:?}");
    }

    #[test]
    fn unguided_check_passes() {
        let spec = GaussianSpec::standard(1);
        let r = QuadraticReward::new(vec![2.0], 0.0).unwrap();
        let rep = run_analytic_check(
            &spec,
            &r,
            &sched(),
            &AnalyticCheckConfig {
                samples: 2000,
                steps: StepSchedule::Strided(100),
                seed: 7,
                ..AnalyticCheckConfig::default()
            },
        )
        .unwrap();
        assert!(rep.passed(), "{}", rep.to_text());
        assert!(rep.coordinates[0].var_within_3se);
        assert!(rep.coordinates[0].matches_chain);
    }

    #[test]
    fn sampler_matches_chain_under_guidance() {
        let (spec, r) = paper_case();
        for mode in [GuidanceMode::Theorem3, GuidanceMode::Unweighted] {
            let rep = run_analytic_check(
                &spec,
                &r,
                &sched(),
                &AnalyticCheckConfig {
                    samples: 2000,
                    mode,
                    steps: StepSchedule::Strided(100),
                    seed: 1,
                },
            )
            .unwrap();
            assert!(rep.coordinates[0].matches_chain, "{}", rep.to_text());
        }
    }

    #[test]
    fn unweighted_pulls_further_toward_target() {
        let s = sched();
        let (spec, r) = paper_case();
        let plan = SamplingPlan::full(&s);
        let th = chain_moments(&spec, &r, &plan, GuidanceMode::Theorem3);
        let un = chain_moments(&spec, &r, &plan, GuidanceMode::Unweighted);
        assert!((un.mean[0] - 2.0).abs() < (th.mean[0] - 2.0).abs());
    }

    #[test]
    fn finer_plans_do_not_increase_mean_error() {
        let s = sched();
        let (spec, r) = paper_case();
        let oracle = product_oracle(&spec, &r).unwrap().mean[0];
        let err = |n| {
            let c = chain_moments(
                &spec,
                &r,
                &SamplingPlan::strided(&s, n).unwrap(),
                GuidanceMode::Theorem3,
            );
            (c.mean[0] - oracle).abs()
        };
        assert!(err(1000) <= err(50));
    }

    #[test]
    fn too_few_samples_rejected() {
        let (spec, r) = paper_case();
        let cfg = AnalyticCheckConfig {
            samples: 999,
            ..AnalyticCheckConfig::default()
        };
        assert!(matches!(
            run_analytic_check(&spec, &r, &sched(), &cfg),
            Err(VerifyError::TooFewSamples { .. })
        ));
    }
}
