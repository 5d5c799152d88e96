//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use reguide::diffusion::{
    train_denoiser, Denoiser, DenoiserConfig, DenoiserTrainConfig, NoiseSchedule, ScheduleConfig,
};
use reguide::guided_sampler::{
    batch_sample, sample, vanilla_sample, BatchOptions, GuidanceConfig, GuidanceMode, SampleResult,
    StepSchedule,
};
use reguide::metrics::{
    condition_features, evaluate, frechet_distance, motion_features, r_precision, FeatureSet,
    FeatureSource, MetricsConfig, MetricsReport,
};
use reguide::numerics::{finite_diff_grad, relative_error, RngStream, Tensor};
use reguide::retrieval::{build_index, retrieval_eval, RetrievalIndex, RetrievalReport};
use reguide::reward::{
    reward_grad, train_reward_model, DualReward, RewardConfig, RewardModel, RewardTrainConfig,
};
use reguide::synthdata::{build_splits, sample_condition, Condition, MotionClass, Splits};
use reguide::verify_analytic::{
    run_analytic_check, AnalyticCheckConfig, GaussianSpec, QuadraticReward,
};

const DATA_SEED: u64 = 42;
const SAMPLE_SEED: u64 = 9;
const EVAL_CONDITIONS: usize = 200;
const OMEGA: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut o = f();
        let took = start.elapsed();
        if let Some(limit) = limit {
            if took > limit {
                o.pass = false;
                o.detail.push_str(&format!("; over time limit {limit:?}"));
            }
        }
        if !o.pass {
            self.failures += 1;
        }
        println!(
            "{} [{id}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
}

struct Bench {
    splits: Splits,
    sched: NoiseSchedule,
    denoiser: Denoiser,
    reward: RewardModel,
    index: RetrievalIndex,
    conds: Vec<Condition>,
    real: FeatureSet,
    cond_feats: Tensor,
    train_time: Duration,
}

struct Run {
    mean_reward: f64,
    report: MetricsReport,
}

impl Bench {
    fn build() -> Bench {
        let start = Instant::now();
        let splits = build_splits(800, 100, 320, 16, DATA_SEED).expect("splits");
        let sched = ScheduleConfig::default().build().expect("schedule");
        let (denoiser, _) = train_denoiser(
            &splits.train,
            DenoiserConfig::default(),
            DenoiserTrainConfig {
                seed: 1,
                ..DenoiserTrainConfig::default()
            },
        )
        .expect("denoiser training");
        let reward = train_reward(&splits, OMEGA);
        let index = build_index(&reward, &splits.train).expect("index");
        let conds = splits.test.conditions()[..EVAL_CONDITIONS].to_vec();
        let hash = reward.to_checkpoint().hash();
        let real_motions: Vec<_> = splits.test.pairs.iter().map(|p| &p.motion).collect();
        let real = FeatureSet::new(
            motion_features(&reward, &real_motions).expect("real features"),
            FeatureSource::Real,
            hash,
        )
        .expect("feature set");
        let cond_feats = condition_features(&reward, &conds).expect("condition features");
        Bench {
            splits,
            sched,
            denoiser,
            reward,
            index,
            conds,
            real,
            cond_feats,
            train_time: start.elapsed(),
        }
    }

    fn sample(&self, mu: f64, eta: f64, seed: u64) -> Vec<SampleResult> {
        let g = GuidanceConfig {
            mu,
            eta,
            mode: if mu == 0.0 && eta == 0.0 {
                GuidanceMode::Off
            } else {
                GuidanceMode::Unweighted
            },
            cfg_scale: 7.5,
            steps: StepSchedule::Strided(50),
            ..GuidanceConfig::default()
        };
        let opts = BatchOptions {
            seed,
            workers: rayon::current_num_threads(),
            ..BatchOptions::default()
        };
        let index = (eta != 0.0).then_some(&self.index);
        batch_sample(
            &self.conds,
            &self.denoiser,
            Some(&self.reward),
            index,
            &self.sched,
            &g,
            &opts,
        )
        .expect("sampling")
    }

    fn score(&self, out: &[SampleResult]) -> Run {
        let mean_reward = out
            .iter()
            .map(|o| {
                DualReward::new(&self.reward, &o.condition, None, 1.0, 0.0)
                    .and_then(|r| r.value(o.motion.frames(), 0))
                    .expect("reward")
            })
            .sum::<f64>()
            / out.len() as f64;
        let motions: Vec<_> = out.iter().map(|o| &o.motion).collect();
        let generated = FeatureSet::new(
            motion_features(&self.reward, &motions).expect("generated features"),
            FeatureSource::Generated,
            self.real.checkpoint_hash.clone(),
        )
        .expect("feature set");
        let report = evaluate(
            &self.real,
            &generated,
            &self.cond_feats,
            &MetricsConfig {
                diversity_pairs: 100,
                ..MetricsConfig::default()
            },
        )
        .expect("metrics");
        Run {
            mean_reward,
            report,
        }
    }
}

fn train_reward(splits: &Splits, omega: f64) -> RewardModel {
    train_reward_model(
        &splits.train,
        Some(&splits.val),
        RewardConfig::default(),
        RewardTrainConfig {
            seed: 2,
            omega,
            ..RewardTrainConfig::default()
        },
    )
    .expect("reward training")
    .0
}

fn random_condition(rng: &mut RngStream) -> Condition {
    let class = MotionClass::ALL[rng.uniform_int(0, MotionClass::ALL.len() - 1)];
    sample_condition(class, rng)
}

fn gradient_oracle(model: &RewardModel, sched: &NoiseSchedule) -> Outcome {
    let mut rng = RngStream::derived(1, "acceptance-grad", 0);
    let shape = [model.config().n_frames, model.config().dim];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = rng.gaussian(&shape);
        let t = rng.uniform_int(0, sched.steps());
        let c = random_condition(&mut rng);
        let anchor = rng.gaussian(&[model.config().d_z]);
        let (mu, eta) = (rng.uniform_range(0.2, 1.0), rng.uniform_range(0.0, 1.0));
        let g = reward_grad(model, &x, t, &c, Some(&anchor), mu, eta).expect("gradient");
        let r = DualReward::new(model, &c, Some(&anchor), mu, eta).expect("reward");
        let fd =
            finite_diff_grad(|y: &Tensor| r.value(y, t), &x, 1e-5).expect("finite differences");
        worst = worst.max(relative_error(&g, &fd));
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.3e} over 100 triples (< 1e-4)"),
    )
}

fn analytic_check(sched: &NoiseSchedule) -> Outcome {
    let spec = GaussianSpec::new(vec![0.0], vec![1.0]).expect("spec");
    let r = QuadraticReward::new(vec![2.0], 0.5).expect("reward");
    let cfg = AnalyticCheckConfig {
        samples: 10_000,
        mode: GuidanceMode::Theorem3,
        steps: StepSchedule::Full,
        seed: 0,
    };
    let report = run_analytic_check(&spec, &r, sched, &cfg).expect("analytic check");
    let c = &report.coordinates[0];
    outcome(
        report.passed(),
        format!(
            "oracle N({:.4}, {:.4}); empirical mean {:.5} (3 SE = {:.5}), var {:.5} (10% = {:.4}); exact chain N({:.5}, {:.5})",
            c.oracle_mean,
            c.oracle_var,
            c.empirical_mean,
            3.0 * c.mean_se,
            c.empirical_var,
            0.1 * c.oracle_var,
            c.chain_mean,
            c.chain_var
        ),
    )
}

fn reduction_identity(b: &Bench) -> Outcome {
    let shape = [b.splits.test.n_frames, 2];
    let mut mismatches = 0;
    let mut runs = 0;
    for steps in [StepSchedule::Full, StepSchedule::Strided(50)] {
        let plan = steps.plan(&b.sched).expect("plan");
        let gcfg = GuidanceConfig {
            mode: GuidanceMode::Off,
            cfg_scale: 7.5,
            steps: steps.clone(),
            ..GuidanceConfig::default()
        };
        for seed in 0..10u64 {
            let c = &b.conds[seed as usize];
            let guide = DualReward::new(&b.reward, c, None, 1.0, 0.0).expect("reward");
            let (x, _) = sample(
                &shape,
                Some(c),
                &b.denoiser,
                Some(&guide),
                &plan,
                &gcfg,
                &mut RngStream::new(seed, 0),
            )
            .expect("guided sampler");
            let v = vanilla_sample(
                &shape,
                Some(c),
                7.5,
                &b.denoiser,
                &plan,
                &mut RngStream::new(seed, 0),
            )
            .expect("vanilla sampler");
            let same = x.shape() == v.shape()
                && x.data()
                    .iter()
                    .zip(v.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits());
            mismatches += usize::from(!same);
            runs += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {runs} runs differ (full and 50-step plans, 10 seeds)"),
    )
}

fn guidance_improves(off: &Run, on: &Run, elapsed: Duration) -> Outcome {
    let gain = on.mean_reward - off.mean_reward;
    let fid_ratio = on.report.fid / off.report.fid;
    let pass =
        gain >= 0.05 && on.report.r_precision[0] > off.report.r_precision[0] && fid_ratio <= 1.10;
    outcome(
        pass,
        format!(
            "mean R {:.4} -> {:.4} (gain {gain:.4}, need >= 0.05); top-1 {:.4} -> {:.4}; FID {:.5} -> {:.5} (ratio {fid_ratio:.3}, need <= 1.10); {:.0}s incl. training",
            off.mean_reward,
            on.mean_reward,
            off.report.r_precision[0],
            on.report.r_precision[0],
            off.report.fid,
            on.report.fid,
            elapsed.as_secs_f64()
        ),
    )
}

fn step_awareness(b: &Bench, ablation: &RewardModel) -> (Outcome, [RetrievalReport; 2]) {
    let t = b.sched.steps() / 2;
    let ours = retrieval_eval(&b.reward, &b.splits.test, &b.sched, 32, 3, t).expect("retrieval");
    let abl = retrieval_eval(ablation, &b.splits.test, &b.sched, 32, 3, t).expect("retrieval");
    let (a, c) = (ours.r_at(1).expect("R@1").0, abl.r_at(1).expect("R@1").0);
    let o = outcome(
        a > c && ours.queries >= 320,
        format!(
            "R@1 at t={t}: omega=0.5 {a:.4} vs omega=1 {c:.4} over {} queries",
            ours.queries
        ),
    );
    (o, [ours, abl])
}

fn ablation_structure(base: &Run, t2m: &Run, dual: &Run) -> Outcome {
    let improves = t2m.report.r_precision[0] > base.report.r_precision[0]
        && t2m.mean_reward > base.mean_reward;
    let drop = t2m.report.r_precision[0] - dual.report.r_precision[0];
    outcome(
        improves && drop <= 0.02,
        format!(
            "top-1 baseline {:.4}, T2M {:.4}, T2M+M2M(eta=0.1) {:.4} (drop {drop:.4}, allowed 0.02)",
            base.report.r_precision[0], t2m.report.r_precision[0], dual.report.r_precision[0]
        ),
    )
}

fn metric_correctness() -> Outcome {
    let mut rng = RngStream::derived(7, "acceptance-metrics", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let a = rng.gaussian(&[400, 8]);
        let d: Vec<f64> = (0..8).map(|_| rng.normal() * 2.0).collect();
        let shifted = Tensor::new(
            vec![400, 8],
            a.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + d[i % 8])
                .collect(),
        )
        .expect("fixture");
        let want: f64 = d.iter().map(|v| v * v).sum();
        let got = frechet_distance(&a, &shifted).expect("frechet");
        worst = worst.max((got - want).abs());
    }
    let n = 10_016;
    let rp = r_precision(&rng.gaussian(&[n, 16]), &rng.gaussian(&[n, 16]), 32, 1, 11)
        .expect("r-precision");
    outcome(
        worst < 1e-6 && (rp - 1.0 / 32.0).abs() <= 0.01,
        format!("max |FID - |d|^2| {worst:.2e} (< 1e-6); chance top-1 {rp:.4} over {n} queries (1/32 +- 0.01)"),
    )
}

fn retrieval_determinism(b: &Bench, reports: &[RetrievalReport], runs: &[&Run]) -> Outcome {
    let mut all: Vec<Vec<f64>> = Vec::new();
    for r in reports {
        all.push(r.motion_to_text.clone());
        all.push(r.text_to_motion.clone());
    }
    let clean = retrieval_eval(&b.reward, &b.splits.test, &b.sched, 32, 3, 0).expect("retrieval");
    all.push(clean.motion_to_text.clone());
    all.push(clean.text_to_motion.clone());
    for run in runs {
        all.push(run.report.r_precision.to_vec());
    }
    let monotone = all.iter().all(|v| v.windows(2).all(|w| w[1] >= w[0]));
    let again = retrieval_eval(&b.reward, &b.splits.test, &b.sched, 32, 3, 0).expect("retrieval");
    let noisy_again = retrieval_eval(
        &b.reward,
        &b.splits.test,
        &b.sched,
        32,
        3,
        reports[0].noise_t,
    )
    .expect("retrieval");
    let repeat = again == clean && noisy_again == reports[0];
    outcome(
        monotone && repeat,
        format!(
            "{} R@k curves monotone: {monotone}; repeated seeded reports identical: {repeat}",
            all.len()
        ),
    )
}

fn reguide(out: &Path, args: &[String]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_reguide"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "11"])
        .args(args)
        .env_remove("REGUIDE_SEED")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

const STAGES: [&str; 7] = [
    "gen-data",
    "train-denoiser",
    "train-reward",
    "build-index",
    "sample",
    "eval-retrieval",
    "eval",
];

fn pipeline(out: &Path) -> bool {
    let f = |name: &str| out.join(name).to_string_lossy().into_owned();
    let stages: Vec<Vec<String>> = vec![
        vec![
            "gen-data".into(),
            "--train".into(),
            "96".into(),
            "--val".into(),
            "32".into(),
            "--test".into(),
            "64".into(),
        ],
        vec![
            "train-denoiser".into(),
            "--dataset".into(),
            f("train.rgds"),
            "--steps".into(),
            "100".into(),
        ],
        vec![
            "train-reward".into(),
            "--dataset".into(),
            f("train.rgds"),
            "--val".into(),
            f("val.rgds"),
            "--epochs".into(),
            "3".into(),
        ],
        vec![
            "build-index".into(),
            "--dataset".into(),
            f("train.rgds"),
            "--reward-ckpt".into(),
            f("reward.rgck"),
        ],
        vec![
            "sample".into(),
            "--denoiser-ckpt".into(),
            f("denoiser.rgck"),
            "--reward-ckpt".into(),
            f("reward.rgck"),
            "--index".into(),
            f("index.rgix"),
            "--dataset".into(),
            f("test.rgds"),
            "--eta".into(),
            "0.1".into(),
        ],
        vec![
            "eval-retrieval".into(),
            "--dataset".into(),
            f("test.rgds"),
            "--reward-ckpt".into(),
            f("reward.rgck"),
            "--noise-t".into(),
            "500".into(),
        ],
        vec![
            "eval".into(),
            "--real".into(),
            f("test.rgds"),
            "--generated".into(),
            f("."),
            "--reward-ckpt".into(),
            f("reward.rgck"),
            "--diversity-pairs".into(),
            "20".into(),
        ],
    ];
    stages.iter().all(|a| reguide(out, a))
}

fn pipeline_determinism() -> Outcome {
    let (a, b) = (
        tempfile::tempdir().expect("tempdir"),
        tempfile::tempdir().expect("tempdir"),
    );
    if !(pipeline(a.path()) && pipeline(b.path())) {
        return outcome(false, "a pipeline stage failed".into());
    }
    let differing: Vec<&str> = STAGES
        .iter()
        .copied()
        .filter(|s| {
            let name = format!("{s}.manifest.json");
            fs::read(a.path().join(&name)).ok() != fs::read(b.path().join(&name)).ok()
        })
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} manifests compared, differing: {differing:?}",
            STAGES.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    let sched = ScheduleConfig::default().build().expect("schedule");

    let bench_start = Instant::now();
    let bench = Bench::build();
    println!(
        "benchmark models trained in {:.1}s",
        bench.train_time.as_secs_f64()
    );

    suite.run(1, "gradient oracle", Some(Duration::from_secs(60)), || {
        gradient_oracle(&bench.reward, &sched)
    });
    suite.run(
        2,
        "analytic Gaussian check",
        Some(Duration::from_secs(300)),
        || analytic_check(&sched),
    );
    suite.run(3, "mode-off reduction identity", None, || {
        reduction_identity(&bench)
    });

    let sampling_start = Instant::now();
    let off = bench.score(&bench.sample(0.0, 0.0, SAMPLE_SEED));
    let on = bench.score(&bench.sample(1.0, 0.0, SAMPLE_SEED));
    let total = bench.train_time + sampling_start.elapsed();
    suite.run(
        4,
        "guidance improves alignment",
        Some(Duration::from_secs(900)),
        || guidance_improves(&off, &on, total),
    );

    let ablation = train_reward(&bench.splits, 1.0);
    let mut reports = None;
    suite.run(5, "step-awareness", None, || {
        let (o, r) = step_awareness(&bench, &ablation);
        reports = Some(r);
        o
    });

    let dual = bench.score(&bench.sample(1.0, 0.1, SAMPLE_SEED));
    suite.run(6, "ablation structure", None, || {
        ablation_structure(&off, &on, &dual)
    });
    suite.run(7, "metric correctness", None, metric_correctness);
    let reports = reports.expect("criterion 5 ran");
    suite.run(8, "retrieval monotonicity and determinism", None, || {
        retrieval_determinism(&bench, &reports, &[&off, &on, &dual])
    });
    suite.run(9, "pipeline determinism", None, pipeline_determinism);

    println!(
        "{} of 9 criteria failed; total {:.1}s",
        suite.failures,
        bench_start.elapsed().as_secs_f64()
    );
    if suite.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
