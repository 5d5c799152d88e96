use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{forward_noise, Denoiser, DenoiserConfig, DiffusionError, NoiseSchedule};
use crate::numerics::{AdamW, AdamWConfig, RngStream, Tape, Tensor};
use crate::synthdata::{Condition, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_uncond: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-4,
            p_uncond: 0.1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainLog {
    /// Mean batch MSE over each pass through the training set.
    pub epoch_mse: Vec<f64>,
    /// MSE on a fixed probe batch before the first and after the last update.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub steps: usize,
}

struct Probe {
    x: Tensor,
    ts: Vec<usize>,
    eps: Tensor,
    conds: Vec<Option<Condition>>,
}

/// Incremental noise-prediction training, so callers can inspect the model
/// between chunks of steps.
pub struct DenoiserTrainer<'a> {
    data: &'a Dataset,
    sched: NoiseSchedule,
    cfg: DenoiserTrainConfig,
    model: Denoiser,
    opt: AdamW,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    epoch_sum: f64,
    epoch_batches: usize,
    last_finite: f64,
    probe: Probe,
    log: DenoiserTrainLog,
}

impl<'a> DenoiserTrainer<'a> {
    pub fn new(
        data: &'a Dataset,
        config: DenoiserConfig,
        cfg: DenoiserTrainConfig,
    ) -> Result<Self, DiffusionError> {
        if data.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.p_uncond) || !(cfg.lr > 0.0) {
            return Err(DiffusionError::InvalidTrainConfig(format!(
                "batch {} p_uncond {} lr {}",
                cfg.batch_size, cfg.p_uncond, cfg.lr
            )));
        }
        if data.n_frames * data.dim() != config.motion_len() {
            return Err(DiffusionError::InputShape {
                expected: config.motion_len(),
                got: vec![data.n_frames, data.dim()],
            });
        }
        let sched = config.schedule.build()?;
        let model = Denoiser::new(config, cfg.seed);
        let opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                clip_norm: cfg.clip_norm,
                ..AdamWConfig::default()
            },
            model.params().tensors(),
        );
        let mut probe_rng = RngStream::derived(cfg.seed, "denoiser-probe", 0);
        let n_probe = data.len().clamp(64, 256);
        let idx: Vec<usize> = (0..n_probe).map(|i| i % data.len()).collect();
        let (x, ts, eps, conds) = draw_batch(data, &sched, &idx, cfg.p_uncond, &mut probe_rng)?;
        let probe = Probe { x, ts, eps, conds };
        let mut trainer = Self {
            data,
            sched,
            cfg,
            model,
            opt,
            rng: RngStream::derived(cfg.seed, "denoiser-train", 0),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            epoch_sum: 0.0,
            epoch_batches: 0,
            last_finite: f64::NAN,
            probe,
            log: DenoiserTrainLog {
                epoch_mse: Vec::new(),
                initial_mse: 0.0,
                final_mse: 0.0,
                steps: 0,
            },
        };
        trainer.log.initial_mse = trainer.probe_mse()?;
        Ok(trainer)
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// MSE on the fixed probe batch under the current weights.
    pub fn probe_mse(&self) -> Result<f64, DiffusionError> {
        let conds: Vec<Option<&Condition>> = self.probe.conds.iter().map(Option::as_ref).collect();
        let pred = self
            .model
            .predict_batch(&self.probe.x, &self.probe.ts, &conds)?;
        Ok(mse(&pred, &self.probe.eps))
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.finish_epoch();
                self.order = (0..self.data.len()).collect();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn finish_epoch(&mut self) {
        if self.epoch_batches > 0 {
            let mean = self.epoch_sum / self.epoch_batches as f64;
            debug!(
                "denoiser epoch {} mse {mean:.5}",
                self.log.epoch_mse.len() + 1
            );
            self.log.epoch_mse.push(mean);
            self.epoch_sum = 0.0;
            self.epoch_batches = 0;
        }
    }

    /// Cosine decay from `lr` to a tenth of it over the configured steps.
    fn lr_at(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.cfg.steps.max(1) as f64).min(1.0);
        self.cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }

    /// One optimizer update; returns the batch MSE.
    pub fn step(&mut self) -> Result<f64, DiffusionError> {
        let idx = self.next_indices();
        let (x, ts, eps, conds) = draw_batch(
            self.data,
            &self.sched,
            &idx,
            self.cfg.p_uncond,
            &mut self.rng,
        )?;
        let cond_refs: Vec<Option<&Condition>> = conds.iter().map(Option::as_ref).collect();
        let tape = Tape::new();
        let p = self.model.params().bind(&tape, true);
        let xv = tape.constant(x);
        let pred = self.model.forward(&tape, &p, xv, &ts, &cond_refs);
        let diff = tape.sub(pred, tape.constant(eps));
        let loss = tape.mean(tape.mul(diff, diff));
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(DiffusionError::NonFiniteLoss {
                step: self.step,
                loss: value,
                last_finite: self.last_finite,
            });
        }
        let grads = tape.grad(loss, &p)?;
        self.opt.set_lr(self.lr_at(self.step));
        self.opt
            .update(self.model.params_mut().tensors_mut(), &grads);
        self.step += 1;
        self.last_finite = value;
        self.epoch_sum += value;
        self.epoch_batches += 1;
        Ok(value)
    }

    pub fn run(&mut self, steps: usize) -> Result<(), DiffusionError> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(Denoiser, DenoiserTrainLog), DiffusionError> {
        self.finish_epoch();
        self.log.final_mse = self.probe_mse()?;
        self.log.steps = self.step;
        info!(
            "denoiser trained {} steps, probe mse {:.5} -> {:.5}",
            self.step, self.log.initial_mse, self.log.final_mse
        );
        Ok((self.model, self.log))
    }
}

type Batch = (Tensor, Vec<usize>, Tensor, Vec<Option<Condition>>);

fn draw_batch(
    data: &Dataset,
    sched: &NoiseSchedule,
    idx: &[usize],
    p_uncond: f64,
    rng: &mut RngStream,
) -> Result<Batch, DiffusionError> {
    let f = data.n_frames * data.dim();
    let mut xs = Vec::with_capacity(idx.len() * f);
    let mut eps_all = Vec::with_capacity(idx.len() * f);
    let mut ts = Vec::with_capacity(idx.len());
    let mut conds = Vec::with_capacity(idx.len());
    for &i in idx {
        let pair = &data.pairs[i];
        let t = rng.uniform_int(1, sched.steps());
        let eps = rng.gaussian(&[f]);
        let x0 = pair.motion.frames().reshape(&[f])?;
        xs.extend_from_slice(forward_noise(&x0, t, &eps, sched)?.data());
        eps_all.extend_from_slice(eps.data());
        ts.push(t);
        conds.push(if rng.uniform() < p_uncond {
            None
        } else {
            Some(pair.condition)
        });
    }
    Ok((
        Tensor::matrix(idx.len(), f, xs)?,
        ts,
        Tensor::matrix(idx.len(), f, eps_all)?,
        conds,
    ))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Trains a fresh denoiser for `cfg.steps` updates.
pub fn train_denoiser(
    data: &Dataset,
    config: DenoiserConfig,
    cfg: DenoiserTrainConfig,
) -> Result<(Denoiser, DenoiserTrainLog), DiffusionError> {
    let mut trainer = DenoiserTrainer::new(data, config, cfg)?;
    trainer.run(cfg.steps)?;
    trainer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, DatasetSpec, Split};

    fn tiny(total: usize) -> Dataset {
        build_dataset(&DatasetSpec::with_total(total, 16), Split::Train, 5).unwrap()
    }

    fn quick(steps: usize) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            steps,
            batch_size: 16,
            ..DenoiserTrainConfig::default()
        }
    }

    #[test]
    fn single_pair_overfits() {
        let d = tiny(1);
        let (_, log) = train_denoiser(&d, DenoiserConfig::default(), quick(200)).unwrap();
        assert!(log.final_mse < log.initial_mse, "{log:?}");
    }

    #[test]
    fn deterministic_runs() {
        let d = tiny(16);
        let (a, la) = train_denoiser(&d, DenoiserConfig::default(), quick(30)).unwrap();
        let (b, lb) = train_denoiser(&d, DenoiserConfig::default(), quick(30)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params().flatten(), b.params().flatten());
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        let mut d = tiny(2);
        d.pairs.clear();
        assert!(matches!(
            DenoiserTrainer::new(&d, DenoiserConfig::default(), quick(1)),
            Err(DiffusionError::EmptyDataset)
        ));
        let d = tiny(2);
        let cfg = DenoiserConfig {
            n_frames: 8,
            ..DenoiserConfig::default()
        };
        assert!(DenoiserTrainer::new(&d, cfg, quick(1)).is_err());
    }

    #[test]
    fn epochs_are_logged() {
        let d = tiny(32);
        let (_, log) = train_denoiser(&d, DenoiserConfig::default(), quick(8)).unwrap();
        assert_eq!(log.epoch_mse.len(), 4);
        assert_eq!(log.steps, 8);
    }
}
