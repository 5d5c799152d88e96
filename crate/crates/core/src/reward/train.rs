use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::losses::{contrastive_on_tape, negative_mask, representation_on_tape};
use super::{RewardConfig, RewardError, RewardModel};
use crate::diffusion::{forward_noise, NoiseSchedule, ScheduleConfig};
use crate::numerics::{AdamW, AdamWConfig, RngStream, Tape, Tensor};
use crate::synthdata::{Condition, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    /// Probability that a training sample stays clean (t = 0).
    pub omega: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub neg_threshold: f64,
    pub tau: f64,
    pub weight_contrastive: f64,
    pub weight_representation: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            t_min: 1,
            t_max: 1000,
            neg_threshold: 0.9,
            tau: 0.1,
            weight_contrastive: 1.0,
            weight_representation: 1.0,
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
            schedule: ScheduleConfig::default(),
            seed: 0,
        }
    }
}

impl RewardTrainConfig {
    fn validate(&self, model: &RewardConfig) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::InvalidTrainConfig(m));
        if !(0.0..=1.0).contains(&self.omega) {
            return bad(format!("omega {} outside [0, 1]", self.omega));
        }
        if !(0.0..=1.0).contains(&self.neg_threshold) {
            return bad(format!(
                "negative-filter threshold {} outside [0, 1]",
                self.neg_threshold
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        if self.t_min > self.t_max || self.t_max > model.max_t {
            return bad(format!(
                "need 0 <= t_min <= t_max <= {}, got {}..{}",
                model.max_t, self.t_min, self.t_max
            ));
        }
        if self.schedule.steps != model.max_t {
            return bad(format!(
                "schedule has {} steps but the step-token table covers {}",
                self.schedule.steps, model.max_t
            ));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad(format!("batch {} lr {}", self.batch_size, self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_contrastive: Vec<f64>,
    pub epoch_representation: Vec<f64>,
    /// Clean-motion contrastive loss on the validation set; entry 0 is
    /// measured before training.
    pub val_contrastive: Vec<f64>,
    pub clean_samples: usize,
    pub noised_samples: usize,
    pub timesteps_seen: (usize, usize),
}

impl RewardTrainLog {
    pub fn clean_fraction(&self) -> f64 {
        let n = self.clean_samples + self.noised_samples;
        if n == 0 {
            0.0
        } else {
            self.clean_samples as f64 / n as f64
        }
    }
}

struct BatchLosses {
    total: f64,
    contrastive: f64,
    representation: f64,
}

/// Algorithm-1 training, advanced one epoch at a time.
pub struct RewardTrainer<'a> {
    train: &'a Dataset,
    val: &'a Dataset,
    cfg: RewardTrainConfig,
    sched: NoiseSchedule,
    model: RewardModel,
    opt: AdamW,
    rng: RngStream,
    epoch: usize,
    initial_loss: Option<f64>,
    log: RewardTrainLog,
}

impl<'a> RewardTrainer<'a> {
    pub fn new(
        train: &'a Dataset,
        val: Option<&'a Dataset>,
        config: RewardConfig,
        cfg: RewardTrainConfig,
    ) -> Result<Self, RewardError> {
        if train.is_empty() {
            return Err(RewardError::EmptyDataset);
        }
        cfg.validate(&config)?;
        if train.n_frames * train.dim() != config.motion_len() {
            return Err(RewardError::MotionShape {
                expected: config.motion_len(),
                got: vec![train.n_frames, train.dim()],
            });
        }
        let val = match val {
            Some(v) if !v.is_empty() => v,
            _ => train,
        };
        let model = RewardModel::new(config, cfg.seed);
        let opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                clip_norm: cfg.clip_norm,
                ..AdamWConfig::default()
            },
            model.params().tensors(),
        );
        let mut trainer = Self {
            train,
            val,
            cfg,
            sched: cfg.schedule.build()?,
            model,
            opt,
            rng: RngStream::derived(cfg.seed, "reward-train", 0),
            epoch: 0,
            initial_loss: None,
            log: RewardTrainLog {
                timesteps_seen: (usize::MAX, 0),
                ..RewardTrainLog::default()
            },
        };
        let v0 = trainer.validation_contrastive()?;
        trainer.log.val_contrastive.push(v0);
        Ok(trainer)
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn log(&self) -> &RewardTrainLog {
        &self.log
    }

    /// Mean filtered InfoNCE over consecutive validation batches of clean motions.
    pub fn validation_contrastive(&self) -> Result<f64, RewardError> {
        let n = self.val.len();
        let bs = self.cfg.batch_size.min(n);
        let f = self.model.config().motion_len();
        let mut total = 0.0;
        let mut batches = 0;
        for start in (0..n).step_by(bs) {
            if start + bs > n {
                break;
            }
            let pairs = &self.val.pairs[start..start + bs];
            let mut flat = Vec::with_capacity(bs * f);
            for p in pairs {
                flat.extend_from_slice(p.motion.frames().data());
            }
            let x = Tensor::matrix(bs, f, flat)?;
            let conds: Vec<Condition> = pairs.iter().map(|p| p.condition).collect();
            let zx = self.model.encode_motions(&x, &vec![0; bs])?;
            let zc = self.model.encode_conditions(&conds)?;
            total += super::contrastive_loss(&zx, &zc, self.cfg.tau, self.cfg.neg_threshold)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    fn draw_t(&mut self) -> usize {
        if self.rng.uniform() < self.cfg.omega {
            0
        } else {
            self.rng.uniform_int(self.cfg.t_min, self.cfg.t_max)
        }
    }

    fn train_batch(&mut self, idx: &[usize]) -> Result<BatchLosses, RewardError> {
        let b = idx.len();
        let f = self.model.config().motion_len();
        let mut xt = Vec::with_capacity(b * f);
        let mut x0 = Vec::with_capacity(b * f);
        let mut ts = Vec::with_capacity(b);
        let mut tokens = Vec::with_capacity(b);
        for &i in idx {
            let pair = &self.train.pairs[i];
            let t = self.draw_t();
            let clean = pair.motion.frames().reshape(&[f])?;
            let noised = if t == 0 {
                clean.clone()
            } else {
                let eps = self.rng.gaussian(&[f]);
                forward_noise(&clean, t, &eps, &self.sched)?
            };
            if t == 0 {
                self.log.clean_samples += 1;
            } else {
                self.log.noised_samples += 1;
                let seen = &mut self.log.timesteps_seen;
                seen.0 = seen.0.min(t);
                seen.1 = seen.1.max(t);
            }
            xt.extend_from_slice(noised.data());
            x0.extend_from_slice(clean.data());
            ts.push(t);
            tokens.push(pair.condition.tokens());
        }
        let tape = Tape::new();
        let p = self.model.params().bind(&tape, true);
        let xv = tape.constant(Tensor::matrix(b, f, xt)?);
        let x0v = tape.constant(Tensor::matrix(b, f, x0)?);
        let zx = self.model.motion_latent(&tape, &p, xv, &ts);
        let zc = self.model.condition_latent(&tape, &p, &tokens);
        let mask = negative_mask(&tape.value(zc), self.cfg.neg_threshold);
        let lc = contrastive_on_tape(&tape, zx, zc, self.cfg.tau, &mask);
        let lr = representation_on_tape(&tape, &self.model, &p, zx, zc, x0v, b);
        let loss = tape.add(
            tape.scale(lc, self.cfg.weight_contrastive),
            tape.scale(lr, self.cfg.weight_representation),
        );
        let out = BatchLosses {
            total: tape.value(loss).item(),
            contrastive: tape.value(lc).item(),
            representation: tape.value(lr).item(),
        };
        let initial = *self.initial_loss.get_or_insert(out.total);
        if !out.total.is_finite() || out.total > 10.0 * initial {
            return Err(RewardError::Diverged {
                epoch: self.epoch + 1,
                loss: out.total,
                initial,
            });
        }
        let grads = tape.grad(loss, &p)?;
        self.opt
            .update(self.model.params_mut().tensors_mut(), &grads);
        Ok(out)
    }

    /// One shuffled pass over the training set; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64, RewardError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.rng.shuffle(&mut order);
        let frac = self.epoch as f64 / self.cfg.epochs.max(1) as f64;
        self.opt.set_lr(
            self.cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())),
        );
        let (mut tot, mut con, mut rep, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let l = self.train_batch(chunk)?;
            tot += l.total;
            con += l.contrastive;
            rep += l.representation;
            n += 1;
        }
        self.epoch += 1;
        let nf = n as f64;
        self.log.epoch_loss.push(tot / nf);
        self.log.epoch_contrastive.push(con / nf);
        self.log.epoch_representation.push(rep / nf);
        let v = self.validation_contrastive()?;
        self.log.val_contrastive.push(v);
        debug!(
            "reward epoch {} loss {:.4} (contrastive {:.4}, representation {:.4}) val {:.4}",
            self.epoch,
            tot / nf,
            con / nf,
            rep / nf,
            v
        );
        Ok(tot / nf)
    }

    pub fn finish(self) -> (RewardModel, RewardTrainLog) {
        info!(
            "reward model trained {} epochs, val contrastive {:.4} -> {:.4}, clean fraction {:.3}",
            self.epoch,
            self.log.val_contrastive[0],
            self.log.val_contrastive.last().copied().unwrap_or(f64::NAN),
            self.log.clean_fraction()
        );
        (self.model, self.log)
    }
}

pub fn train_reward_model(
    train: &Dataset,
    val: Option<&Dataset>,
    config: RewardConfig,
    cfg: RewardTrainConfig,
) -> Result<(RewardModel, RewardTrainLog), RewardError> {
    let mut trainer = RewardTrainer::new(train, val, config, cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}
