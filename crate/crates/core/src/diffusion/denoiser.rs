use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoisePredictor, ScheduleConfig};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::{init_normal, sinusoidal_embedding, LayerNorm, Linear, ParamSet};
use crate::numerics::{RngStream, Tape, Tensor, Var};
use crate::synthdata::{Condition, MOTION_DIM, TOKENS_PER_CONDITION, VOCAB_SIZE};

pub const DENOISER_COMPONENT: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_frames: usize,
    pub dim: usize,
    pub time_dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub schedule: ScheduleConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_frames: 16,
            dim: MOTION_DIM,
            time_dim: 32,
            token_dim: 16,
            hidden: 64,
            blocks: 2,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn motion_len(&self) -> usize {
        self.n_frames * self.dim
    }

    fn cond_dim(&self) -> usize {
        TOKENS_PER_CONDITION * self.token_dim
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln: LayerNorm,
    fc1: Linear,
    ctx: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    time: Linear,
    tokens: usize,
    input: Linear,
    ctx_in: Linear,
    blocks: Vec<Block>,
    out_ln: LayerNorm,
    out: Linear,
}

/// Residual MLP ε_θ(x_t, t, c).
///
/// The context vector is the SiLU-projected sinusoidal timestep features
/// concatenated with the condition's token embeddings. It enters the input
/// projection and every residual block. The null condition is a separate
/// set of token rows that starts at zero.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet,
    layout: Layout,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = RngStream::derived(seed, "denoiser-init", 0);
        let mut p = ParamSet::new();
        let h = config.hidden;
        let time = Linear::new(&mut p, &mut rng, "time", config.time_dim, h);
        let mut table = init_normal(
            &mut rng,
            &[VOCAB_SIZE + TOKENS_PER_CONDITION, config.token_dim],
            0.02,
        )
        .into_vec();
        table[VOCAB_SIZE * config.token_dim..].fill(0.0);
        let tokens = p.push(
            "tokens",
            Tensor::new(
                vec![VOCAB_SIZE + TOKENS_PER_CONDITION, config.token_dim],
                table,
            )
            .expect("table shape"),
        );
        let ctx_dim = h + config.cond_dim();
        let input = Linear::new(&mut p, &mut rng, "input", config.motion_len(), h);
        let ctx_in = Linear::new(&mut p, &mut rng, "ctx_in", ctx_dim, h);
        let blocks = (0..config.blocks)
            .map(|i| Block {
                ln: LayerNorm::new(&mut p, &format!("block{i}.ln"), h),
                fc1: Linear::new(&mut p, &mut rng, &format!("block{i}.fc1"), h, h),
                ctx: Linear::new(&mut p, &mut rng, &format!("block{i}.ctx"), ctx_dim, h),
                fc2: Linear::new_scaled(&mut p, &mut rng, &format!("block{i}.fc2"), h, h, 0.5),
            })
            .collect();
        let out_ln = LayerNorm::new(&mut p, "out_ln", h);
        let out = Linear::new_scaled(&mut p, &mut rng, "out", h, config.motion_len(), 0.5);
        Self {
            config,
            params: p,
            layout: Layout {
                time,
                tokens,
                input,
                ctx_in,
                blocks,
                out_ln,
                out,
            },
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn token_rows(conds: &[Option<&Condition>]) -> Vec<usize> {
        let mut rows = Vec::with_capacity(conds.len() * TOKENS_PER_CONDITION);
        for c in conds {
            match c {
                Some(c) => rows.extend(c.tokens().iter().map(|&t| t as usize)),
                None => rows.extend(VOCAB_SIZE..VOCAB_SIZE + TOKENS_PER_CONDITION),
            }
        }
        rows
    }

    /// `x` is `[batch, frames * dim]`; returns the predicted noise, same shape.
    pub fn forward(
        &self,
        tape: &Tape,
        p: &[Var],
        x: Var,
        ts: &[usize],
        conds: &[Option<&Condition>],
    ) -> Var {
        let b = ts.len();
        assert_eq!(conds.len(), b, "one condition slot per batch row");
        let l = &self.layout;
        let mut temb = Vec::with_capacity(b * self.config.time_dim);
        for &t in ts {
            temb.extend(sinusoidal_embedding(t as f64, self.config.time_dim));
        }
        let temb =
            tape.constant(Tensor::matrix(b, self.config.time_dim, temb).expect("time features"));
        let temb = tape.silu(l.time.forward(tape, p, temb));
        let cemb = tape.gather_rows(p[l.tokens], &Self::token_rows(conds));
        let cemb = tape.reshape(cemb, &[b, self.config.cond_dim()]);
        let ctx = tape.concat_cols(&[temb, cemb]);
        let mut h = tape.add(l.input.forward(tape, p, x), l.ctx_in.forward(tape, p, ctx));
        for blk in &l.blocks {
            let u = blk.fc1.forward(tape, p, blk.ln.forward(tape, p, h));
            let u = tape.silu(tape.add(u, blk.ctx.forward(tape, p, ctx)));
            h = tape.add(h, blk.fc2.forward(tape, p, u));
        }
        l.out.forward(tape, p, l.out_ln.forward(tape, p, h))
    }

    /// Batched prediction without gradient tracking.
    pub fn predict_batch(
        &self,
        x: &Tensor,
        ts: &[usize],
        conds: &[Option<&Condition>],
    ) -> Result<Tensor, DiffusionError> {
        let f = self.config.motion_len();
        if x.shape().len() != 2 || x.cols() != f || x.rows() != ts.len() {
            return Err(DiffusionError::InputShape {
                expected: f,
                got: x.shape().to_vec(),
            });
        }
        for &t in ts {
            if t > self.config.schedule.steps {
                return Err(DiffusionError::TimestepOutOfRange {
                    t,
                    max: self.config.schedule.steps,
                });
            }
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &p, xv, ts, conds);
        Ok(tape.value(out))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(DENOISER_COMPONENT, &self.config, self.params.flatten())
            .expect("config serializes")
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        ck.expect_component(DENOISER_COMPONENT)?;
        let config: DenoiserConfig = ck.hyperparams_as()?;
        let mut model = Self::new(config, 0);
        let expected = model.param_count();
        if !model.params.load_flat(&ck.weights) {
            return Err(CheckpointError::ParamCount {
                expected,
                found: ck.weights.len(),
            }
            .into());
        }
        Ok(model)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Condition>,
    ) -> Result<Tensor, DiffusionError> {
        let f = self.config.motion_len();
        if x_t.len() != f {
            return Err(DiffusionError::InputShape {
                expected: f,
                got: x_t.shape().to_vec(),
            });
        }
        let flat = x_t.reshape(&[1, f])?;
        let out = self.predict_batch(&flat, &[t], &[cond])?;
        Ok(out.reshape(x_t.shape())?)
    }
}
