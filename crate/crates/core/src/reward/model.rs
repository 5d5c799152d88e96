use serde::{Deserialize, Serialize};

use super::RewardError;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::{init_normal, sinusoidal_embedding, LayerNorm, Linear, ParamSet, TransformerBlock};
use crate::numerics::{RngStream, Tape, Tensor, Var};
use crate::synthdata::{Condition, MOTION_DIM, TOKENS_PER_CONDITION, VOCAB_SIZE};

pub const REWARD_COMPONENT: &str = "reward";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub n_frames: usize,
    pub dim: usize,
    /// Largest timestep T; the step-token table has T + 1 rows.
    pub max_t: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub d_z: usize,
    pub token_dim: usize,
    pub cond_hidden: usize,
    pub dec_hidden: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            n_frames: 16,
            dim: MOTION_DIM,
            max_t: 1000,
            d_model: 32,
            heads: 2,
            layers: 2,
            ff_dim: 64,
            d_z: 32,
            token_dim: 16,
            cond_hidden: 64,
            dec_hidden: 64,
        }
    }
}

impl RewardConfig {
    pub fn motion_len(&self) -> usize {
        self.n_frames * self.dim
    }

    /// Readout token, timestep token, then one token per frame.
    pub fn seq_len(&self) -> usize {
        self.n_frames + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Motion,
    Condition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding {
    pub modality: Modality,
    pub z: Tensor,
}

#[derive(Debug, Clone)]
struct Layout {
    frame_in: Linear,
    step_table: usize,
    readout: usize,
    pos: usize,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
    proj: Linear,
    cond_tokens: usize,
    cond_fc1: Linear,
    cond_fc2: Linear,
    dec_fc1: Linear,
    dec_fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    config: RewardConfig,
    params: ParamSet,
    layout: Layout,
}

impl RewardModel {
    pub fn new(config: RewardConfig, seed: u64) -> Self {
        let mut rng = RngStream::derived(seed, "reward-init", 0);
        let mut p = ParamSet::new();
        let d = config.d_model;
        let frame_in = Linear::new(&mut p, &mut rng, "frame_in", config.dim, d);
        let mut table = Vec::with_capacity((config.max_t + 1) * d);
        for t in 0..=config.max_t {
            table.extend(
                sinusoidal_embedding(t as f64, d)
                    .into_iter()
                    .map(|v| 0.5 * v),
            );
        }
        let step_table = p.push(
            "step_table",
            Tensor::matrix(config.max_t + 1, d, table).expect("table shape"),
        );
        let readout = p.push("readout", init_normal(&mut rng, &[1, d], 0.02));
        let pos = p.push("pos", init_normal(&mut rng, &[config.seq_len(), d], 0.02));
        let blocks = (0..config.layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut p,
                    &mut rng,
                    &format!("enc{i}"),
                    d,
                    config.ff_dim,
                    config.heads,
                )
            })
            .collect();
        let ln_out = LayerNorm::new(&mut p, "ln_out", d);
        let proj = Linear::new(&mut p, &mut rng, "proj", d, config.d_z);
        let cond_tokens = p.push(
            "cond_tokens",
            init_normal(&mut rng, &[VOCAB_SIZE, config.token_dim], 0.1),
        );
        let cond_fc1 = Linear::new(
            &mut p,
            &mut rng,
            "cond_fc1",
            TOKENS_PER_CONDITION * config.token_dim,
            config.cond_hidden,
        );
        let cond_fc2 = Linear::new(&mut p, &mut rng, "cond_fc2", config.cond_hidden, config.d_z);
        let dec_fc1 = Linear::new(&mut p, &mut rng, "dec_fc1", config.d_z, config.dec_hidden);
        let dec_fc2 = Linear::new(
            &mut p,
            &mut rng,
            "dec_fc2",
            config.dec_hidden,
            config.motion_len(),
        );
        Self {
            config,
            params: p,
            layout: Layout {
                frame_in,
                step_table,
                readout,
                pos,
                blocks,
                ln_out,
                proj,
                cond_tokens,
                cond_fc1,
                cond_fc2,
                dec_fc1,
                dec_fc2,
            },
        }
    }

    pub fn config(&self) -> &RewardConfig {
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

    pub(crate) fn check_t(&self, t: usize) -> Result<(), RewardError> {
        if t > self.config.max_t {
            return Err(RewardError::TimestepOutOfRange {
                t,
                max: self.config.max_t,
            });
        }
        Ok(())
    }

    pub(crate) fn flat_motion(&self, x: &Tensor) -> Result<Tensor, RewardError> {
        let f = self.config.motion_len();
        if x.len() != f {
            return Err(RewardError::MotionShape {
                expected: f,
                got: x.shape().to_vec(),
            });
        }
        Ok(x.reshape(&[1, f])?)
    }

    /// `x` is `[batch, frames * dim]`; returns z_x as `[batch, d_z]`.
    pub(crate) fn motion_latent(&self, tape: &Tape, p: &[Var], x: Var, ts: &[usize]) -> Var {
        let b = ts.len();
        let (n, l) = (self.config.n_frames, self.config.seq_len());
        let lay = &self.layout;
        let frames = tape.reshape(x, &[b * n, self.config.dim]);
        let frames = lay.frame_in.forward(tape, p, frames);
        let readout = tape.gather_rows(p[lay.readout], &vec![0; b]);
        let steps = tape.gather_rows(p[lay.step_table], ts);
        let all = tape.concat_rows(&[readout, steps, frames]);
        let mut order = Vec::with_capacity(b * l);
        for i in 0..b {
            order.push(i);
            order.push(b + i);
            order.extend((0..n).map(|k| 2 * b + i * n + k));
        }
        let seq = tape.gather_rows(all, &order);
        let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let mut h = tape.add(seq, tape.gather_rows(p[lay.pos], &pos_rows));
        for blk in &lay.blocks {
            h = blk.forward(tape, p, h, b, l);
        }
        let heads: Vec<usize> = (0..b).map(|i| i * l).collect();
        let out = tape.gather_rows(h, &heads);
        lay.proj.forward(tape, p, lay.ln_out.forward(tape, p, out))
    }

    /// Returns z_c as `[batch, d_z]`.
    pub(crate) fn condition_latent(
        &self,
        tape: &Tape,
        p: &[Var],
        tokens: &[[u32; TOKENS_PER_CONDITION]],
    ) -> Var {
        let lay = &self.layout;
        let rows: Vec<usize> = tokens
            .iter()
            .flat_map(|t| t.iter().map(|&v| v as usize))
            .collect();
        let e = tape.gather_rows(p[lay.cond_tokens], &rows);
        let e = tape.reshape(
            e,
            &[tokens.len(), TOKENS_PER_CONDITION * self.config.token_dim],
        );
        let h = tape.silu(lay.cond_fc1.forward(tape, p, e));
        lay.cond_fc2.forward(tape, p, h)
    }

    /// Reconstructs flat motions `[batch, frames * dim]` from latents.
    pub(crate) fn decode(&self, tape: &Tape, p: &[Var], z: Var) -> Var {
        let h = tape.silu(self.layout.dec_fc1.forward(tape, p, z));
        self.layout.dec_fc2.forward(tape, p, h)
    }

    pub(crate) fn check_tokens(tokens: &[u32; TOKENS_PER_CONDITION]) -> Result<(), RewardError> {
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(RewardError::UnknownToken {
                token,
                vocab: VOCAB_SIZE,
            });
        }
        Ok(())
    }

    pub fn encode_motion(&self, x_t: &Tensor, t: usize) -> Result<LatentEmbedding, RewardError> {
        let z = self.encode_motions(&self.flat_motion(x_t)?, &[t])?;
        Ok(LatentEmbedding {
            modality: Modality::Motion,
            z: Tensor::vector(z.row(0).to_vec()),
        })
    }

    /// Batched motion encoding: `x` is `[batch, frames * dim]`, result `[batch, d_z]`.
    pub fn encode_motions(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor, RewardError> {
        let f = self.config.motion_len();
        if x.shape().len() != 2 || x.cols() != f || x.rows() != ts.len() || ts.is_empty() {
            return Err(RewardError::MotionShape {
                expected: f,
                got: x.shape().to_vec(),
            });
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        Ok(tape.value(self.motion_latent(&tape, &p, xv, ts)))
    }

    pub fn encode_tokens(
        &self,
        tokens: &[u32; TOKENS_PER_CONDITION],
    ) -> Result<LatentEmbedding, RewardError> {
        Self::check_tokens(tokens)?;
        let z = self.encode_token_batch(&[*tokens])?;
        Ok(LatentEmbedding {
            modality: Modality::Condition,
            z: Tensor::vector(z.row(0).to_vec()),
        })
    }

    pub fn encode_condition(&self, c: &Condition) -> Result<LatentEmbedding, RewardError> {
        self.encode_tokens(&c.tokens())
    }

    pub fn encode_conditions(&self, conds: &[Condition]) -> Result<Tensor, RewardError> {
        let tokens: Vec<_> = conds.iter().map(Condition::tokens).collect();
        self.encode_token_batch(&tokens)
    }

    fn encode_token_batch(
        &self,
        tokens: &[[u32; TOKENS_PER_CONDITION]],
    ) -> Result<Tensor, RewardError> {
        if tokens.is_empty() {
            return Err(RewardError::EmptyBatch);
        }
        for t in tokens {
            Self::check_tokens(t)?;
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(tape.value(self.condition_latent(&tape, &p, tokens)))
    }

    /// Decoder output for a latent, shaped `[frames, dim]`.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor, RewardError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let zv = tape.constant(z.reshape(&[1, self.config.d_z])?);
        let out = tape.value(self.decode(&tape, &p, zv));
        Ok(out.reshape(&[self.config.n_frames, self.config.dim])?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(REWARD_COMPONENT, &self.config, self.params.flatten())
            .expect("config serializes")
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RewardError> {
        ck.expect_component(REWARD_COMPONENT)?;
        let config: RewardConfig = ck.hyperparams_as()?;
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
