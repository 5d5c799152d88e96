//! Parameter storage and the handful of layers the models are built from.

use crate::numerics::{RngStream, Tape, Tensor, Var};

/// Ordered, named parameter tensors.
///
/// The order is fixed by the model constructor, which makes the flat
/// serialization in checkpoints a plain concatenation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Replaces every tensor's values from a flat buffer laid out like
    /// [`ParamSet::flatten`]. Returns `false` if the length is wrong.
    pub fn load_flat(&mut self, flat: &[f64]) -> bool {
        if flat.len() != self.count() {
            return false;
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            *t = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())
                .expect("shape preserved");
            offset += n;
        }
        true
    }

    /// Records every parameter on `tape`; `trainable` selects leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

pub(crate) fn init_normal(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    rng.gaussian(shape).scale(std)
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut RngStream,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = params.push(
            format!("{name}.w"),
            init_normal(rng, &[fan_in, fan_out], std),
        );
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    /// Same as [`Linear::new`] but with weights scaled down, for residual
    /// branches that should start close to the identity.
    pub fn new_scaled(
        params: &mut ParamSet,
        rng: &mut RngStream,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let std = gain * (1.0 / fan_in as f64).sqrt();
        let w = params.push(
            format!("{name}.w"),
            init_normal(rng, &[fan_in, fan_out], std),
        );
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Var {
        let h = tape.matmul(x, p[self.w]);
        tape.add_row(h, p[self.b])
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = params.push(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Var {
        let n = tape.layer_norm(x, 1e-5);
        let g = tape.mul_row(n, p[self.gain]);
        tape.add_row(g, p[self.bias])
    }
}

/// Pre-norm transformer block: self-attention then a SiLU feed-forward,
/// each wrapped in a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut RngStream,
        name: &str,
        dim: usize,
        ff_dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "model width must split evenly across heads");
        Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), dim),
            q: Linear::new(params, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(params, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(params, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new_scaled(params, rng, &format!("{name}.o"), dim, dim, 0.5),
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), dim),
            ff_in: Linear::new(params, rng, &format!("{name}.ff_in"), dim, ff_dim),
            ff_out: Linear::new_scaled(params, rng, &format!("{name}.ff_out"), ff_dim, dim, 0.5),
            heads,
        }
    }

    /// `x` is `[batch * seq, dim]`.
    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var, batch: usize, seq: usize) -> Var {
        let h = self.ln_attn.forward(tape, p, x);
        let q = self.q.forward(tape, p, h);
        let k = self.k.forward(tape, p, h);
        let v = self.v.forward(tape, p, h);
        let a = tape.attention(q, k, v, batch, seq, self.heads);
        let a = self.o.forward(tape, p, a);
        let x = tape.add(x, a);
        let h = self.ln_ff.forward(tape, p, x);
        let h = self.ff_in.forward(tape, p, h);
        let h = tape.silu(h);
        let h = self.ff_out.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Sinusoidal features of a scalar timestep, `dim` must be even.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).cos());
    }
    out
}
