use serde::{Deserialize, Serialize};

use super::{RewardError, RewardModel};
use crate::numerics::{Tape, Tensor};
use crate::synthdata::Condition;

/// Which timestep token the motion encoder sees while scoring x_t.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepToken {
    /// The sampler's current t.
    #[default]
    Current,
    /// Always the clean-motion token t = 0.
    Clean,
}

pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64, RewardError> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RewardError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// R_φ(x, c) = cos(z_x, z_c).
pub fn reward_text(z_x: &Tensor, z_c: &Tensor) -> Result<f64, RewardError> {
    cosine(z_x, z_c)
}

/// R_m(x, c) = cos(z_x, z_anchor).
pub fn reward_motion(z_x: &Tensor, z_anchor: &Tensor) -> Result<f64, RewardError> {
    cosine(z_x, z_anchor)
}

fn unit(z: &Tensor) -> Result<Tensor, RewardError> {
    let n = z.norm();
    if n == 0.0 {
        return Err(RewardError::ZeroNorm);
    }
    Ok(z.scale(1.0 / n))
}

/// The dual-alignment reward μ R_φ + η R_m for one condition, with the
/// condition and anchor embeddings computed once up front.
#[derive(Debug, Clone)]
pub struct DualReward<'a> {
    model: &'a RewardModel,
    z_c: Tensor,
    z_anchor: Option<Tensor>,
    mu: f64,
    eta: f64,
    step_token: StepToken,
}

impl<'a> DualReward<'a> {
    pub fn new(
        model: &'a RewardModel,
        c: &Condition,
        z_anchor: Option<&Tensor>,
        mu: f64,
        eta: f64,
    ) -> Result<Self, RewardError> {
        if !mu.is_finite() || !eta.is_finite() {
            return Err(RewardError::InvalidWeights { mu, eta });
        }
        if eta != 0.0 && z_anchor.is_none() {
            return Err(RewardError::MissingAnchor);
        }
        let z_c = model.encode_condition(c)?.z;
        unit(&z_c)?;
        if let Some(a) = z_anchor {
            unit(a)?;
        }
        let z_anchor = z_anchor.cloned();
        Ok(Self {
            model,
            z_c,
            z_anchor,
            mu,
            eta,
            step_token: StepToken::Current,
        })
    }

    pub fn with_step_token(mut self, step_token: StepToken) -> Self {
        self.step_token = step_token;
        self
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// True when both weights are zero and the reward is identically 0.
    pub fn is_null(&self) -> bool {
        self.mu == 0.0 && self.eta == 0.0
    }

    fn token_t(&self, t: usize) -> usize {
        match self.step_token {
            StepToken::Current => t,
            StepToken::Clean => 0,
        }
    }

    /// (R_φ, R_m) at x_t; R_m is 0 when no anchor was supplied.
    pub fn components(&self, x_t: &Tensor, t: usize) -> Result<(f64, f64), RewardError> {
        let z = self.model.encode_motion(x_t, self.token_t(t))?.z;
        let r_phi = cosine(&z, &self.z_c)?;
        let r_m = match &self.z_anchor {
            Some(a) => cosine(&z, a)?,
            None => 0.0,
        };
        Ok((r_phi, r_m))
    }

    pub fn value(&self, x_t: &Tensor, t: usize) -> Result<f64, RewardError> {
        if self.is_null() {
            self.model.check_t(t)?;
            return Ok(0.0);
        }
        let (r_phi, r_m) = self.components(x_t, t)?;
        Ok(self.mu * r_phi + self.eta * r_m)
    }

    /// Reward and its gradient with respect to x_t only.
    pub fn value_and_grad(&self, x_t: &Tensor, t: usize) -> Result<(f64, Tensor), RewardError> {
        let flat = self.model.flat_motion(x_t)?;
        let tt = self.token_t(t);
        self.model.check_t(tt)?;
        if self.is_null() {
            return Ok((0.0, Tensor::zeros(x_t.shape())));
        }
        let tape = Tape::new();
        let p = self.model.params().bind(&tape, false);
        let x = tape.leaf(flat);
        let z = self.model.motion_latent(&tape, &p, x, &[tt]);
        if tape.value(z).norm() == 0.0 {
            return Err(RewardError::ZeroNorm);
        }
        let u = tape.normalize_rows(z);
        let d = self.model.config().d_z;
        let mut total = None;
        let mut add_term = |target: &Tensor, w: f64| -> Result<(), RewardError> {
            if w == 0.0 {
                return Ok(());
            }
            let c = tape.constant(unit(target)?.reshape(&[1, d])?);
            let term = tape.scale(tape.sum(tape.mul(u, c)), w);
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
            Ok(())
        };
        add_term(&self.z_c, self.mu)?;
        if let Some(a) = &self.z_anchor {
            add_term(a, self.eta)?;
        }
        let total = total.expect("at least one nonzero weight");
        let value = tape.value(total).item();
        let g = tape.grad(total, &[x])?.remove(0);
        Ok((value, g.reshape(x_t.shape())?))
    }
}

/// R(x_t, c) = μ R_φ(x_t, c) + η R_m(x_t, c).
pub fn reward_total(
    model: &RewardModel,
    x_t: &Tensor,
    t: usize,
    c: &Condition,
    z_anchor: Option<&Tensor>,
    mu: f64,
    eta: f64,
) -> Result<f64, RewardError> {
    DualReward::new(model, c, z_anchor, mu, eta)?.value(x_t, t)
}

/// ∇_{x_t} R(x_t, c), shaped like `x_t`.
pub fn reward_grad(
    model: &RewardModel,
    x_t: &Tensor,
    t: usize,
    c: &Condition,
    z_anchor: Option<&Tensor>,
    mu: f64,
    eta: f64,
) -> Result<Tensor, RewardError> {
    Ok(DualReward::new(model, c, z_anchor, mu, eta)?
        .value_and_grad(x_t, t)?
        .1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, RngStream};
    use crate::reward::RewardConfig;
    use crate::synthdata::{MotionClass, MotionParams};

    fn cond() -> Condition {
        Condition::new(
            MotionClass::ArcLeft,
            MotionParams {
                speed: 0.1,
                curvature: 1.0,
                amplitude: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(reward_text(&a, &a).unwrap(), 1.0);
        assert_eq!(
            reward_text(&a, &Tensor::vector(vec![0.0, 3.0])).unwrap(),
            0.0
        );
        assert_eq!(
            reward_text(&a, &Tensor::vector(vec![-1.0, 0.0])).unwrap(),
            -1.0
        );
        assert!(matches!(
            reward_motion(&a, &Tensor::zeros(&[2])),
            Err(RewardError::ZeroNorm)
        ));
        let z = Tensor::vector(vec![0.3, -0.7, 0.2]);
        let w = Tensor::vector(vec![0.5, 0.1, -0.9]);
        assert_eq!(
            reward_motion(&z.scale(2.0), &w).unwrap(),
            reward_motion(&z, &w).unwrap()
        );
    }

    #[test]
    fn weights_combine_exactly() {
        let m = RewardModel::new(RewardConfig::default(), 0);
        let x = RngStream::new(0, 0).gaussian(&[16, 2]);
        let c = cond();
        let anchor = RngStream::new(1, 0).gaussian(&[32]);
        let z = m.encode_motion(&x, 40).unwrap().z;
        let rphi = reward_text(&z, &m.encode_condition(&c).unwrap().z).unwrap();
        let rm = reward_motion(&z, &anchor).unwrap();
        assert_eq!(reward_total(&m, &x, 40, &c, None, 1.0, 0.0).unwrap(), rphi);
        assert_eq!(
            reward_total(&m, &x, 40, &c, Some(&anchor), 0.0, 0.0).unwrap(),
            0.0
        );
        let both = reward_total(&m, &x, 40, &c, Some(&anchor), 0.5, 0.5).unwrap();
        assert!((both - (0.5 * rphi + 0.5 * rm)).abs() < 1e-12);
        assert!(matches!(
            reward_total(&m, &x, 40, &c, None, 1.0, 0.2),
            Err(RewardError::MissingAnchor)
        ));
    }

    #[test]
    fn null_weights_give_zero_gradient() {
        let m = RewardModel::new(RewardConfig::default(), 0);
        let x = RngStream::new(2, 0).gaussian(&[16, 2]);
        let g = reward_grad(&m, &x, 10, &cond(), None, 0.0, 0.0).unwrap();
        assert_eq!(g, Tensor::zeros(&[16, 2]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = RewardModel::new(RewardConfig::default(), 5);
        let c = cond();
        let anchor = RngStream::new(9, 0).gaussian(&[32]);
        let r = DualReward::new(&m, &c, Some(&anchor), 0.7, 0.3).unwrap();
        let x = RngStream::new(3, 0).gaussian(&[16, 2]);
        let (_, g) = r.value_and_grad(&x, 250).unwrap();
        let fd = finite_diff_grad(|y: &Tensor| r.value(y, 250), &x, 1e-5).unwrap();
        assert!(relative_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn clean_step_token_ignores_t() {
        let m = RewardModel::new(RewardConfig::default(), 5);
        let c = cond();
        let x = RngStream::new(4, 0).gaussian(&[16, 2]);
        let r = DualReward::new(&m, &c, None, 1.0, 0.0)
            .unwrap()
            .with_step_token(StepToken::Clean);
        assert_eq!(r.value(&x, 700).unwrap(), r.value(&x, 0).unwrap());
    }
}
