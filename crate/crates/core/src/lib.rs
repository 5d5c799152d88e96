//! Reward-guided diffusion sampling over synthetic trajectories.
//!
//! A DDPM denoiser generates short 2-D point trajectories conditioned on a
//! symbolic motion description. At sampling time the reverse process is
//! steered by the gradient of a step-aware reward model that scores how well
//! a (possibly noisy) trajectory matches its condition and a retrieved
//! reference motion.

pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod diffusion;
pub mod guided_sampler;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod retrieval;
pub mod reward;
pub mod synthdata;
pub mod verify_analytic;
