//! Conditional diffusion prompt generation for a prompt-conditioned decision
//! transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f64` tensors, a reverse-mode tape, layer
//!   primitives, AdamW and the parameter checkpoint format.
//! * [`envs`]: point-mass meta-RL task families and scripted behaviour
//!   policies.
//! * [`datasets`]: offline collection, returns-to-go, `[-1, 1]`
//!   normalisation, prompt/history sampling and the line-delimited dataset
//!   file format.
//! * [`prompt_dt`]: the prompt-conditioned decision transformer (token
//!   layout, forward pass, loss, pre-training and rollouts).
//! * [`diffuser`]: the conditional DDPM over prompt tensors.
//! * [`guidance`]: downstream guidance through the reverse chain, gradient
//!   projection and the two-phase training loop.
//! * [`harness`]: evaluation, baselines, ablations, CKA and the CLI.

pub mod datasets;
pub mod diffuser;
pub mod envs;
mod error;
pub mod guidance;
pub mod harness;
pub mod numerics;
pub mod prompt_dt;
pub mod rng;

pub use error::{Error, Result};
