//! Pre-training data detection from LoRA gradient statistics.
//!
//! A toy causal language model ([`tinylm`]) is pretrained on "member"
//! documents. Each probe sample is pushed through the frozen model with
//! zero-initialized LoRA adapters attached ([`lora`]); the resulting
//! adapter gradients are summarized into eight statistics per matrix
//! ([`features`]) and a small MLP ([`detector`]) learns membership from
//! them. Likelihood baselines ([`baselines`]), training-dynamics metrics
//! ([`dynamics`]) and evaluation ([`eval`]) complete the toolkit.

pub mod baselines;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod features;
pub mod lora;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor_io;
pub mod tinylm;

pub use error::{GdsError, Result};
