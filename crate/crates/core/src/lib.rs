//! Desk-scale contrastive world-model reinforcement learning.
//!
//! The crate combines a small reverse-mode autodiff engine, MLP function
//! approximators, random-crop augmentation, an InfoNCE contrastive loss,
//! latent dynamics and reconstruction losses, imagination-based policy
//! optimization, two built-in pixel environments, a deterministic training
//! harness, and verification tooling (gradient checks, score aggregation,
//! SVG plots).

pub mod env;
pub mod error;
pub mod losses;
pub mod nets;
pub mod augment;
pub mod tensor;

pub use error::{Error, Result};
