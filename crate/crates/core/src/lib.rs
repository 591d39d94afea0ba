//! Key-protected collaborative classification.
//!
//! Participants train a shared embedding network through a simulated parameter
//! server. Each class is represented by a private unit-norm key and scored by
//! the dot product between the key and the l2-normalized embedding, so a
//! participant can only compute scores for classes whose keys it holds.
//! Adversarial participants run GAN-style reconstruction attacks against the
//! shared model; the crate measures whether those attacks succeed.

pub mod adversary;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod keys;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
