//! Text self-attention map (T-SAM) guidance for cross-attention conditioning.
//!
//! The crate builds a small causal text encoder and cross-attention stack,
//! derives the cross-attention similarity matrices, optimises a latent so that
//! those similarities follow the text self-attention matrix, and checks the
//! approximations behind the method with Monte Carlo harnesses.

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod crossattn;
pub mod error;
pub mod guidance;
pub mod numkit;
pub mod sandbox;
pub mod stats;
pub mod toyencoder;
pub mod verify;

pub use error::{Error, Result};
pub use numkit::{Mat, RngStream};
