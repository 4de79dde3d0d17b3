//! Identification of latent stochastic differential equations from
//! high-dimensional time series.
//!
//! The pipeline: simulate a latent Itô SDE with Euler–Maruyama ([`sde`]),
//! embed it into ambient space through an injective synthetic decoder and
//! pair consecutive observations ([`datasets`]), train a variational
//! autoencoder whose transition prior is the Euler–Maruyama transition
//! density ([`vae`], built on the minimal dense-network toolkit in [`nn`]),
//! and evaluate recovery of the latent space and drift coefficient up to
//! isometry against Cramér–Rao baselines ([`eval`]). The [`lamperti`]
//! module checks when a multiplicative-noise SDE can be reduced to unit
//! diffusion and computes the reducing change of variables.
//!
//! Everything is deterministic given explicit 64-bit seeds: random numbers
//! come from a counter-based generator ([`rng`]) so that any draw is a pure
//! function of (seed, stream, index).

pub mod datasets;
pub mod error;
pub mod eval;
pub mod io;
pub mod lamperti;
pub mod nn;
pub mod rng;
pub mod sde;
pub mod vae;

pub use error::{Error, Result};
