//! Regeneration split-chain toolkit for subgeometrically ergodic Markov chains.
//!
//! The crate is organised around the Nummelin splitting of a chain that
//! satisfies a one-step minorisation on a small set `C` and a subgeometric
//! drift condition `PV <= V - phi(V) + b 1_C`.

pub mod bound_engine;
pub mod chain_model;
pub mod cli;
pub mod error;
pub mod limit_lab;
pub mod model_zoo;
pub mod oracle;
pub mod rate_kit;
pub mod rng;
pub mod split_sim;

pub use error::{Error, Result};
