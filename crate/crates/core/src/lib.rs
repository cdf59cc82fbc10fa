//! Beam prediction for vehicle-to-infrastructure THz links from multimodal
//! side information, using a mixture of modality experts.
//!
//! The crate covers the whole pipeline: array and channel model
//! ([`array_channel`]), synthetic scenario and sensing generation
//! ([`scenario`], [`dataset`]), a small dense-network core ([`nn`]), the
//! mixture-of-experts model with its baselines and training loop ([`moe`]),
//! evaluation ([`eval`]) and persistence ([`checkpoint`], [`config`],
//! [`manifest`]).

pub mod array_channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod manifest;
pub mod moe;
pub mod nn;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
