//! Desk-scale ensemble driving stack.
//!
//! The crate bundles a deterministic 2-D driving world with an expert
//! autopilot, dataset recording, three perception networks (world-model
//! latent prediction, behavior reflex, direct perception), interchangeable
//! embedding fusion, a command-gated waypoint policy with PID control, a
//! closed-loop benchmark, and a feature-ablation attribution engine.

pub mod ablation;
pub mod action;
pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod nn;
pub mod perception;
pub mod plot;
pub mod report;
pub mod rng;
pub mod simworld;
pub mod tensor;

pub use error::CoreError;
pub use tensor::Tensor;

/// Format version stamped into every on-disk artifact this crate emits.
pub const FORMAT_VERSION: u32 = 1;
