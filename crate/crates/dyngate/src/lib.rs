//! Gated MLP with an explicit split between routing parameters (the gate or
//! router network, `theta`) and representation parameters (the prediction
//! path, `W`).
//!
//! Because each input only touches the units its gate activates, the model
//! admits update rules that leave the currently-served computation untouched:
//! gate-only updates, updates scoped to the inactive subspace, and a
//! serve/train split where training mutates a private copy and publishes
//! immutable snapshots. This crate implements the model zoo, the analytic
//! gradients with a finite-difference oracle, the online adaptation engine,
//! a drift benchmark with its metric set, and the snapshot serving engine
//! with a replayable audit log.
//!
//! The `dyngate` binary drives everything from a JSON experiment config; see
//! the repository README.

pub mod adapt;
pub mod cli;
pub mod config;
pub mod driftlab;
pub mod error;
pub mod gatenet;
pub mod graddiff;
pub mod mathcore;
pub mod metrics;
pub mod snapserve;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
