//! Federated mixture-of-experts simulation.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod posterior;

pub use error::{Error, Result};
