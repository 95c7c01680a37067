//! Harness around `akd-core`: the JSON config, weight and σ files, the
//! seeded ablation and ensemble suites, the verification battery and the
//! `akd` command line.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod stats;
pub mod suite;
pub mod verify;

pub use config::CliConfig;
pub use error::{LabError, LabResult};
