//! Configuration-driven experiment runner for the driftlab simulation.
//!
//! `driftlab run` reads a JSON [`config::ExperimentConfig`], generates the
//! synthetic corpora, anonymizes them, passes them through every configured
//! channel, runs the attacks and writes CSV reports plus a manifest.

pub mod config;
pub mod error;
pub mod manifest;
pub mod runner;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use error::CliError;
pub use manifest::{verify, Manifest, VerifyReport};
pub use runner::{run_experiment, ChannelReport, RunSummary};
