//! Command-line entry point: configuration loading, run manifests, and
//! the subcommand dispatcher.

pub mod config;
pub mod dispatch;
pub mod manifest;

pub use config::{load_config, parse_config, save_config, AppConfig, Profile};
pub use dispatch::dispatch;
pub use manifest::{sha256_hex, RunManifest};
