//! Configuration, presets, experiment execution and CSV output.

pub mod config;
pub mod csv;
pub mod presets;
pub mod runner;

pub use config::{parse_config, parse_layers, ExperimentConfig, Mode};
pub use runner::{run_experiment, RunOptions, RunReport};

use crate::error::{Error, Result};

/// Builds a config from an optional preset overlaid with optional user text.
pub fn load_config(text: Option<&str>, preset: Option<&str>) -> Result<ExperimentConfig> {
    let mut layers = match preset {
        Some(name) => presets::preset_layers(name)?,
        None => Vec::new(),
    };
    match text {
        Some(t) => layers.push(t),
        None if layers.is_empty() => {
            return Err(Error::Config("give a config file, a preset, or both".into()));
        }
        None => {}
    }
    parse_layers(&layers)
}
