//! Edge-association game and hierarchical federated learning with synthetic data.
//!
//! Workers grouped into populations choose edge servers by replicator
//! dynamics ([`game`], [`analysis`]); the resulting clusters train a classifier
//! ([`model`]) with two-level aggregation ([`hfl`]) on skewed shards topped up
//! with synthetic samples ([`data`]). [`harness`] wires everything to configs,
//! presets and CSV output.

pub mod analysis;
pub mod data;
pub mod error;
pub mod game;
pub mod harness;
pub mod hfl;
pub mod model;
pub mod seed;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/presets.md")]
    mod presets {}
    #[doc = include_str!("../../../book/src/game.md")]
    mod game {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/outputs.md")]
    mod outputs {}
}
