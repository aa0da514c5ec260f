//! Temporal action proposal generation with pyramid region-based slot attention.

pub mod data;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub mod config;
pub mod dataset;
pub mod heads;
pub mod inference;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prslot;
pub mod train;
