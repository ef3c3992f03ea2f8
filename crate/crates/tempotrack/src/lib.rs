//! Temporal-adaptive RGB-thermal single-object tracker.
//!
//! A frozen ViT tracking base is adapted to RGB-T input with low-rank thermal
//! prompts, a second branch referenced to an online-updated template, joint
//! template interaction at selected layers, and max-confidence template
//! selection at a fixed interval during inference.

pub mod ablation;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod crops;
pub mod dataset;
pub mod error;
pub mod heads;
pub mod imageio;
pub mod losses;
pub mod mcp;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod sti;
pub mod synth;
pub mod trainer;

pub use error::{ModelError, Result};
