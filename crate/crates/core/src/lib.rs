//! Introspection toolkit for a toy LiDAR detector: synthetic scenes, a
//! pillar detector with activation taps, frame-level error datasets,
//! activation-pattern operators, introspection networks and evaluation.

pub mod detector;
pub mod error;
pub mod errorset;
pub mod evaluation;
pub mod introspector;
pub mod naps;
pub mod nets;
pub mod scene;
pub mod store;

pub use error::{Error, Result};
