//! Desk-scale multi-domain adaptive single-object tracking.
//!
//! A compact one-stream transformer tracker is trained on labeled synthetic
//! sequences and adapted to corrupted weather domains (fog, darkness, rain)
//! with a mean-teacher loop, a per-domain token adapter on a frozen
//! backbone, and an optimal-transport confidence alignment loss.

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod tca;
pub mod trainer;
pub mod weather;

pub use error::{Error, Result};
