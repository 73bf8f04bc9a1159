//! KV cache compression for next-scale-prediction transformers with per-layer, per-scale budgets.
//!
//! Visual autoregressive models generate an image as a pyramid of token
//! maps, each predicted in one parallel step conditioned on every coarser
//! map. The KV cache therefore grows with the sum of all map sizes. This
//! crate classifies each `(layer, scale)` as a *drafter* (attention spread
//! across earlier scales, needs a large cache) or a *refiner* (attention
//! concentrated on the current map, needs little), allocates cache budgets
//! accordingly, and keeps the tokens an observation window attends to most.
//!
//! Modules:
//!
//! - [`geometry`]: scale schedules and sequence partitions.
//! - [`model`]: a deterministic toy next-scale transformer with KV caching.
//! - [`analysis`]: attention selectivity, Z-scores, drafter selection, calibration.
//! - [`budget`]: uniform, pyramid and drafter/refiner budget plans.
//! - [`cache`]: the KV store, observation windows and eviction policies.
//! - [`bench`]: calibration and policy sweeps, metrics, reports.

pub mod analysis;
pub mod bench;
pub mod budget;
pub mod cache;
mod error;
pub mod geometry;
pub mod model;

pub use error::{Error, Result};
