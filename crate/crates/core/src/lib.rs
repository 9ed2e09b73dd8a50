//! Desk-scale ocean surface current forecasting.
//!
//! The crate covers the whole pipeline: a procedural ocean with satellite and
//! drifter observation simulators, a multi-arm encoder / translator / decoder
//! network with a hand-written reverse-mode autodiff, the three-stage masked
//! training curriculum, tiled forecasting with Gaussian patch merging, the
//! drifter-referenced verification metrics and the embedding / crossover /
//! ablation analyses.

pub mod analysis;
pub mod climatology;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod forecast;
pub mod grid;
pub mod metrics;
pub mod net;
pub mod ocean;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
