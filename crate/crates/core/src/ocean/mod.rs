//! Procedural ground-truth ocean and the observation simulators that sample it.

pub mod drifters;
pub mod geostrophy;
pub mod observe;
pub mod world;

pub use drifters::{
    rasterize_drifters, read_drifters_csv, simulate_drifters, write_drifters_csv, DrifterSample, DrifterTrack,
};
pub use geostrophy::{geostrophic_currents, swath_geostrophy, GeophysParams, EARTH_RADIUS};
pub use observe::{observe_imagery, observe_l4, observe_nadir, observe_swot, swath_mask, NadirConfig, SwotConfig};
pub use world::{simulate_world, AgeostrophicConfig, OceanWorld, WorldConfig};

/// Kilometres per degree of latitude.
pub const KM_PER_DEG: f64 = EARTH_RADIUS * std::f64::consts::PI / 180.0 / 1000.0;
