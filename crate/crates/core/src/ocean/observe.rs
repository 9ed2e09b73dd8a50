//! Satellite observation operators: nadir altimetry, wide-swath altimetry and
//! cloud-masked imagery.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::OceanWorld;
use super::KM_PER_DEG;
use crate::error::{Error, Result};
use crate::filters::{masked_gaussian_blur, smooth_noise};
use crate::grid::{GridSpec, GriddedField, Variable};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NadirConfig {
    pub n_tracks: usize,
    pub along_track_spacing_km: f64,
    /// Gaussian measurement noise, m.
    pub noise_std: f64,
    /// Track inclination from the meridian, degrees; drawn uniformly with a
    /// random sign.
    #[serde(default = "default_inclination")]
    pub inclination_range_deg: (f64, f64),
}

fn default_inclination() -> (f64, f64) {
    (10.0, 40.0)
}

impl Default for NadirConfig {
    fn default() -> Self {
        NadirConfig {
            n_tracks: 4,
            along_track_spacing_km: 7.0,
            noise_std: 0.01,
            inclination_range_deg: default_inclination(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwotConfig {
    /// Width of each of the two observed bands on either side of the gap, km.
    pub swath_half_width: f64,
    /// Unobserved gap under the nadir track, km.
    pub gap_width: f64,
    pub revisit_days: u32,
    /// Per-pass bias drawn from Normal(bias_mean, bias_std), m.
    pub bias_mean: f64,
    pub bias_std: f64,
    /// Per-pixel noise, m.
    pub noise_std: f64,
    /// Ground-track heading, degrees clockwise from north.
    #[serde(default = "default_track_angle")]
    pub track_angle_deg: f64,
}

fn default_track_angle() -> f64 {
    12.0
}

impl Default for SwotConfig {
    fn default() -> Self {
        SwotConfig {
            swath_half_width: 50.0,
            gap_width: 20.0,
            revisit_days: 21,
            bias_mean: 0.0526,
            bias_std: 0.0332,
            noise_std: 0.005,
            track_angle_deg: default_track_angle(),
        }
    }
}

impl SwotConfig {
    /// Full footprint: two bands plus the gap.
    pub fn footprint_km(&self) -> f64 {
        2.0 * self.swath_half_width + self.gap_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.revisit_days == 0 || self.swath_half_width <= 0.0 || self.gap_width < 0.0 || self.bias_std < 0.0 || self.noise_std < 0.0 {
            return Err(Error::config("invalid SWOT configuration"));
        }
        Ok(())
    }
}

/// Local tangent-plane coordinates (km) about the grid centre.
struct LocalFrame {
    lat_c: f64,
    lon_c: f64,
    cos_c: f64,
}

impl LocalFrame {
    fn new(grid: &GridSpec) -> Self {
        let lat_c = 0.5 * (grid.lat_min + grid.lat_max);
        LocalFrame {
            lat_c,
            lon_c: 0.5 * (grid.lon_min + grid.lon_max),
            cos_c: lat_c.to_radians().cos(),
        }
    }

    fn to_km(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lon - self.lon_c) * KM_PER_DEG * self.cos_c, (lat - self.lat_c) * KM_PER_DEG)
    }

    fn to_deg(&self, x: f64, y: f64) -> (f64, f64) {
        (self.lat_c + y / KM_PER_DEG, self.lon_c + x / (KM_PER_DEG * self.cos_c))
    }
}

fn add_noise(field: &mut GriddedField, std: f64, rng: &mut rng::Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for k in 0..field.values.len() {
        if field.mask[k] {
            field.values[k] += normal.sample(rng);
        }
    }
}

/// Along-track SSH from `n_tracks` straight ground tracks with random offset
/// and inclination. Deterministic in `(seed, day)`.
pub fn observe_nadir(world: &OceanWorld, day: i64, cfg: &NadirConfig, seed: u64) -> Result<GriddedField> {
    let d = world.check_day(day)?;
    if cfg.along_track_spacing_km <= 0.0 {
        return Err(Error::config("along-track spacing must be positive"));
    }
    let grid = world.grid();
    let truth = &world.ssh[d];
    let frame = LocalFrame::new(grid);
    let mut rng = rng::stream(seed, "nadir", day as u64);
    let mut out = truth.empty_like(Variable::Ssh);
    let (x0, y0) = frame.to_km(grid.lat_min, grid.lon_min);
    let (x1, y1) = frame.to_km(grid.lat_max, grid.lon_max);
    let half_diag = 0.5 * ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt() + cfg.along_track_spacing_km;
    for _ in 0..cfg.n_tracks {
        let px = rng.random_range(x0..x1);
        let py = rng.random_range(y0..y1);
        let (a, b) = cfg.inclination_range_deg;
        let mut incl = if b > a { rng.random_range(a..b) } else { a };
        if rng.random_bool(0.5) {
            incl = -incl;
        }
        let (sx, cy) = (incl.to_radians().sin(), incl.to_radians().cos());
        let n_steps = (2.0 * half_diag / cfg.along_track_spacing_km).ceil() as i64;
        for s in -n_steps..=n_steps {
            let t = s as f64 * cfg.along_track_spacing_km;
            let (lat, lon) = frame.to_deg(px + t * sx, py + t * cy);
            if let Some((i, j)) = grid.cell_of(lat, lon) {
                let k = out.idx(i, j);
                if truth.mask[k] {
                    out.mask[k] = true;
                    out.values[k] = truth.values[k];
                }
            }
        }
    }
    add_noise(&mut out, cfg.noise_std, &mut rng);
    Ok(out)
}

fn coprime_stride(n: u32) -> u32 {
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    if n <= 2 {
        return 1;
    }
    (n * 2 / 5..n).find(|&s| s > 0 && gcd(s, n) == 1).unwrap_or(1)
}

/// Cross-track offset (km) of the swath centreline on a given day, and the
/// unit normal used to measure cross-track distance.
fn swath_geometry(grid: &GridSpec, cfg: &SwotConfig, day: i64) -> (f64, (f64, f64), LocalFrame) {
    let frame = LocalFrame::new(grid);
    let a = cfg.track_angle_deg.to_radians();
    // along-track (sin a, cos a); normal (cos a, -sin a)
    let normal = (a.cos(), -a.sin());
    let corners = [
        frame.to_km(grid.lat_min, grid.lon_min),
        frame.to_km(grid.lat_min, grid.lon_max),
        frame.to_km(grid.lat_max, grid.lon_min),
        frame.to_km(grid.lat_max, grid.lon_max),
    ];
    let proj: Vec<f64> = corners.iter().map(|&(x, y)| x * normal.0 + y * normal.1).collect();
    let cmin = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let cmax = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = cfg.revisit_days;
    let phase = (day.rem_euclid(n as i64) as u32 * coprime_stride(n)) % n;
    let spacing = (cmax - cmin) / n as f64;
    (cmin + (phase as f64 + 0.5) * spacing, normal, frame)
}

/// Swath footprint for a day: `true` on the two bands.
pub fn swath_mask(grid: &GridSpec, cfg: &SwotConfig, day: i64) -> Vec<bool> {
    let (offset, normal, frame) = swath_geometry(grid, cfg, day);
    let inner = 0.5 * cfg.gap_width;
    let outer = inner + cfg.swath_half_width;
    let mut mask = vec![false; grid.n_cells()];
    for i in 0..grid.n_lat {
        for j in 0..grid.n_lon {
            let (x, y) = frame.to_km(grid.lat_center(i), grid.lon_center(j));
            let d = (x * normal.0 + y * normal.1 - offset).abs();
            mask[i * grid.n_lon + j] = d >= inner && d <= outer;
        }
    }
    mask
}

/// Wide-swath SSH: one pass per day cycling through `revisit_days` phases,
/// with a per-pass bias and per-pixel noise.
pub fn observe_swot(world: &OceanWorld, day: i64, cfg: &SwotConfig, seed: u64) -> Result<GriddedField> {
    cfg.validate()?;
    let d = world.check_day(day)?;
    let truth = &world.ssh[d];
    let footprint = swath_mask(world.grid(), cfg, day);
    let mut rng = rng::stream(seed, "swot", day as u64);
    let bias = if cfg.bias_std > 0.0 {
        Normal::new(cfg.bias_mean, cfg.bias_std).expect("finite std").sample(&mut rng)
    } else {
        cfg.bias_mean
    };
    let mut out = truth.empty_like(Variable::Ssh);
    for k in 0..footprint.len() {
        if footprint[k] && truth.mask[k] {
            out.mask[k] = true;
            out.values[k] = truth.values[k] + bias;
        }
    }
    add_noise(&mut out, cfg.noise_std, &mut rng);
    Ok(out)
}

/// Cloud-masked SST or CHL: a smooth random field thresholded so that the
/// requested fraction of ocean cells is cloudy.
pub fn observe_imagery(world: &OceanWorld, day: i64, variable: Variable, cloud_cover: f64, seed: u64) -> Result<GriddedField> {
    let d = world.check_day(day)?;
    if !(0.0..=1.0).contains(&cloud_cover) {
        return Err(Error::config(format!("cloud cover {cloud_cover} outside [0, 1]")));
    }
    let truth = world.tracer(variable, d)?;
    let grid = world.grid();
    let mut rng = rng::stream(seed, &format!("clouds-{variable}"), day as u64);
    let noise = smooth_noise(&mut rng, grid.n_lat, grid.n_lon, 5.0);
    let mut ocean: Vec<usize> = (0..truth.values.len()).filter(|&k| truth.mask[k]).collect();
    ocean.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    let n_cloudy = (cloud_cover * ocean.len() as f64).round() as usize;
    let mut out = truth.clone();
    for &k in &ocean[..n_cloudy] {
        out.mask[k] = false;
        out.values[k] = 0.0;
    }
    Ok(out)
}

/// Gap-free gridded analysis standing in for an L4 product: the truth SSH
/// and geostrophic currents blurred with a Gaussian of `sigma_cells` (land
/// excluded). A larger sigma means a coarser effective resolution.
pub fn observe_l4(world: &OceanWorld, day: i64, sigma_cells: f64) -> Result<[GriddedField; 3]> {
    let d = world.check_day(day)?;
    if sigma_cells < 0.0 {
        return Err(Error::config("L4 smoothing length must be non-negative"));
    }
    let g = world.grid();
    let blur = |f: &GriddedField| {
        let mut out = f.clone();
        out.values = masked_gaussian_blur(&f.values, &f.mask, g.n_lat, g.n_lon, sigma_cells);
        for (v, &m) in out.values.iter_mut().zip(&f.mask) {
            if !m {
                *v = 0.0;
            }
        }
        out
    };
    Ok([blur(&world.ssh[d]), blur(&world.u[d]), blur(&world.v[d])])
}
