//! Synthetic ocean: drifting Gaussian eddies on a background slope, balanced
//! geostrophic currents and two passive tracers advected by the flow.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::geostrophy::{geostrophic_currents, GeophysParams, EARTH_RADIUS};
use super::KM_PER_DEG;
use crate::error::{Error, Result};
use crate::filters::smooth_noise;
use crate::grid::{Calendar, GridSpec, GriddedField, Variable};
use crate::rng;

/// Optional non-geostrophic current added to the truth felt by drifters and
/// tracers (but not to the stored geostrophic U/V).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgeostrophicConfig {
    pub enabled: bool,
    /// Uniform drift, m/s.
    pub mean_u: f64,
    pub mean_v: f64,
    /// Std of the spatially smooth fluctuating part, m/s.
    pub noise_std: f64,
    /// Gaussian correlation length of the fluctuation, cells.
    pub correlation_cells: f64,
    /// Day-to-day AR(1) coefficient of the fluctuation.
    pub time_correlation: f64,
}

impl Default for AgeostrophicConfig {
    fn default() -> Self {
        AgeostrophicConfig {
            enabled: false,
            mean_u: 0.0,
            mean_v: 0.0,
            noise_std: 0.0,
            correlation_cells: 8.0,
            time_correlation: 0.9,
        }
    }
}

fn default_heading() -> f64 {
    270.0
}

fn default_spread() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub calendar: Calendar,
    pub n_days: usize,
    pub n_eddies: usize,
    /// |amplitude| range, m. The sign is drawn at random (positive = anticyclone).
    pub eddy_amplitude_range: (f64, f64),
    /// e-folding radius range, km.
    pub eddy_radius_range: (f64, f64),
    /// Drift speed range, km/day.
    pub eddy_drift_speed_range: (f64, f64),
    /// Mean drift heading, degrees clockwise from north.
    #[serde(default = "default_heading")]
    pub eddy_drift_heading_deg: f64,
    /// Half-width of the uniform heading spread, degrees.
    #[serde(default = "default_spread")]
    pub eddy_drift_heading_spread_deg: f64,
    /// SSH slope along latitude, m/degree.
    pub background_ssh_gradient: f64,
    pub land_fraction: f64,
    #[serde(default)]
    pub ageostrophic: AgeostrophicConfig,
    #[serde(default)]
    pub geophys: GeophysParams,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let clamp = self.geophys.lat_clamp;
        if self.grid.lat_min < clamp && self.grid.lat_max > -clamp {
            return Err(Error::config(format!(
                "world grid {}..{} touches the |lat| < {clamp} band",
                self.grid.lat_min, self.grid.lat_max
            )));
        }
        if self.n_days == 0 {
            return Err(Error::config("world needs at least one day"));
        }
        if !(0.0..=1.0).contains(&self.land_fraction) {
            return Err(Error::config("land_fraction must lie in [0, 1]"));
        }
        let ranges = [
            ("eddy_amplitude_range", self.eddy_amplitude_range),
            ("eddy_radius_range", self.eddy_radius_range),
            ("eddy_drift_speed_range", self.eddy_drift_speed_range),
        ];
        for (name, (a, b)) in ranges {
            if !(a <= b) || a < 0.0 {
                return Err(Error::config(format!("{name} must be a non-negative increasing pair")));
            }
        }
        if self.n_eddies > 0 && self.eddy_radius_range.0 <= 0.0 {
            return Err(Error::config("eddy radii must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Eddy {
    lat0: f64,
    lon0: f64,
    amplitude: f64,
    radius_m: f64,
    /// Drift in degrees/day.
    dlat: f64,
    dlon: f64,
}

/// Daily truth fields. `u`/`v` are exactly `geostrophic_currents(ssh)`;
/// `u_total`/`v_total` add the ageostrophic part and are what drifters and
/// tracers feel.
#[derive(Clone, Debug)]
pub struct OceanWorld {
    pub config: WorldConfig,
    pub land: Vec<bool>,
    pub ssh: Vec<GriddedField>,
    pub u: Vec<GriddedField>,
    pub v: Vec<GriddedField>,
    pub u_total: Vec<GriddedField>,
    pub v_total: Vec<GriddedField>,
    pub sst: Vec<GriddedField>,
    pub chl: Vec<GriddedField>,
}

impl OceanWorld {
    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn calendar(&self) -> &Calendar {
        &self.config.calendar
    }

    pub fn n_days(&self) -> usize {
        self.ssh.len()
    }

    pub fn check_day(&self, day: i64) -> Result<usize> {
        if day < 0 || day as usize >= self.n_days() {
            return Err(Error::input(format!("day {day} outside world range 0..{}", self.n_days())));
        }
        Ok(day as usize)
    }

    pub fn ocean_mask(&self) -> Vec<bool> {
        self.land.iter().map(|&l| !l).collect()
    }

    pub fn tracer(&self, variable: Variable, day: usize) -> Result<&GriddedField> {
        match variable {
            Variable::Sst => Ok(&self.sst[day]),
            Variable::Chl => Ok(&self.chl[day]),
            other => Err(Error::input(format!("{other} is not an imagery tracer"))),
        }
    }
}

/// Land as a single rectangle in the north-west corner covering roughly
/// `fraction` of the grid.
pub fn land_map(grid: &GridSpec, fraction: f64) -> Vec<bool> {
    let mut land = vec![false; grid.n_cells()];
    if fraction <= 0.0 {
        return land;
    }
    let side = fraction.sqrt();
    let nr = ((side * grid.n_lat as f64).round() as usize).min(grid.n_lat);
    let nc = ((side * grid.n_lon as f64).round() as usize).min(grid.n_lon);
    for i in grid.n_lat - nr..grid.n_lat {
        for j in 0..nc {
            land[i * grid.n_lon + j] = true;
        }
    }
    land
}

fn draw(rng: &mut rng::Rng, (a, b): (f64, f64)) -> f64 {
    if b > a {
        rng.random_range(a..b)
    } else {
        a
    }
}

fn spawn_eddies(cfg: &WorldConfig, rng: &mut rng::Rng) -> (Vec<Eddy>, [f64; 4]) {
    let g = &cfg.grid;
    let lat_mid = 0.5 * (g.lat_min + g.lat_max);
    let cos_mid = lat_mid.to_radians().cos();
    let margin_km = 3.0 * cfg.eddy_radius_range.1;
    let box_ = [
        g.lat_min - margin_km / KM_PER_DEG,
        g.lat_max + margin_km / KM_PER_DEG,
        g.lon_min - margin_km / (KM_PER_DEG * cos_mid),
        g.lon_max + margin_km / (KM_PER_DEG * cos_mid),
    ];
    let eddies = (0..cfg.n_eddies)
        .map(|_| {
            let lat0 = rng.random_range(box_[0]..box_[1]);
            let lon0 = rng.random_range(box_[2]..box_[3]);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amplitude = sign * draw(rng, cfg.eddy_amplitude_range);
            let radius_m = draw(rng, cfg.eddy_radius_range) * 1000.0;
            let speed = draw(rng, cfg.eddy_drift_speed_range);
            let spread = cfg.eddy_drift_heading_spread_deg;
            let heading = (cfg.eddy_drift_heading_deg + draw(rng, (-spread, spread))).to_radians();
            Eddy {
                lat0,
                lon0,
                amplitude,
                radius_m,
                dlat: speed * heading.cos() / KM_PER_DEG,
                dlon: speed * heading.sin() / (KM_PER_DEG * cos_mid),
            }
        })
        .collect();
    (eddies, box_)
}

fn wrap(x: f64, lo: f64, hi: f64) -> f64 {
    lo + (x - lo).rem_euclid(hi - lo)
}

fn ssh_for_day(cfg: &WorldConfig, eddies: &[Eddy], box_: &[f64; 4], land: &[bool], day: usize) -> GriddedField {
    let g = &cfg.grid;
    let lat_mid = 0.5 * (g.lat_min + g.lat_max);
    let mut f = GriddedField::filled(Variable::Ssh, day as i64, g.n_lat, g.n_lon, 0.0, true);
    let centers: Vec<(f64, f64, &Eddy)> = eddies
        .iter()
        .map(|e| {
            let lat = wrap(e.lat0 + e.dlat * day as f64, box_[0], box_[1]);
            let lon = wrap(e.lon0 + e.dlon * day as f64, box_[2], box_[3]);
            (lat, lon, e)
        })
        .collect();
    for i in 0..g.n_lat {
        let lat = g.lat_center(i);
        for j in 0..g.n_lon {
            let k = i * g.n_lon + j;
            if land[k] {
                f.mask[k] = false;
                continue;
            }
            let lon = g.lon_center(j);
            let mut eta = cfg.background_ssh_gradient * (lat - lat_mid);
            for &(clat, clon, e) in &centers {
                let y = EARTH_RADIUS * (lat - clat).to_radians();
                let x = EARTH_RADIUS * clat.to_radians().cos() * (lon - clon).to_radians();
                eta += e.amplitude * (-(x * x + y * y) / (2.0 * e.radius_m * e.radius_m)).exp();
            }
            f.values[k] = eta;
        }
    }
    f
}

/// Semi-Lagrangian step: each ocean cell takes the bilinearly interpolated
/// value at its one-day departure point.
fn advect(field: &GriddedField, u: &GriddedField, v: &GriddedField, grid: &GridSpec, land: &[bool]) -> GriddedField {
    let dt = 86_400.0;
    let dlat = grid.resolution.to_radians();
    let mut out = field.clone();
    let max_i = (grid.n_lat - 1) as f64;
    let max_j = (grid.n_lon - 1) as f64;
    for i in 0..grid.n_lat {
        let dx = EARTH_RADIUS * grid.lat_center(i).to_radians().cos() * dlat;
        let dy = EARTH_RADIUS * dlat;
        for j in 0..grid.n_lon {
            let k = i * grid.n_lon + j;
            if land[k] {
                continue;
            }
            let (uu, vv) = if u.mask[k] { (u.values[k], v.values[k]) } else { (0.0, 0.0) };
            let r = (i as f64 - vv * dt / dy).clamp(0.0, max_i);
            let c = (j as f64 - uu * dt / dx).clamp(0.0, max_j);
            let i0 = r.floor() as usize;
            let j0 = c.floor() as usize;
            let i1 = (i0 + 1).min(grid.n_lat - 1);
            let j1 = (j0 + 1).min(grid.n_lon - 1);
            let ti = r - i0 as f64;
            let tj = c - j0 as f64;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (ii, jj, w) in [
                (i0, j0, (1.0 - ti) * (1.0 - tj)),
                (i0, j1, (1.0 - ti) * tj),
                (i1, j0, ti * (1.0 - tj)),
                (i1, j1, ti * tj),
            ] {
                let kk = ii * grid.n_lon + jj;
                if w > 0.0 && !land[kk] {
                    acc += w * field.values[kk];
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                out.values[k] = acc / wsum;
            }
        }
    }
    out
}

/// Relaxation rate of tracers towards their initial state, per day.
const TRACER_RELAXATION: f64 = 0.03;

/// Builds the daily truth. Deterministic in `config.seed`.
pub fn simulate_world(config: &WorldConfig) -> Result<OceanWorld> {
    config.validate()?;
    let g = &config.grid;
    let params = config.geophys;
    let land = land_map(g, config.land_fraction);
    let ocean: Vec<bool> = land.iter().map(|&l| !l).collect();
    let mut rng_eddies = rng::stream(config.seed, "eddies", 0);
    let (eddies, box_) = spawn_eddies(config, &mut rng_eddies);

    let lat_mid = 0.5 * (g.lat_min + g.lat_max);
    let mut rng_tracer = rng::stream(config.seed, "tracers", 0);
    let sst_noise = smooth_noise(&mut rng_tracer, g.n_lat, g.n_lon, 6.0);
    let chl_noise = smooth_noise(&mut rng_tracer, g.n_lat, g.n_lon, 6.0);
    let mut sst0 = GriddedField::new(Variable::Sst, 0, g.n_lat, g.n_lon, vec![0.0; g.n_cells()], ocean.clone());
    let mut chl0 = GriddedField::new(Variable::Chl, 0, g.n_lat, g.n_lon, vec![0.0; g.n_cells()], ocean.clone());
    for i in 0..g.n_lat {
        let dl = g.lat_center(i) - lat_mid;
        for j in 0..g.n_lon {
            let k = i * g.n_lon + j;
            if land[k] {
                continue;
            }
            sst0.values[k] = 18.0 - 0.6 * dl + 1.0 * sst_noise[k];
            chl0.values[k] = -0.7 + 0.05 * dl + 0.3 * chl_noise[k];
        }
    }

    let ageo = &config.ageostrophic;
    let mut fluct_u = vec![0.0; g.n_cells()];
    let mut fluct_v = vec![0.0; g.n_cells()];

    let mut world = OceanWorld {
        config: config.clone(),
        land: land.clone(),
        ssh: Vec::with_capacity(config.n_days),
        u: Vec::with_capacity(config.n_days),
        v: Vec::with_capacity(config.n_days),
        u_total: Vec::with_capacity(config.n_days),
        v_total: Vec::with_capacity(config.n_days),
        sst: Vec::with_capacity(config.n_days),
        chl: Vec::with_capacity(config.n_days),
    };
    let mut sst = sst0.clone();
    let mut chl = chl0.clone();
    for day in 0..config.n_days {
        let ssh = ssh_for_day(config, &eddies, &box_, &land, day);
        let (u, v) = geostrophic_currents(&ssh, g, &params)?;
        let mut ut = u.clone();
        let mut vt = v.clone();
        if ageo.enabled {
            let mut r = rng::stream(config.seed, "ageostrophic", day as u64);
            let nu = smooth_noise(&mut r, g.n_lat, g.n_lon, ageo.correlation_cells);
            let nv = smooth_noise(&mut r, g.n_lat, g.n_lon, ageo.correlation_cells);
            let rho = if day == 0 { 0.0 } else { ageo.time_correlation };
            let innov = (1.0 - rho * rho).sqrt();
            for k in 0..g.n_cells() {
                fluct_u[k] = rho * fluct_u[k] + innov * nu[k];
                fluct_v[k] = rho * fluct_v[k] + innov * nv[k];
                if ut.mask[k] {
                    ut.values[k] += ageo.mean_u + ageo.noise_std * fluct_u[k];
                    vt.values[k] += ageo.mean_v + ageo.noise_std * fluct_v[k];
                }
            }
        }
        if day > 0 {
            let prev = day - 1;
            sst = advect(&sst, &world.u_total[prev], &world.v_total[prev], g, &land);
            chl = advect(&chl, &world.u_total[prev], &world.v_total[prev], g, &land);
            for k in 0..g.n_cells() {
                sst.values[k] += TRACER_RELAXATION * (sst0.values[k] - sst.values[k]);
                chl.values[k] += TRACER_RELAXATION * (chl0.values[k] - chl.values[k]);
            }
        }
        sst.day = day as i64;
        chl.day = day as i64;
        world.ssh.push(ssh);
        world.u.push(u);
        world.v.push(v);
        world.u_total.push(ut);
        world.v_total.push(vt);
        world.sst.push(sst.clone());
        world.chl.push(chl.clone());
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> WorldConfig {
        WorldConfig {
            grid: GridSpec::new(34.0, 36.4, -30.0, -27.6, 0.1).unwrap(),
            calendar: Calendar::default(),
            n_days: 4,
            n_eddies: 3,
            eddy_amplitude_range: (0.1, 0.2),
            eddy_radius_range: (20.0, 40.0),
            eddy_drift_speed_range: (5.0, 10.0),
            eddy_drift_heading_deg: 270.0,
            eddy_drift_heading_spread_deg: 30.0,
            background_ssh_gradient: 0.0,
            land_fraction: 0.1,
            ageostrophic: AgeostrophicConfig::default(),
            geophys: GeophysParams::default(),
            seed: 7,
        }
    }

    #[test]
    fn empty_ocean_is_flat() {
        let mut cfg = small_config();
        cfg.n_eddies = 0;
        let w = simulate_world(&cfg).unwrap();
        for d in 0..cfg.n_days {
            assert!(w.ssh[d].values.iter().all(|&x| x == 0.0));
            assert!(w.u[d].values.iter().chain(&w.v[d].values).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn stationary_eddy_is_time_invariant() {
        let mut cfg = small_config();
        cfg.n_eddies = 1;
        cfg.eddy_drift_speed_range = (0.0, 0.0);
        let w = simulate_world(&cfg).unwrap();
        assert_eq!(w.ssh[0].values, w.ssh[3].values);
        assert_eq!(w.u[0].values, w.u[3].values);
        assert_eq!(w.v[1].values, w.v[2].values);
    }

    #[test]
    fn same_seed_same_world() {
        let mut cfg = small_config();
        cfg.ageostrophic.enabled = true;
        cfg.ageostrophic.noise_std = 0.05;
        let a = simulate_world(&cfg).unwrap();
        let b = simulate_world(&cfg).unwrap();
        for d in 0..cfg.n_days {
            assert_eq!(a.ssh[d], b.ssh[d]);
            assert_eq!(a.u_total[d], b.u_total[d]);
            assert_eq!(a.sst[d], b.sst[d]);
            assert_eq!(a.chl[d], b.chl[d]);
        }
    }

    #[test]
    fn truth_currents_are_geostrophic() {
        let w = simulate_world(&small_config()).unwrap();
        for d in 0..w.n_days() {
            let (u, v) = geostrophic_currents(&w.ssh[d], w.grid(), &w.config.geophys).unwrap();
            assert_eq!(u, w.u[d]);
            assert_eq!(v, w.v[d]);
            // land is masked
            assert!(w.land.iter().zip(&w.ssh[d].mask).all(|(&l, &m)| !(l && m)));
        }
    }

    #[test]
    fn tropical_grid_rejected() {
        let mut cfg = small_config();
        cfg.grid = GridSpec::new(10.0, 30.0, 0.0, 5.0, 0.5).unwrap();
        assert!(matches!(simulate_world(&cfg), Err(Error::Config(_))));
        cfg.grid = GridSpec::new(-30.0, -22.0, 0.0, 5.0, 0.5).unwrap();
        assert!(simulate_world(&cfg).is_ok());
    }

    #[test]
    fn land_fraction_is_close() {
        let g = GridSpec::new(30.0, 36.4, 0.0, 6.4, 0.1).unwrap();
        let land = land_map(&g, 0.25);
        let frac = land.iter().filter(|&&l| l).count() as f64 / land.len() as f64;
        assert!((frac - 0.25).abs() < 0.02);
    }

    #[test]
    fn flow_follows_ssh_contours() {
        // single analytic eddy: u·∂η/∂x + v·∂η/∂y ≈ 0
        let mut cfg = small_config();
        cfg.n_eddies = 0;
        cfg.land_fraction = 0.0;
        cfg.n_days = 1;
        let w0 = simulate_world(&cfg).unwrap();
        let g = w0.grid().clone();
        let mut ssh = w0.ssh[0].clone();
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                let y = EARTH_RADIUS * (g.lat_center(i) - 35.2).to_radians();
                let x = EARTH_RADIUS * 35.2f64.to_radians().cos() * (g.lon_center(j) + 28.8).to_radians();
                let k = ssh.idx(i, j);
                ssh.values[k] = 0.2 * (-(x * x + y * y) / (2.0 * 40e3 * 40e3)).exp();
            }
        }
        let (u, v) = geostrophic_currents(&ssh, &g, &cfg.geophys).unwrap();
        let dy = EARTH_RADIUS * g.resolution.to_radians();
        let mut dot2 = 0.0;
        let mut ref2 = 0.0;
        for i in 1..g.n_lat - 1 {
            let dx = dy * g.lat_center(i).to_radians().cos();
            for j in 1..g.n_lon - 1 {
                let gx = (ssh.get(i, j + 1) - ssh.get(i, j - 1)) / (2.0 * dx);
                let gy = (ssh.get(i + 1, j) - ssh.get(i - 1, j)) / (2.0 * dy);
                let (uu, vv) = (u.get(i, j), v.get(i, j));
                dot2 += (uu * gx + vv * gy).powi(2);
                ref2 += (gx * gx + gy * gy) * (uu * uu + vv * vv);
            }
        }
        assert!(dot2.sqrt() < 0.01 * ref2.sqrt());
    }
}
