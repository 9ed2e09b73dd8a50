//! Geostrophic balance on a lat/lon grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, GriddedField, Variable};

pub const EARTH_RADIUS: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeophysParams {
    /// Gravity, m/s².
    pub g: f64,
    /// Earth rotation rate, rad/s.
    pub omega: f64,
    /// |lat| below this is evaluated at the clamp (sign preserved), degrees.
    pub lat_clamp: f64,
}

impl Default for GeophysParams {
    fn default() -> Self {
        GeophysParams {
            g: 9.81,
            omega: 7.2921e-5,
            lat_clamp: 20.0,
        }
    }
}

impl GeophysParams {
    /// Coriolis parameter `2 Ω sin(lat)`, with |lat| clamped from below.
    pub fn coriolis(&self, lat: f64) -> f64 {
        let a = lat.abs().max(self.lat_clamp);
        2.0 * self.omega * a.to_radians().sin() * lat.signum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stencil {
    /// One-sided differences at the domain edge.
    OneSidedEdges,
    /// Central differences only; edge cells are dropped.
    InteriorOnly,
}

/// Derivative along one axis at index `k` of `n`, given a sampler that
/// returns `None` for unobserved neighbours.
fn derivative(k: usize, n: usize, spacing: f64, stencil: Stencil, at: impl Fn(usize) -> Option<f64>) -> Option<f64> {
    if n < 2 {
        return None;
    }
    if k > 0 && k + 1 < n {
        return Some((at(k + 1)? - at(k - 1)?) / (2.0 * spacing));
    }
    if stencil == Stencil::InteriorOnly {
        return None;
    }
    if k == 0 {
        Some((at(1)? - at(0)?) / spacing)
    } else {
        Some((at(n - 1)? - at(n - 2)?) / spacing)
    }
}

fn geostrophy(
    ssh: &GriddedField,
    grid: &GridSpec,
    params: &GeophysParams,
    stencil: Stencil,
) -> Result<(GriddedField, GriddedField)> {
    if ssh.variable != Variable::Ssh {
        return Err(Error::input(format!("geostrophy needs an SSH field, got {}", ssh.variable)));
    }
    ssh.check_grid(grid)?;
    let (n_lat, n_lon) = (grid.n_lat, grid.n_lon);
    let dlat = grid.resolution.to_radians();
    let dy = EARTH_RADIUS * dlat;
    let mut u = ssh.empty_like(Variable::U);
    let mut v = ssh.empty_like(Variable::V);
    let sample = |i: usize, j: usize| ssh.valid(i, j).then(|| ssh.get(i, j));
    for i in 0..n_lat {
        let lat = grid.lat_center(i);
        let f = params.coriolis(lat);
        let dx = EARTH_RADIUS * lat.to_radians().cos() * dlat;
        for j in 0..n_lon {
            if !ssh.valid(i, j) {
                continue;
            }
            let deta_dy = derivative(i, n_lat, dy, stencil, |k| sample(k, j));
            let deta_dx = derivative(j, n_lon, dx, stencil, |k| sample(i, k));
            if let (Some(gy), Some(gx)) = (deta_dy, deta_dx) {
                let k = ssh.idx(i, j);
                u.values[k] = -(params.g / f) * gy;
                v.values[k] = (params.g / f) * gx;
                u.mask[k] = true;
                v.mask[k] = true;
            }
        }
    }
    Ok((u, v))
}

/// `u = -(g/f) ∂η/∂y`, `v = (g/f) ∂η/∂x` with second-order central
/// differences, one-sided at the domain edges. A cell whose stencil touches
/// an unobserved cell is masked out.
pub fn geostrophic_currents(
    ssh: &GriddedField,
    grid: &GridSpec,
    params: &GeophysParams,
) -> Result<(GriddedField, GriddedField)> {
    geostrophy(ssh, grid, params, Stencil::OneSidedEdges)
}

/// Geostrophy straight from a swath observation: same stencil, but a cell is
/// kept only when all four neighbours are observed (no one-sided edges).
pub fn swath_geostrophy(
    swot: &GriddedField,
    grid: &GridSpec,
    params: &GeophysParams,
) -> Result<(GriddedField, GriddedField)> {
    geostrophy(swot, grid, params, Stencil::InteriorOnly)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(33.0, 37.0, -20.0, -16.0, 0.1).unwrap()
    }

    #[test]
    fn coriolis_at_35n_and_clamp() {
        let p = GeophysParams::default();
        assert!((p.coriolis(35.0) - 8.365e-5).abs() < 1e-8);
        assert_eq!(p.coriolis(5.0), p.coriolis(20.0));
        assert_eq!(p.coriolis(-5.0), -p.coriolis(20.0));
    }

    #[test]
    fn flat_ssh_has_no_current() {
        let g = grid();
        let ssh = GriddedField::filled(Variable::Ssh, 0, g.n_lat, g.n_lon, 0.4, true);
        let (u, v) = geostrophic_currents(&ssh, &g, &GeophysParams::default()).unwrap();
        assert!(u.values.iter().chain(&v.values).all(|&x| x == 0.0));
        assert!(u.mask.iter().all(|&m| m));
    }

    #[test]
    fn meridional_slope_gives_zonal_flow() {
        let g = grid();
        let p = GeophysParams::default();
        let a = 1e-6;
        let mut ssh = GriddedField::filled(Variable::Ssh, 0, g.n_lat, g.n_lon, 0.0, true);
        for i in 0..g.n_lat {
            let y = EARTH_RADIUS * (g.lat_center(i) - 35.0).to_radians();
            for j in 0..g.n_lon {
                let k = ssh.idx(i, j);
                ssh.values[k] = a * y;
            }
        }
        let (u, v) = geostrophic_currents(&ssh, &g, &p).unwrap();
        // row closest to 35N
        let i = ((35.0 - g.lat_min) / g.resolution - 0.5).round() as usize;
        let expected = -(9.81 / p.coriolis(g.lat_center(i))) * a;
        assert!((u.get(i, 10) - expected).abs() < 1e-9);
        assert!((expected + 0.1173).abs() < 2e-3);
        assert!(v.values.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn anticyclone_flows_south_east_of_center() {
        let g = grid();
        let p = GeophysParams::default();
        let mut ssh = GriddedField::filled(Variable::Ssh, 0, g.n_lat, g.n_lon, 0.0, true);
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                let dy = (g.lat_center(i) - 35.0) * 111.0;
                let dx = (g.lon_center(j) + 18.0) * 111.0 * 35f64.to_radians().cos();
                let k = ssh.idx(i, j);
                ssh.values[k] = 0.2 * (-(dx * dx + dy * dy) / (2.0 * 50.0 * 50.0)).exp();
            }
        }
        let (_, v) = geostrophic_currents(&ssh, &g, &p).unwrap();
        // due east of the centre (35N, -18E)
        assert!(v.get(19, 25) < 0.0);
        // due west
        assert!(v.get(19, 15) > 0.0);
    }

    #[test]
    fn swath_stencil_masks() {
        let g = grid();
        let p = GeophysParams::default();
        let empty = GriddedField::filled(Variable::Ssh, 0, g.n_lat, g.n_lon, 0.0, false);
        let (u, _) = swath_geostrophy(&empty, &g, &p).unwrap();
        assert_eq!(u.n_valid(), 0);

        let mut swath = empty.clone();
        for i in 0..g.n_lat {
            for j in 5..15 {
                let k = swath.idx(i, j);
                swath.mask[k] = true;
                swath.values[k] = 0.3;
            }
        }
        let (u, v) = swath_geostrophy(&swath, &g, &p).unwrap();
        assert!(u.valid(10, 10) && u.get(10, 10) == 0.0 && v.get(10, 10) == 0.0);
        // next to the unobserved gap
        assert!(!u.valid(10, 5) && !u.valid(10, 14));
        // domain edge
        assert!(!u.valid(0, 10));
        let (u_full, _) = geostrophic_currents(&swath, &g, &p).unwrap();
        assert!(u_full.valid(0, 10));
    }
}
