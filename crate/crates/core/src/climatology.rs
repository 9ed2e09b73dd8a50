//! Coarse per-week climatology and anomaly normalisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Calendar, GridSpec, GriddedField, Variable};

/// Lower bound applied to every standard deviation, in the variable's unit.
pub const STD_FLOOR: f64 = 1e-3;
pub const DEFAULT_CELL_SIZE: f64 = 2.0;
pub const DEFAULT_PERIOD: u32 = 7;

/// Per coarse cell, per period mean and standard deviation of a variable.
///
/// Arrays are row-major `[period, coarse_lat, coarse_lon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    pub variable: Variable,
    pub cell_size: f64,
    pub period: u32,
    pub lat_min: f64,
    pub lon_min: f64,
    pub n_coarse_lat: usize,
    pub n_coarse_lon: usize,
    pub n_periods: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub global_mean: f64,
    pub global_std: f64,
}

impl Climatology {
    /// `ceil(365 / period)`.
    pub fn periods_for(period: u32) -> usize {
        365usize.div_ceil(period as usize)
    }

    pub fn period_index(&self, calendar: &Calendar, day: i64) -> usize {
        let doy = calendar.day_of_year(day) as usize;
        (doy / self.period as usize).min(self.n_periods - 1)
    }

    /// Coarse cell containing a fine-cell centre.
    pub fn coarse_cell(&self, lat: f64, lon: f64) -> (usize, usize) {
        let ci = ((lat - self.lat_min) / self.cell_size).floor().max(0.0) as usize;
        let cj = ((lon - self.lon_min) / self.cell_size).floor().max(0.0) as usize;
        (ci.min(self.n_coarse_lat - 1), cj.min(self.n_coarse_lon - 1))
    }

    #[inline]
    fn slot(&self, p: usize, ci: usize, cj: usize) -> usize {
        (p * self.n_coarse_lat + ci) * self.n_coarse_lon + cj
    }

    /// Mean and std for a fine cell on a given day.
    pub fn stats_at(&self, grid: &GridSpec, calendar: &Calendar, day: i64, i: usize, j: usize) -> (f64, f64) {
        let p = self.period_index(calendar, day);
        let (ci, cj) = self.coarse_cell(grid.lat_center(i), grid.lon_center(j));
        let s = self.slot(p, ci, cj);
        (self.means[s], self.stds[s])
    }

    /// Per fine-cell (mean, std) maps for one day, row-major.
    pub fn maps_for_day(&self, grid: &GridSpec, calendar: &Calendar, day: i64) -> (Vec<f64>, Vec<f64>) {
        let p = self.period_index(calendar, day);
        let coarse_j: Vec<usize> = (0..grid.n_lon)
            .map(|j| self.coarse_cell(grid.lat_min + 0.5 * grid.resolution, grid.lon_center(j)).1)
            .collect();
        let mut means = Vec::with_capacity(grid.n_cells());
        let mut stds = Vec::with_capacity(grid.n_cells());
        for i in 0..grid.n_lat {
            let (ci, _) = self.coarse_cell(grid.lat_center(i), grid.lon_min);
            for &cj in &coarse_j {
                let s = self.slot(p, ci, cj);
                means.push(self.means[s]);
                stds.push(self.stds[s]);
            }
        }
        (means, stds)
    }
}

/// Computes the climatology of a series of fields sharing one variable and grid.
///
/// Only mask-true samples contribute; the std is the population (ddof = 0)
/// std. Slots with fewer than two samples fall back to the global
/// statistics. The result does not depend on the order of `series`.
pub fn compute_climatology(
    series: &[GriddedField],
    grid: &GridSpec,
    calendar: &Calendar,
    cell_size: f64,
    period: u32,
) -> Result<Climatology> {
    let first = series.first().ok_or_else(|| Error::input("climatology needs a non-empty series"))?;
    if !(cell_size > 0.0) || period == 0 {
        return Err(Error::config("climatology cell size and period must be positive"));
    }
    let variable = first.variable;
    for f in series {
        if f.variable != variable {
            return Err(Error::input(format!(
                "climatology series mixes {} and {}",
                variable, f.variable
            )));
        }
        f.check_grid(grid)?;
    }

    // Fixed accumulation order makes the floating-point sums order-independent.
    let mut order: Vec<&GriddedField> = series.iter().collect();
    order.sort_by(|a, b| {
        a.day.cmp(&b.day).then_with(|| {
            let ka = a.values.iter().map(|v| v.to_bits());
            let kb = b.values.iter().map(|v| v.to_bits());
            ka.cmp(kb).then_with(|| a.mask.cmp(&b.mask))
        })
    });

    let n_coarse_lat = ((grid.lat_max - grid.lat_min) / cell_size).ceil().max(1.0) as usize;
    let n_coarse_lon = ((grid.lon_max - grid.lon_min) / cell_size).ceil().max(1.0) as usize;
    let n_periods = Climatology::periods_for(period);
    let mut clim = Climatology {
        variable,
        cell_size,
        period,
        lat_min: grid.lat_min,
        lon_min: grid.lon_min,
        n_coarse_lat,
        n_coarse_lon,
        n_periods,
        means: vec![0.0; n_periods * n_coarse_lat * n_coarse_lon],
        stds: vec![0.0; n_periods * n_coarse_lat * n_coarse_lon],
        global_mean: 0.0,
        global_std: STD_FLOOR,
    };

    let slots: Vec<usize> = {
        let mut out = Vec::with_capacity(grid.n_cells());
        for i in 0..grid.n_lat {
            for j in 0..grid.n_lon {
                let (ci, cj) = clim.coarse_cell(grid.lat_center(i), grid.lon_center(j));
                out.push(ci * n_coarse_lon + cj);
            }
        }
        out
    };
    let per_period = n_coarse_lat * n_coarse_lon;

    let mut count = vec![0usize; clim.means.len()];
    let mut sum = vec![0.0f64; clim.means.len()];
    let mut g_count = 0usize;
    let mut g_sum = 0.0f64;
    for f in &order {
        let p = clim.period_index(calendar, f.day);
        for (k, (&v, &m)) in f.values.iter().zip(&f.mask).enumerate() {
            if m {
                let s = p * per_period + slots[k];
                count[s] += 1;
                sum[s] += v;
                g_count += 1;
                g_sum += v;
            }
        }
    }
    let g_mean = if g_count > 0 { g_sum / g_count as f64 } else { 0.0 };
    let means: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();

    let mut sq = vec![0.0f64; clim.means.len()];
    let mut g_sq = 0.0f64;
    for f in &order {
        let p = clim.period_index(calendar, f.day);
        for (k, (&v, &m)) in f.values.iter().zip(&f.mask).enumerate() {
            if m {
                let s = p * per_period + slots[k];
                sq[s] += (v - means[s]).powi(2);
                g_sq += (v - g_mean).powi(2);
            }
        }
    }
    let g_std = if g_count > 1 {
        (g_sq / g_count as f64).sqrt().max(STD_FLOOR)
    } else {
        STD_FLOOR
    };
    clim.global_mean = g_mean;
    clim.global_std = g_std;
    for s in 0..clim.means.len() {
        if count[s] >= 2 {
            clim.means[s] = means[s];
            clim.stds[s] = (sq[s] / count[s] as f64).sqrt().max(STD_FLOOR);
        } else {
            clim.means[s] = g_mean;
            clim.stds[s] = g_std;
        }
    }
    Ok(clim)
}

fn apply(
    field: &GriddedField,
    clim: &Climatology,
    grid: &GridSpec,
    calendar: &Calendar,
    forward: bool,
) -> Result<GriddedField> {
    if field.variable != clim.variable {
        return Err(Error::input(format!(
            "cannot apply {} climatology to a {} field",
            clim.variable, field.variable
        )));
    }
    field.check_grid(grid)?;
    let (means, stds) = clim.maps_for_day(grid, calendar, field.day);
    let values = field
        .values
        .iter()
        .zip(means.iter().zip(&stds))
        .map(|(&v, (&m, &s))| if forward { (v - m) / s } else { v * s + m })
        .collect();
    Ok(GriddedField {
        values,
        ..field.clone()
    })
}

/// `(value - mean) / std` using the enclosing coarse cell and period.
pub fn normalize(field: &GriddedField, clim: &Climatology, grid: &GridSpec, calendar: &Calendar) -> Result<GriddedField> {
    apply(field, clim, grid, calendar, true)
}

/// Inverse of [`normalize`].
pub fn denormalize(field: &GriddedField, clim: &Climatology, grid: &GridSpec, calendar: &Calendar) -> Result<GriddedField> {
    apply(field, clim, grid, calendar, false)
}

/// Climatologies for every variable a pipeline touches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClimatologySet {
    pub entries: Vec<Climatology>,
}

impl ClimatologySet {
    pub fn get(&self, variable: Variable) -> Result<&Climatology> {
        self.entries
            .iter()
            .find(|c| c.variable == variable)
            .ok_or_else(|| Error::input(format!("no climatology for {variable}")))
    }

    pub fn insert(&mut self, clim: Climatology) {
        self.entries.retain(|c| c.variable != clim.variable);
        self.entries.push(clim);
        self.entries.sort_by_key(|c| c.variable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(30.0, 34.0, -10.0, -6.0, 0.5).unwrap()
    }

    #[test]
    fn constant_series_clamps_to_floor() {
        let g = grid();
        let cal = Calendar::default();
        let series: Vec<_> = (0..10)
            .map(|d| GriddedField::filled(Variable::Sst, d, g.n_lat, g.n_lon, 3.0, true))
            .collect();
        let c = compute_climatology(&series, &g, &cal, 2.0, 7).unwrap();
        assert_eq!(c.n_periods, 53);
        assert!(c.means.iter().all(|&m| m == 3.0));
        assert!(c.stds.iter().all(|&s| s == STD_FLOOR));
    }

    #[test]
    fn one_coarse_cell_pair() {
        // Samples {1, 3} in one coarse cell: mean 2, std 1.
        let g = GridSpec::new(30.0, 32.0, 0.0, 2.0, 1.0).unwrap();
        let cal = Calendar::default();
        let series: Vec<_> = [1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                let mut f = GriddedField::filled(Variable::Ssh, d as i64, 2, 2, 0.0, false);
                f.values[3] = v;
                f.mask[3] = true;
                f
            })
            .collect();
        let c = compute_climatology(&series, &g, &cal, 2.0, 7).unwrap();
        assert_eq!(c.means[0], 2.0);
        assert_eq!(c.stds[0], 1.0);
    }

    #[test]
    fn empty_cell_uses_global_fallback() {
        let g = GridSpec::new(30.0, 34.0, 0.0, 2.0, 1.0).unwrap();
        let cal = Calendar::default();
        let series: Vec<_> = (0..4)
            .map(|d| {
                let mut f = GriddedField::filled(Variable::Ssh, d, 4, 2, d as f64, true);
                // northern coarse cell never observed
                for k in 4..8 {
                    f.mask[k] = false;
                }
                f
            })
            .collect();
        let c = compute_climatology(&series, &g, &cal, 2.0, 7).unwrap();
        let north = c.slot(0, 1, 0);
        assert_eq!(c.means[north], c.global_mean);
        assert_eq!(c.stds[north], c.global_std);
        assert!(compute_climatology(&[], &g, &cal, 2.0, 7).is_err());
    }

    #[test]
    fn normalize_definition() {
        let g = grid();
        let cal = Calendar::default();
        let series: Vec<_> = (0..6)
            .map(|d| GriddedField::filled(Variable::Ssh, d, g.n_lat, g.n_lon, (d % 3) as f64, true))
            .collect();
        let c = compute_climatology(&series, &g, &cal, 2.0, 7).unwrap();
        let (m, s) = c.stats_at(&g, &cal, 0, 0, 0);
        let mut f = GriddedField::filled(Variable::Ssh, 0, g.n_lat, g.n_lon, m, true);
        f.values[1] = m + 2.0 * s;
        let n = normalize(&f, &c, &g, &cal).unwrap();
        assert_eq!(n.values[0], 0.0);
        assert!((n.values[1] - 2.0).abs() < 1e-12);
        let wrong = GriddedField::filled(Variable::U, 0, g.n_lat, g.n_lon, 0.0, true);
        assert!(normalize(&wrong, &c, &g, &cal).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_and_permutation(values in proptest::collection::vec(-5.0f64..5.0, 64 * 3), day in 0i64..400, perm_seed in 0u64..1000) {
            let g = grid();
            let cal = Calendar::default();
            let series: Vec<_> = (0..3).map(|d| {
                let vals = values[d * 64..(d + 1) * 64].to_vec();
                let mask = vals.iter().map(|v| *v > -4.0).collect();
                GriddedField::new(Variable::Ssh, d as i64 * 3, 8, 8, vals, mask)
            }).collect();
            let c = compute_climatology(&series, &g, &cal, 2.0, 7).unwrap();
            let mut shuffled = series.clone();
            shuffled.rotate_left((perm_seed % 3) as usize);
            if perm_seed % 2 == 0 { shuffled.reverse(); }
            let c2 = compute_climatology(&shuffled, &g, &cal, 2.0, 7).unwrap();
            prop_assert_eq!(&c, &c2);

            let mut f = series[0].clone();
            f.day = day;
            let back = denormalize(&normalize(&f, &c, &g, &cal).unwrap(), &c, &g, &cal).unwrap();
            for (a, b) in back.values.iter().zip(&f.values) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
            let fwd = normalize(&denormalize(&f, &c, &g, &cal).unwrap(), &c, &g, &cal).unwrap();
            for (a, b) in fwd.values.iter().zip(&f.values) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
