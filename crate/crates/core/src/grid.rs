//! Regular latitude/longitude grids, masked gridded fields and region
//! definitions.

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical variables carried by gridded fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "SSH")]
    Ssh,
    #[serde(rename = "U")]
    U,
    #[serde(rename = "V")]
    V,
    #[serde(rename = "SST")]
    Sst,
    #[serde(rename = "CHL")]
    Chl,
}

impl Variable {
    pub const ALL: [Variable; 5] = [
        Variable::Ssh,
        Variable::U,
        Variable::V,
        Variable::Sst,
        Variable::Chl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Ssh => "SSH",
            Variable::U => "U",
            Variable::V => "V",
            Variable::Sst => "SST",
            Variable::Chl => "CHL",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Variable::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::input(format!("unknown variable `{name}`")))
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps integer day indices onto calendar dates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub start_date: NaiveDate,
}

impl Default for Calendar {
    fn default() -> Self {
        Calendar {
            start_date: NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
        }
    }
}

impl Calendar {
    pub fn new(start_date: NaiveDate) -> Self {
        Calendar { start_date }
    }

    pub fn date(&self, day: i64) -> NaiveDate {
        self.start_date + Duration::days(day)
    }

    /// Zero-based day of year.
    pub fn day_of_year(&self, day: i64) -> u32 {
        self.date(day).ordinal0()
    }

    /// `day_of_year // 7`, clamped to 52.
    pub fn week_index(&self, day: i64) -> u32 {
        (self.day_of_year(day) / 7).min(52)
    }

    pub fn day_of(&self, date: NaiveDate) -> i64 {
        (date - self.start_date).num_days()
    }
}

/// A regular latitude/longitude grid. Cell `(i, j)` is centred on
/// `(lat_min + (i + 0.5) * resolution, lon_min + (j + 0.5) * resolution)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub resolution: f64,
    pub n_lat: usize,
    pub n_lon: usize,
}

impl GridSpec {
    /// Builds a spec whose cell counts follow from the bounds.
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::config(format!("grid resolution must be positive, got {resolution}")));
        }
        if !(lat_min < lat_max) || !(lon_min < lon_max) {
            return Err(Error::config(format!(
                "grid bounds must be increasing: lat {lat_min}..{lat_max}, lon {lon_min}..{lon_max}"
            )));
        }
        let spec = GridSpec {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            resolution,
            n_lat: ((lat_max - lat_min) / resolution).round() as usize,
            n_lon: ((lon_max - lon_min) / resolution).round() as usize,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::config(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            )));
        }
        if !(self.lat_min < self.lat_max) || !(self.lon_min < self.lon_max) {
            return Err(Error::config(format!(
                "grid bounds must be increasing: lat {}..{}, lon {}..{}",
                self.lat_min, self.lat_max, self.lon_min, self.lon_max
            )));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(Error::config("grid latitude outside [-90, 90]"));
        }
        let n_lat = ((self.lat_max - self.lat_min) / self.resolution).round() as usize;
        let n_lon = ((self.lon_max - self.lon_min) / self.resolution).round() as usize;
        if n_lat != self.n_lat || n_lon != self.n_lon || n_lat == 0 || n_lon == 0 {
            return Err(Error::config(format!(
                "grid cell counts {}x{} inconsistent with bounds (expected {n_lat}x{n_lon})",
                self.n_lat, self.n_lon
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn lat_center(&self, i: usize) -> f64 {
        self.lat_min + (i as f64 + 0.5) * self.resolution
    }

    pub fn lon_center(&self, j: usize) -> f64 {
        self.lon_min + (j as f64 + 0.5) * self.resolution
    }

    /// Fractional (row, col) position where integer values are cell centres.
    pub fn fractional_index(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lat - self.lat_min) / self.resolution - 0.5,
            (lon - self.lon_min) / self.resolution - 0.5,
        )
    }

    /// Cell containing a point, if inside the grid.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        if !(lat >= self.lat_min && lat < self.lat_max && lon >= self.lon_min && lon < self.lon_max) {
            return None;
        }
        let i = ((lat - self.lat_min) / self.resolution).floor() as usize;
        let j = ((lon - self.lon_min) / self.resolution).floor() as usize;
        Some((i.min(self.n_lat - 1), j.min(self.n_lon - 1)))
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.cell_of(lat, lon).is_some()
    }
}

/// Cell-centre coordinates of a grid, both strictly increasing.
pub fn make_grid(spec: &GridSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let lats = (0..spec.n_lat).map(|i| spec.lat_center(i)).collect();
    let lons = (0..spec.n_lon).map(|j| spec.lon_center(j)).collect();
    Ok((lats, lons))
}

/// One variable on a grid for one day. `mask[k] == true` marks an
/// observed / valid cell. Storage is row-major `[lat, lon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedField {
    pub variable: Variable,
    pub day: i64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GriddedField {
    pub fn new(variable: Variable, day: i64, n_lat: usize, n_lon: usize, values: Vec<f64>, mask: Vec<bool>) -> Self {
        assert_eq!(values.len(), n_lat * n_lon, "values length mismatch");
        assert_eq!(mask.len(), n_lat * n_lon, "mask length mismatch");
        GriddedField {
            variable,
            day,
            n_lat,
            n_lon,
            values,
            mask,
        }
    }

    pub fn filled(variable: Variable, day: i64, n_lat: usize, n_lon: usize, value: f64, observed: bool) -> Self {
        let n = n_lat * n_lon;
        Self::new(variable, day, n_lat, n_lon, vec![value; n], vec![observed; n])
    }

    pub fn empty_like(&self, variable: Variable) -> Self {
        Self::filled(variable, self.day, self.n_lat, self.n_lon, 0.0, false)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_lon + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_lon + j]
    }

    #[inline]
    pub fn valid(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_lon + j]
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.n_lat != grid.n_lat || self.n_lon != grid.n_lon {
            return Err(Error::input(format!(
                "{} field is {}x{} but grid is {}x{}",
                self.variable, self.n_lat, self.n_lon, grid.n_lat, grid.n_lon
            )));
        }
        Ok(())
    }

    /// Bilinear interpolation at a geographic point.
    ///
    /// The cell containing the point must be valid; invalid corners are
    /// dropped and the remaining weights renormalised.
    pub fn interpolate(&self, grid: &GridSpec, lat: f64, lon: f64) -> Option<f64> {
        let (ci, cj) = grid.cell_of(lat, lon)?;
        if !self.valid(ci, cj) {
            return None;
        }
        let (r, c) = grid.fractional_index(lat, lon);
        // coordinates reconstructed from cell centres carry rounding noise
        let snap = |x: f64| if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
        let r = snap(r).clamp(0.0, (self.n_lat - 1) as f64);
        let c = snap(c).clamp(0.0, (self.n_lon - 1) as f64);
        let i0 = r.floor() as usize;
        let j0 = c.floor() as usize;
        let i1 = (i0 + 1).min(self.n_lat - 1);
        let j1 = (j0 + 1).min(self.n_lon - 1);
        let ti = r - i0 as f64;
        let tj = c - j0 as f64;
        let corners = [
            (i0, j0, (1.0 - ti) * (1.0 - tj)),
            (i0, j1, (1.0 - ti) * tj),
            (i1, j0, ti * (1.0 - tj)),
            (i1, j1, ti * tj),
        ];
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (i, j, w) in corners {
            if w > 0.0 && self.valid(i, j) {
                acc += w * self.get(i, j);
                wsum += w;
            }
        }
        (wsum > 0.0).then(|| acc / wsum)
    }

    /// Value of the cell containing the point.
    pub fn nearest(&self, grid: &GridSpec, lat: f64, lon: f64) -> Option<f64> {
        let (i, j) = grid.cell_of(lat, lon)?;
        self.valid(i, j).then(|| self.get(i, j))
    }
}

/// A named geographic region. A point belongs to it when its latitude falls
/// in any of `lat_ranges` and its longitude in `lon_range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub lat_ranges: Vec<(f64, f64)>,
    pub lon_range: (f64, f64),
}

impl RegionSpec {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.lat_ranges.iter().any(|&(a, b)| lat >= a && lat <= b)
            && lon >= self.lon_range.0
            && lon <= self.lon_range.1
    }

    /// Rectangle covering the whole grid.
    pub fn whole_grid(grid: &GridSpec) -> Self {
        RegionSpec {
            name: "Domain".to_string(),
            lat_ranges: vec![(grid.lat_min, grid.lat_max)],
            lon_range: (grid.lon_min, grid.lon_max),
        }
    }
}

/// The built-in evaluation regions.
pub fn regions() -> Vec<RegionSpec> {
    vec![
        RegionSpec {
            name: "Global".to_string(),
            lat_ranges: vec![(-60.0, -20.0), (20.0, 60.0)],
            lon_range: (-180.0, 180.0),
        },
        RegionSpec {
            name: "Mediterranean".to_string(),
            lat_ranges: vec![(30.0, 46.0)],
            lon_range: (-6.0, 36.0),
        },
        RegionSpec {
            name: "Gulf Stream".to_string(),
            lat_ranges: vec![(20.0, 45.0)],
            lon_range: (-99.0, -34.0),
        },
        RegionSpec {
            name: "Agulhas".to_string(),
            lat_ranges: vec![(-55.0, -30.0)],
            lon_range: (14.0, 74.0),
        },
    ]
}

pub fn region(name: &str) -> Result<RegionSpec> {
    regions()
        .into_iter()
        .find(|r| r.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::config(format!("unknown region `{name}`")))
}

/// A rectangular crop of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub center_lat: f64,
    pub center_lon: f64,
}

/// Geographic centre of the `h x w` crop anchored at `(row, col)`.
pub fn patch_center(grid: &GridSpec, row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
    (
        grid.lat_min + (row as f64 + h as f64 / 2.0) * grid.resolution,
        grid.lon_min + (col as f64 + w as f64 / 2.0) * grid.resolution,
    )
}

pub fn crop_patch(field: &GriddedField, grid: &GridSpec, row: usize, col: usize, h: usize, w: usize) -> Result<Patch> {
    field.check_grid(grid)?;
    if h == 0 || w == 0 || row + h > field.n_lat || col + w > field.n_lon {
        return Err(Error::input(format!(
            "crop {h}x{w} at ({row}, {col}) exceeds {}x{} grid",
            field.n_lat, field.n_lon
        )));
    }
    let mut values = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for i in row..row + h {
        let start = i * field.n_lon + col;
        values.extend_from_slice(&field.values[start..start + w]);
        mask.extend_from_slice(&field.mask[start..start + w]);
    }
    let (center_lat, center_lon) = patch_center(grid, row, col, h, w);
    Ok(Patch {
        row,
        col,
        h,
        w,
        values,
        mask,
        center_lat,
        center_lon,
    })
}
