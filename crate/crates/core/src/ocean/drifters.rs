//! Lagrangian drifters advected through the truth currents, their daily
//! 24-hour means, rasterisation onto the grid and CSV persistence.

use std::path::Path;

use chrono::{NaiveDateTime, NaiveTime};
use rand::Rng as _;

use super::world::OceanWorld;
use crate::error::{Error, Result};
use crate::grid::{Calendar, GridSpec, GriddedField, Variable};
use crate::rng;

const SECONDS_PER_HOUR: f64 = 3600.0;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrifterSample {
    pub day: i64,
    /// Hour of day for hourly samples; daily means carry hour 12.
    pub hour: u32,
    pub lat: f64,
    pub lon: f64,
    pub u: f64,
    pub v: f64,
}

impl DrifterSample {
    pub fn speed(&self) -> f64 {
        self.u.hypot(self.v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrifterTrack {
    pub id: String,
    pub hourly: Vec<DrifterSample>,
    pub daily: Vec<DrifterSample>,
}

/// Velocity at a point on a given day, in degrees per second.
fn velocity_deg(world: &OceanWorld, d: usize, lat: f64, lon: f64) -> Option<(f64, f64, f64, f64)> {
    let grid = world.grid();
    let u = world.u_total[d].interpolate(grid, lat, lon)?;
    let v = world.v_total[d].interpolate(grid, lat, lon)?;
    let r = super::EARTH_RADIUS;
    let dlat = (v / r).to_degrees();
    let dlon = (u / (r * lat.to_radians().cos())).to_degrees();
    Some((dlat, dlon, u, v))
}

fn rk4_step(world: &OceanWorld, d: usize, lat: f64, lon: f64, dt: f64) -> Option<(f64, f64)> {
    let (k1a, k1o, _, _) = velocity_deg(world, d, lat, lon)?;
    let (k2a, k2o, _, _) = velocity_deg(world, d, lat + 0.5 * dt * k1a, lon + 0.5 * dt * k1o)?;
    let (k3a, k3o, _, _) = velocity_deg(world, d, lat + 0.5 * dt * k2a, lon + 0.5 * dt * k2o)?;
    let (k4a, k4o, _, _) = velocity_deg(world, d, lat + dt * k3a, lon + dt * k3o)?;
    Some((
        lat + dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a),
        lon + dt / 6.0 * (k1o + 2.0 * k2o + 2.0 * k3o + k4o),
    ))
}

/// Releases `n_drifters` particles at uniformly random ocean positions, each
/// on a uniformly drawn release day, and advects them hourly with RK4 in the
/// total (geostrophic plus ageostrophic) currents, held constant within a
/// day. A track ends when the particle leaves the grid or reaches a cell
/// without valid currents; only complete days produce a daily mean.
pub fn simulate_drifters(world: &OceanWorld, n_drifters: usize, seed: u64) -> Result<Vec<DrifterTrack>> {
    let n_days = world.n_days();
    if n_days < 2 {
        return Err(Error::input("drifter simulation needs at least two days"));
    }
    let grid = world.grid();
    let ocean = world.ocean_mask();
    if !ocean.iter().any(|&o| o) {
        return Err(Error::input("world has no ocean cells to release drifters in"));
    }
    let mut rng = rng::stream(seed, "drifters", 0);
    let mut tracks = Vec::with_capacity(n_drifters);
    for n in 0..n_drifters {
        let (mut lat, mut lon) = loop {
            let lat = rng.random_range(grid.lat_min..grid.lat_max);
            let lon = rng.random_range(grid.lon_min..grid.lon_max);
            if let Some((i, j)) = grid.cell_of(lat, lon) {
                if ocean[i * grid.n_lon + j] {
                    break (lat, lon);
                }
            }
        };
        let release = rng.random_range(0..n_days - 1);
        let mut track = DrifterTrack {
            id: format!("D{n:05}"),
            hourly: Vec::new(),
            daily: Vec::new(),
        };
        'days: for d in release..n_days {
            let mut day_samples = Vec::with_capacity(24);
            for hour in 0..24 {
                let Some((_, _, u, v)) = velocity_deg(world, d, lat, lon) else {
                    track.hourly.extend(day_samples);
                    break 'days;
                };
                day_samples.push(DrifterSample {
                    day: d as i64,
                    hour,
                    lat,
                    lon,
                    u,
                    v,
                });
                match rk4_step(world, d, lat, lon, SECONDS_PER_HOUR) {
                    Some((a, o)) => {
                        lat = a;
                        lon = o;
                    }
                    None => {
                        track.hourly.extend(day_samples);
                        break 'days;
                    }
                }
            }
            track.daily.push(daily_mean(&day_samples));
            track.hourly.extend(day_samples);
        }
        tracks.push(track);
    }
    Ok(tracks)
}

/// Mean of a full day of hourly samples, stamped at noon.
pub fn daily_mean(samples: &[DrifterSample]) -> DrifterSample {
    let n = samples.len() as f64;
    let sum = |f: fn(&DrifterSample) -> f64| samples.iter().map(f).sum::<f64>() / n;
    DrifterSample {
        day: samples[0].day,
        hour: 12,
        lat: sum(|s| s.lat),
        lon: sum(|s| s.lon),
        u: sum(|s| s.u),
        v: sum(|s| s.v),
    }
}

/// Grids the daily drifter means of one day: each sample writes into the
/// cell containing it and collisions are averaged.
pub fn rasterize_drifters(tracks: &[DrifterTrack], grid: &GridSpec, day: i64) -> (GriddedField, GriddedField) {
    let n = grid.n_cells();
    let mut su = vec![0.0; n];
    let mut sv = vec![0.0; n];
    let mut count = vec![0u32; n];
    for s in tracks.iter().flat_map(|t| &t.daily).filter(|s| s.day == day) {
        if let Some((i, j)) = grid.cell_of(s.lat, s.lon) {
            let k = i * grid.n_lon + j;
            su[k] += s.u;
            sv[k] += s.v;
            count[k] += 1;
        }
    }
    let mask: Vec<bool> = count.iter().map(|&c| c > 0).collect();
    let mean = |s: Vec<f64>| -> Vec<f64> {
        s.iter()
            .zip(&count)
            .map(|(&x, &c)| if c > 0 { x / c as f64 } else { 0.0 })
            .collect()
    };
    (
        GriddedField::new(Variable::U, day, grid.n_lat, grid.n_lon, mean(su), mask.clone()),
        GriddedField::new(Variable::V, day, grid.n_lat, grid.n_lon, mean(sv), mask),
    )
}

/// Writes daily means as `id,timestamp_iso8601,lat,lon,u,v`.
pub fn write_drifters_csv(path: &Path, tracks: &[DrifterTrack], calendar: &Calendar) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    w.write_record(["id", "timestamp_iso8601", "lat", "lon", "u", "v"])?;
    for t in tracks {
        for s in &t.daily {
            let ts = calendar
                .date(s.day)
                .and_time(NaiveTime::from_hms_opt(s.hour, 0, 0).expect("valid hour"));
            w.write_record([
                t.id.clone(),
                ts.format(TIMESTAMP_FORMAT).to_string(),
                format!("{}", s.lat),
                format!("{}", s.lon),
                format!("{}", s.u),
                format!("{}", s.v),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a drifter CSV back into tracks holding daily samples, in file order.
pub fn read_drifters_csv(path: &Path, calendar: &Calendar) -> Result<Vec<DrifterTrack>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let expected = ["id", "timestamp_iso8601", "lat", "lon", "u", "v"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::input(format!(
            "{}: expected header {}",
            path.display(),
            expected.join(",")
        )));
    }
    let mut tracks: Vec<DrifterTrack> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::input(format!("{} row {}: bad {what}", path.display(), line + 2));
        let ts = NaiveDateTime::parse_from_str(&rec[1], TIMESTAMP_FORMAT).map_err(|_| bad("timestamp"))?;
        let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what));
        let sample = DrifterSample {
            day: calendar.day_of(ts.date()),
            hour: chrono::Timelike::hour(&ts),
            lat: num(2, "lat")?,
            lon: num(3, "lon")?,
            u: num(4, "u")?,
            v: num(5, "v")?,
        };
        match tracks.last_mut() {
            Some(t) if t.id == rec[0] => t.daily.push(sample),
            _ => tracks.push(DrifterTrack {
                id: rec[0].to_string(),
                hourly: Vec::new(),
                daily: vec![sample],
            }),
        }
    }
    Ok(tracks)
}
