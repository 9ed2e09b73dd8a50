//! On-disk gridded dataset format.
//!
//! A dataset is a directory holding `meta.json` plus, per variable,
//! `<VAR>.f32` (little-endian `f32`, C-order `[day, lat, lon]`) and
//! `<VAR>.mask` (one byte per value, `1` = observed). Unobserved values are
//! written as the fill sentinel. An optional `land.mask` (`[lat, lon]`,
//! `1` = land) carries the land map.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Calendar, GridSpec, GriddedField, Variable};

pub const FILL_VALUE: f32 = -9999.0;
pub const META_FILE: &str = "meta.json";
pub const LAND_FILE: &str = "land.mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub grid: GridSpec,
    pub calendar: Calendar,
    pub variables: Vec<Variable>,
    pub day_start: i64,
    pub n_days: usize,
    pub fill_value: f32,
    pub has_land: bool,
    /// Free-form extension keys (forecast products add `issue_day`, `leads`
    /// and `checkpoint_hash`).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DatasetMeta {
    pub fn new(grid: GridSpec, calendar: Calendar, variables: Vec<Variable>, day_start: i64, n_days: usize) -> Self {
        DatasetMeta {
            grid,
            calendar,
            variables,
            day_start,
            n_days,
            fill_value: FILL_VALUE,
            has_land: false,
            extra: serde_json::Map::new(),
        }
    }

    pub fn day_end(&self) -> i64 {
        self.day_start + self.n_days as i64
    }
}

fn values_path(dir: &Path, v: Variable) -> PathBuf {
    dir.join(format!("{}.f32", v.name()))
}

fn mask_path(dir: &Path, v: Variable) -> PathBuf {
    dir.join(format!("{}.mask", v.name()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes a dataset. Every variable in `meta.variables` must have exactly
/// `meta.n_days` fields, one per consecutive day starting at `meta.day_start`.
pub fn write_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    fields: &BTreeMap<Variable, Vec<GriddedField>>,
    land: Option<&[bool]>,
) -> Result<()> {
    meta.grid.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_cells = meta.grid.n_cells();
    for &var in &meta.variables {
        let series = fields
            .get(&var)
            .ok_or_else(|| Error::input(format!("dataset is missing variable {var}")))?;
        if series.len() != meta.n_days {
            return Err(Error::input(format!(
                "variable {var} has {} days, expected {}",
                series.len(),
                meta.n_days
            )));
        }
        let mut vbytes = Vec::with_capacity(series.len() * n_cells * 4);
        let mut mbytes = Vec::with_capacity(series.len() * n_cells);
        for (k, f) in series.iter().enumerate() {
            f.check_grid(&meta.grid)?;
            if f.day != meta.day_start + k as i64 || f.variable != var {
                return Err(Error::input(format!(
                    "field {k} of {var} is {} day {}, expected day {}",
                    f.variable,
                    f.day,
                    meta.day_start + k as i64
                )));
            }
            for (&v, &m) in f.values.iter().zip(&f.mask) {
                let x = if m { v as f32 } else { meta.fill_value };
                vbytes.extend_from_slice(&x.to_le_bytes());
                mbytes.push(u8::from(m));
            }
        }
        write_file(&values_path(dir, var), &vbytes)?;
        write_file(&mask_path(dir, var), &mbytes)?;
    }
    let mut meta = meta.clone();
    meta.has_land = land.is_some();
    if let Some(land) = land {
        if land.len() != n_cells {
            return Err(Error::input("land mask size does not match grid"));
        }
        let bytes: Vec<u8> = land.iter().map(|&l| u8::from(l)).collect();
        write_file(&dir.join(LAND_FILE), &bytes)?;
    }
    let json = serde_json::to_string_pretty(&meta)?;
    write_file(&dir.join(META_FILE), json.as_bytes())
}

/// Read access to a dataset directory. Reads are per day, so a caller that
/// only asks for days up to `T` never touches bytes of later days.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        meta.grid.validate()?;
        Ok(Dataset { dir, meta })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.meta.grid
    }

    pub fn has_variable(&self, v: Variable) -> bool {
        self.meta.variables.contains(&v)
    }

    pub fn has_day(&self, day: i64) -> bool {
        day >= self.meta.day_start && day < self.meta.day_end()
    }

    pub fn read_day(&self, var: Variable, day: i64) -> Result<GriddedField> {
        if !self.has_variable(var) {
            return Err(Error::input(format!(
                "dataset {} has no variable {var}",
                self.dir.display()
            )));
        }
        if !self.has_day(day) {
            return Err(Error::input(format!(
                "dataset {} has no day {day} (range {}..{})",
                self.dir.display(),
                self.meta.day_start,
                self.meta.day_end()
            )));
        }
        let n = self.meta.grid.n_cells();
        let offset = (day - self.meta.day_start) as u64 * n as u64;
        let vpath = values_path(&self.dir, var);
        let mpath = mask_path(&self.dir, var);
        let mut vbuf = vec![0u8; n * 4];
        let mut mbuf = vec![0u8; n];
        let mut vf = File::open(&vpath).map_err(|e| Error::io(&vpath, e))?;
        vf.seek(SeekFrom::Start(offset * 4)).map_err(|e| Error::io(&vpath, e))?;
        vf.read_exact(&mut vbuf).map_err(|e| Error::io(&vpath, e))?;
        let mut mf = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        mf.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&mpath, e))?;
        mf.read_exact(&mut mbuf).map_err(|e| Error::io(&mpath, e))?;
        let mask: Vec<bool> = mbuf.iter().map(|&b| b != 0).collect();
        let values = vbuf
            .chunks_exact(4)
            .zip(&mask)
            .map(|(c, &m)| {
                if m {
                    f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                } else {
                    0.0
                }
            })
            .collect();
        Ok(GriddedField::new(
            var,
            day,
            self.meta.grid.n_lat,
            self.meta.grid.n_lon,
            values,
            mask,
        ))
    }

    pub fn read_all(&self, var: Variable) -> Result<Vec<GriddedField>> {
        (self.meta.day_start..self.meta.day_end())
            .map(|d| self.read_day(var, d))
            .collect()
    }

    /// Land map (`true` = land); all-ocean when the dataset carries none.
    pub fn land(&self) -> Result<Vec<bool>> {
        let n = self.meta.grid.n_cells();
        if !self.meta.has_land {
            return Ok(vec![false; n]);
        }
        let path = self.dir.join(LAND_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != n {
            return Err(Error::input(format!("{} has the wrong size", path.display())));
        }
        Ok(bytes.iter().map(|&b| b != 0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read_day() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(30.0, 30.3, 0.0, 0.2, 0.1).unwrap();
        let series: Vec<_> = (0..3)
            .map(|d| {
                let mut f = GriddedField::filled(Variable::Ssh, d, 3, 2, 0.25 * d as f64, true);
                f.mask[1] = false;
                f
            })
            .collect();
        let mut fields = BTreeMap::new();
        fields.insert(Variable::Ssh, series.clone());
        let meta = DatasetMeta::new(grid, Calendar::default(), vec![Variable::Ssh], 0, 3);
        let land = vec![false, true, false, false, false, false];
        write_dataset(dir.path(), &meta, &fields, Some(&land)).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let f = ds.read_day(Variable::Ssh, 2).unwrap();
        assert_eq!(f.values[0], 0.5);
        assert_eq!(f.values[1], 0.0);
        assert!(!f.mask[1]);
        assert_eq!(ds.land().unwrap(), land);
        assert!(ds.read_day(Variable::Ssh, 3).is_err());
        assert!(ds.read_day(Variable::U, 0).is_err());

        let raw = std::fs::read(dir.path().join("SSH.f32")).unwrap();
        assert_eq!(raw.len(), 3 * 6 * 4);
        assert_eq!(&raw[4..8], &FILL_VALUE.to_le_bytes());
    }
}
