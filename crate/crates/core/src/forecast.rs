//! Tiled domain forecasts with Gaussian-weighted patch merging, plus the
//! persistence baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::climatology::{denormalize, normalize};
use crate::dataset::{write_dataset, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::grid::{patch_center, Calendar, GridSpec, GriddedField, RegionSpec, Variable};
use crate::net::{forward, input_tensor, Checkpoint, InputVariable, ModelInputs, PatchCoords, OUTPUTS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_rows: usize,
    pub stride_cols: usize,
    /// `(row, col)` of each patch's top-left cell, sorted.
    pub anchors: Vec<(usize, usize)>,
}

fn axis_anchors(lo: usize, hi: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut a = lo;
    while a + patch <= hi {
        out.push(a);
        a += stride;
    }
    let last = hi - patch;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Cell index span `[lo, hi)` of the region's bounding box on the grid.
fn region_span(grid: &GridSpec, region: &RegionSpec) -> ((usize, usize), (usize, usize)) {
    let lat_lo = region.lat_ranges.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let lat_hi = region.lat_ranges.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let to_span = |lo: f64, hi: f64, min: f64, n: usize| {
        let a = ((lo - min) / grid.resolution + 1e-9).floor().max(0.0) as usize;
        let b = ((hi - min) / grid.resolution - 1e-9).ceil().max(0.0) as usize;
        (a.min(n), b.min(n))
    };
    (
        to_span(lat_lo, lat_hi, grid.lat_min, grid.n_lat),
        to_span(region.lon_range.0, region.lon_range.1, grid.lon_min, grid.n_lon),
    )
}

pub fn tile_domain(grid: &GridSpec, region: &RegionSpec, patch: (usize, usize), stride: (usize, usize)) -> Result<TilePlan> {
    let (ph, pw) = patch;
    let (sr, sc) = stride;
    if ph == 0 || pw == 0 || sr == 0 || sc == 0 {
        return Err(Error::config("patch size and stride must be positive"));
    }
    if sr > ph || sc > pw {
        return Err(Error::config(format!("stride {sr}x{sc} exceeds patch {ph}x{pw}")));
    }
    let ((r0, r1), (c0, c1)) = region_span(grid, region);
    if r1 - r0 < ph || c1 - c0 < pw {
        return Err(Error::config(format!(
            "patch {ph}x{pw} is larger than the region extent {}x{}",
            r1 - r0,
            c1 - c0
        )));
    }
    let rows = axis_anchors(r0, r1, ph, sr);
    let cols = axis_anchors(c0, c1, pw, sc);
    let anchors = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TilePlan {
        patch_h: ph,
        patch_w: pw,
        stride_rows: sr,
        stride_cols: sc,
        anchors,
    })
}

/// One patch result: top-left anchor and row-major `h × w` values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchOutput {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

/// Gaussian-weighted average of overlapping patches on an `n_lat × n_lon`
/// grid. Returns values and coverage mask; uncovered cells hold 0.
pub fn gaussian_merge(
    patches: &[PatchOutput],
    patch: (usize, usize),
    extent: (usize, usize),
    sigma_cells: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let (h, w) = patch;
    let (n_lat, n_lon) = extent;
    if patches.is_empty() {
        return Err(Error::input("gaussian_merge needs at least one patch"));
    }
    if !(sigma_cells > 0.0) {
        return Err(Error::config("merge sigma must be positive"));
    }
    for p in patches {
        if p.row + h > n_lat || p.col + w > n_lon || p.values.len() != h * w {
            return Err(Error::input(format!("patch at ({}, {}) does not fit the extent", p.row, p.col)));
        }
    }
    // A fixed summation order makes the result independent of input order.
    let mut order: Vec<&PatchOutput> = patches.iter().collect();
    order.sort_by(|a, b| {
        (a.row, a.col).cmp(&(b.row, b.col)).then_with(|| {
            a.values
                .iter()
                .map(|x| x.to_bits())
                .cmp(b.values.iter().map(|x| x.to_bits()))
        })
    });
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let kernel: Vec<f64> = (0..h * w)
        .map(|k| {
            let (di, dj) = ((k / w) as f64 - ci, (k % w) as f64 - cj);
            (-(di * di + dj * dj) / (2.0 * sigma_cells * sigma_cells)).exp()
        })
        .collect();
    let mut total = vec![0.0; n_lat * n_lon];
    for p in &order {
        for i in 0..h {
            for j in 0..w {
                total[(p.row + i) * n_lon + p.col + j] += kernel[i * w + j];
            }
        }
    }
    let mut merged = vec![0.0; n_lat * n_lon];
    for p in &order {
        for i in 0..h {
            for j in 0..w {
                let cell = (p.row + i) * n_lon + p.col + j;
                merged[cell] += kernel[i * w + j] / total[cell] * p.values[i * w + j];
            }
        }
    }
    let mask = total.iter().map(|&t| t > 0.0).collect();
    Ok((merged, mask))
}

/// Read access to gridded inputs, one field per variable and day.
pub trait InputSource {
    fn grid(&self) -> Result<GridSpec>;
    fn calendar(&self) -> Calendar;
    fn land(&self) -> Result<Vec<bool>>;
    fn field(&self, variable: InputVariable, day: i64) -> Result<GriddedField>;
}

impl InputSource for crate::train::Observations {
    fn grid(&self) -> Result<GridSpec> {
        crate::train::Observations::grid(self).cloned()
    }
    fn calendar(&self) -> Calendar {
        self.calendar
    }
    fn land(&self) -> Result<Vec<bool>> {
        let n = InputSource::grid(self)?.n_cells();
        Ok(if self.land.is_empty() { vec![false; n] } else { self.land.clone() })
    }
    fn field(&self, variable: InputVariable, day: i64) -> Result<GriddedField> {
        self.input_field(variable, day).cloned()
    }
}

/// On-disk observation datasets, one directory per input variable.
pub struct DatasetInputs {
    pub sources: BTreeMap<InputVariable, Dataset>,
}

impl InputSource for DatasetInputs {
    fn grid(&self) -> Result<GridSpec> {
        self.sources
            .values()
            .next()
            .map(|d| d.grid().clone())
            .ok_or_else(|| Error::input("no input datasets"))
    }
    fn calendar(&self) -> Calendar {
        self.sources.values().next().map(|d| d.meta.calendar).unwrap_or_default()
    }
    fn land(&self) -> Result<Vec<bool>> {
        self.sources
            .values()
            .next()
            .ok_or_else(|| Error::input("no input datasets"))?
            .land()
    }
    fn field(&self, variable: InputVariable, day: i64) -> Result<GriddedField> {
        let ds = self
            .sources
            .get(&variable)
            .ok_or_else(|| Error::input(format!("no dataset for input {variable}")))?;
        ds.read_day(variable.physical(), day)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastProduct {
    pub issue_day: i64,
    pub grid: GridSpec,
    pub calendar: Calendar,
    /// `leads[l - 1]` holds `[SSH, U, V]` valid on day `issue_day + l`.
    pub leads: Vec<[GriddedField; 3]>,
    pub checkpoint_hash: String,
    pub config: serde_json::Value,
}

impl ForecastProduct {
    pub fn n_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn field(&self, lead: usize, variable: Variable) -> Option<&GriddedField> {
        let k = OUTPUTS.iter().position(|&v| v == variable)?;
        self.leads.get(lead.checked_sub(1)?).map(|f| &f[k])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut meta = DatasetMeta::new(
            self.grid.clone(),
            self.calendar,
            OUTPUTS.to_vec(),
            self.issue_day + 1,
            self.leads.len(),
        );
        meta.extra.insert("issue_day".into(), self.issue_day.into());
        meta.extra.insert("leads".into(), (1..=self.leads.len()).collect::<Vec<_>>().into());
        meta.extra.insert("checkpoint_hash".into(), self.checkpoint_hash.clone().into());
        meta.extra.insert("config".into(), self.config.clone());
        let mut fields = BTreeMap::new();
        for (k, &v) in OUTPUTS.iter().enumerate() {
            fields.insert(v, self.leads.iter().map(|l| l[k].clone()).collect());
        }
        write_dataset(dir, &meta, &fields, None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ds = Dataset::open(dir)?;
        let issue_day = ds
            .meta
            .extra
            .get("issue_day")
            .and_then(|v| v.as_i64())
            .ok_or_else(|| Error::input(format!("{} is not a forecast product (no issue_day)", dir.display())))?;
        let leads = (1..=ds.meta.n_days as i64)
            .map(|l| {
                Ok([
                    ds.read_day(Variable::Ssh, issue_day + l)?,
                    ds.read_day(Variable::U, issue_day + l)?,
                    ds.read_day(Variable::V, issue_day + l)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForecastProduct {
            issue_day,
            grid: ds.meta.grid.clone(),
            calendar: ds.meta.calendar,
            leads,
            checkpoint_hash: ds
                .meta
                .extra
                .get("checkpoint_hash")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
            config: ds.meta.extra.get("config").cloned().unwrap_or(serde_json::Value::Null),
        })
    }
}

/// Merge settings. `None` picks stride `patch/2` and sigma `patch/4`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub stride: Option<usize>,
    pub sigma_cells: Option<f64>,
}

impl TileConfig {
    pub fn plan(&self, grid: &GridSpec, region: &RegionSpec, h: usize, w: usize) -> Result<TilePlan> {
        let s = self.stride;
        tile_domain(grid, region, (h, w), (s.unwrap_or((h / 2).max(1)), s.unwrap_or((w / 2).max(1))))
    }

    pub fn sigma(&self, h: usize, w: usize) -> f64 {
        self.sigma_cells.unwrap_or(h.max(w) as f64 / 4.0)
    }
}

/// Forecast issued on day `issue_day` from the `t_in` days ending there.
/// Only days `issue_day - t_in + 1 ..= issue_day` are ever requested from
/// `source`.
pub fn forecast(
    ckpt: &Checkpoint,
    source: &dyn InputSource,
    issue_day: i64,
    plan: &TilePlan,
    sigma_cells: f64,
) -> Result<ForecastProduct> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    if plan.patch_h != cfg.patch_h || plan.patch_w != cfg.patch_w {
        return Err(Error::config(format!(
            "tile plan patch {}x{} differs from model patch {}x{}",
            plan.patch_h, plan.patch_w, cfg.patch_h, cfg.patch_w
        )));
    }
    let grid = source.grid()?;
    let cal = source.calendar();
    let land = source.land()?;
    let days: Vec<i64> = (0..cfg.t_in as i64).map(|s| issue_day - cfg.t_in as i64 + 1 + s).collect();
    let mut fields: BTreeMap<InputVariable, Vec<GriddedField>> = BTreeMap::new();
    let mut gaps = Vec::new();
    for &v in &cfg.input_variables {
        let clim = ckpt.climatology.get(v.physical())?;
        let mut series = Vec::with_capacity(days.len());
        for &d in &days {
            match source.field(v, d) {
                Ok(mut f) => {
                    f.variable = v.physical();
                    let mut n = normalize(&f, clim, &grid, &cal)?;
                    for (x, &m) in n.values.iter_mut().zip(&n.mask) {
                        if !m {
                            *x = 0.0;
                        }
                    }
                    series.push(n);
                }
                Err(Error::Input(_)) => gaps.push(format!("{v} day {d}")),
                Err(e) => return Err(e),
            }
        }
        fields.insert(v, series);
    }
    if !gaps.is_empty() {
        return Err(Error::input(format!("missing input days: {}", gaps.join(", "))));
    }
    let (h, w) = (cfg.patch_h, cfg.patch_w);
    let mut anchors = plan.anchors.clone();
    anchors.sort_unstable();
    let mut outputs: Vec<Vec<Vec<PatchOutput>>> = vec![vec![Vec::new(); 3]; cfg.t_out];
    for &(row, col) in &anchors {
        let all_land = (row..row + h).all(|i| land[i * grid.n_lon + col..i * grid.n_lon + col + w].iter().all(|&l| l));
        if all_land {
            continue;
        }
        let mut inputs = ModelInputs::new();
        for (&v, series) in &fields {
            let (vals, masks): (Vec<_>, Vec<_>) = series
                .iter()
                .map(|f| {
                    let p = crate::grid::crop_patch(f, &grid, row, col, h, w).expect("plan inside grid");
                    (p.values, p.mask)
                })
                .unzip();
            inputs.insert(v, input_tensor(&vals, &masks, h, w));
        }
        let (center_lat, center_lon) = patch_center(&grid, row, col, h, w);
        let coords = PatchCoords {
            center_lat,
            center_lon,
            week_index: cal.week_index(issue_day),
            cell_deg: grid.resolution,
        };
        let out = forward(cfg, &ckpt.params, &inputs, &coords)?;
        for (k, &var) in OUTPUTS.iter().enumerate() {
            let t = out.get(var);
            for lead in 0..cfg.t_out {
                let norm = t.data[lead * h * w..(lead + 1) * h * w].to_vec();
                let day = issue_day + lead as i64 + 1;
                // Denormalise per patch so overlapping patches blend in physical units.
                let mut full = GriddedField::filled(var, day, grid.n_lat, grid.n_lon, 0.0, false);
                for i in 0..h {
                    for j in 0..w {
                        let c = (row + i) * grid.n_lon + col + j;
                        full.values[c] = norm[i * w + j];
                        full.mask[c] = true;
                    }
                }
                let phys = denormalize(&full, ckpt.climatology.get(var)?, &grid, &cal)?;
                let values = crate::grid::crop_patch(&phys, &grid, row, col, h, w)?.values;
                outputs[lead][k].push(PatchOutput { row, col, values });
            }
        }
    }
    if outputs[0][0].is_empty() {
        return Err(Error::input("tile plan covers no ocean"));
    }
    let leads = (0..cfg.t_out)
        .map(|lead| {
            let day = issue_day + lead as i64 + 1;
            let mut out: Vec<GriddedField> = Vec::with_capacity(3);
            for (k, &var) in OUTPUTS.iter().enumerate() {
                let (values, mask) = gaussian_merge(&outputs[lead][k], (h, w), (grid.n_lat, grid.n_lon), sigma_cells)?;
                let mask: Vec<bool> = mask.iter().zip(&land).map(|(&m, &l)| m && !l).collect();
                let values = values.iter().zip(&mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
                out.push(GriddedField::new(var, day, grid.n_lat, grid.n_lon, values, mask));
            }
            Ok(out.try_into().expect("three outputs"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastProduct {
        issue_day,
        grid,
        calendar: cal,
        leads,
        checkpoint_hash: ckpt.content_hash(),
        config: serde_json::json!({
            "model": cfg,
            "stage": ckpt.stage,
            "patch": [h, w],
            "stride": [plan.stride_rows, plan.stride_cols],
            "sigma_cells": sigma_cells,
        }),
    })
}

/// Holds the day-`issue_day` reference fields constant over every lead.
pub fn persistence_forecast(
    issue_day: i64,
    reference: &[GriddedField; 3],
    grid: &GridSpec,
    calendar: Calendar,
    n_leads: usize,
    label: &str,
) -> ForecastProduct {
    let leads = (1..=n_leads as i64)
        .map(|l| {
            reference.clone().map(|mut f| {
                f.day = issue_day + l;
                f
            })
        })
        .collect();
    ForecastProduct {
        issue_day,
        grid: grid.clone(),
        calendar,
        leads,
        checkpoint_hash: format!("persistence:{label}"),
        config: serde_json::json!({ "persistence": label }),
    }
}

/// PNG snapshot of SSH for one lead with current arrows every `arrow_every`
/// cells. Pixels are `scale × scale` per cell.
pub fn render_png(product: &ForecastProduct, lead: usize, arrow_every: usize, scale: usize, path: &Path) -> Result<()> {
    let ssh = product
        .field(lead, Variable::Ssh)
        .ok_or_else(|| Error::input(format!("product has no lead {lead}")))?;
    let u = product.field(lead, Variable::U).expect("lead checked");
    let v = product.field(lead, Variable::V).expect("lead checked");
    let (n_lat, n_lon) = (ssh.n_lat, ssh.n_lon);
    let scale = scale.max(1);
    let (pw, ph) = (n_lon * scale, n_lat * scale);
    let valid: Vec<f64> = ssh.values.iter().zip(&ssh.mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
    let lo = valid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = vec![0u8; pw * ph * 3];
    for py in 0..ph {
        // Image rows run north to south.
        let i = n_lat - 1 - py / scale;
        for px in 0..pw {
            let j = px / scale;
            let o = (py * pw + px) * 3;
            let c = if ssh.valid(i, j) {
                let t = (ssh.get(i, j) - lo) / span;
                [(255.0 * t) as u8, 64, (255.0 * (1.0 - t)) as u8]
            } else {
                [40, 40, 40]
            };
            rgb[o..o + 3].copy_from_slice(&c);
        }
    }
    let max_speed = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| a.hypot(*b))
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    let step = arrow_every.max(1);
    let len = (step * scale) as f64 * 0.9;
    for i in (step / 2..n_lat).step_by(step) {
        for j in (step / 2..n_lon).step_by(step) {
            if !u.valid(i, j) || !v.valid(i, j) {
                continue;
            }
            let (x0, y0) = ((j * scale + scale / 2) as f64, ((n_lat - 1 - i) * scale + scale / 2) as f64);
            let (dx, dy) = (u.get(i, j) / max_speed * len, -v.get(i, j) / max_speed * len);
            let n = (dx.abs().max(dy.abs()).ceil() as usize).max(1);
            for s in 0..=n {
                let t = s as f64 / n as f64;
                let (x, y) = ((x0 + t * dx).round(), (y0 + t * dy).round());
                if x >= 0.0 && y >= 0.0 && (x as usize) < pw && (y as usize) < ph {
                    let o = (y as usize * pw + x as usize) * 3;
                    rgb[o..o + 3].copy_from_slice(&[255, 255, 255]);
                }
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), pw as u32, ph as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(30.0, 30.0 + 0.1 * n as f64, 0.0, 0.1 * n as f64, 0.1).unwrap()
    }

    #[test]
    fn tile_examples() {
        let g = grid(64);
        let r = RegionSpec::whole_grid(&g);
        let p = tile_domain(&g, &r, (32, 32), (16, 16)).unwrap();
        let rows: Vec<usize> = p.anchors.iter().map(|a| a.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        assert_eq!(rows, vec![0, 16, 32]);
        let g = grid(32);
        let p = tile_domain(&g, &RegionSpec::whole_grid(&g), (32, 32), (16, 16)).unwrap();
        assert_eq!(p.anchors, vec![(0, 0)]);
        assert!(matches!(tile_domain(&g, &RegionSpec::whole_grid(&g), (16, 16), (17, 8)), Err(Error::Config(_))));
        assert!(matches!(tile_domain(&g, &RegionSpec::whole_grid(&g), (40, 16), (8, 8)), Err(Error::Config(_))));
    }

    #[test]
    fn clamped_last_anchor() {
        let g = grid(50);
        let p = tile_domain(&g, &RegionSpec::whole_grid(&g), (32, 32), (16, 16)).unwrap();
        let rows: std::collections::BTreeSet<usize> = p.anchors.iter().map(|a| a.0).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![0, 16, 18]);
    }

    #[test]
    fn merge_between_values() {
        let a = PatchOutput { row: 0, col: 0, values: vec![0.0; 16] };
        let b = PatchOutput { row: 0, col: 2, values: vec![1.0; 16] };
        let (m, mask) = gaussian_merge(&[a, b], (4, 4), (4, 6), 1.0).unwrap();
        assert!(mask.iter().all(|&x| x));
        for j in 2..4 {
            assert!(m[j] > 0.0 && m[j] < 1.0);
        }
        assert!(m[2] < m[3]);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[5], 1.0);
        assert!(gaussian_merge(&[], (4, 4), (4, 6), 1.0).is_err());
    }

    #[test]
    fn persistence_constant_in_lead() {
        let g = grid(4);
        let f = |v| GriddedField::filled(v, 10, 4, 4, 0.3, true);
        let p = persistence_forecast(10, &[f(Variable::Ssh), f(Variable::U), f(Variable::V)], &g, Calendar::default(), 7, "truth");
        assert_eq!(p.leads.len(), 7);
        assert_eq!(p.leads[0][1].values, p.leads[6][1].values);
        assert_eq!(p.leads[6][1].day, 17);
    }
}
