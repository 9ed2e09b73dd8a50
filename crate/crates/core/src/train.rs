//! Three-stage training: masked, magnitude-weighted regression against
//! nadir SSH and an L4 analog, then SWOT swaths, then drifters.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::climatology::{normalize, ClimatologySet};
use crate::error::{Error, Result};
use crate::grid::{Calendar, GridSpec, GriddedField, Variable};
use crate::net::{
    decoder_group, input_tensor, BoundParams, InputVariable, ModelConfig, ModelInputs, ParameterSet, PatchCoords,
};
use crate::ocean::{rasterize_drifters, swath_geostrophy, DrifterTrack, GeophysParams};
use crate::rng;
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::S1 => "stage1",
            Stage::S2 => "stage2",
            Stage::S3 => "stage3",
        }
    }

    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::S1),
            2 => Ok(Stage::S2),
            3 => Ok(Stage::S3),
            _ => Err(Error::config(format!("unknown stage {n}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which gridded analysis supervises the Stage-1 currents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetSource {
    #[default]
    #[serde(rename = "L4_ANALOG")]
    L4Analog,
    #[serde(rename = "NEUROST_ANALOG")]
    NeurostAnalog,
}

impl TargetSource {
    pub fn name(self) -> &'static str {
        match self {
            TargetSource::L4Analog => "L4_ANALOG",
            TargetSource::NeurostAnalog => "NEUROST_ANALOG",
        }
    }
}

fn default_batch() -> usize {
    8
}
fn default_v_ref() -> f64 {
    0.25
}
fn default_w_max() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patches_per_epoch: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Group names; `encoder[*]` matches every encoder arm.
    #[serde(default)]
    pub frozen_groups: Vec<String>,
    #[serde(default)]
    pub target_source: TargetSource,
    #[serde(default = "default_v_ref")]
    pub v_ref: f64,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
}

impl StageConfig {
    /// Desk-scale defaults. Stage 3 fine-tunes only the current decoders.
    pub fn default_for(stage: Stage) -> Self {
        let (learning_rate, epochs, frozen_groups) = match stage {
            Stage::S1 => (1e-3, 50, vec![]),
            Stage::S2 => (1e-4, 20, vec![]),
            Stage::S3 => (
                1e-4,
                10,
                vec![
                    "encoder[*]".to_string(),
                    "pos_embed".to_string(),
                    "translator".to_string(),
                    "decoder[SSH]".to_string(),
                ],
            ),
        };
        StageConfig {
            stage,
            learning_rate,
            weight_decay: 1e-3,
            epochs,
            patches_per_epoch: 64,
            batch_size: default_batch(),
            frozen_groups,
            target_source: TargetSource::L4Analog,
            v_ref: default_v_ref(),
            w_max: default_w_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.v_ref > 0.0) || !(self.w_max >= 1.0) {
            return Err(Error::config("v_ref must be positive and w_max at least 1"));
        }
        Ok(())
    }

    /// Whether a group is frozen in this stage. Stage 3 always freezes the
    /// SSH decoder.
    pub fn freezes(&self, group: &str) -> bool {
        if self.stage == Stage::S3 && group == decoder_group(Variable::Ssh) {
            return true;
        }
        self.frozen_groups.iter().any(|pat| match pat.strip_suffix("[*]") {
            Some(prefix) => group.starts_with(prefix) && group[prefix.len()..].starts_with('['),
            None => pat == group,
        })
    }
}

/// `min(1 + |w|/v_ref, w_max)` per cell.
pub fn magnitude_weights(u: &[f64], v: &[f64], v_ref: f64, w_max: f64) -> Result<Vec<f64>> {
    if !(v_ref > 0.0) {
        return Err(Error::config(format!("v_ref must be positive, got {v_ref}")));
    }
    if u.len() != v.len() {
        return Err(Error::input("u and v targets differ in size"));
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (1.0 + a.hypot(*b) / v_ref).min(w_max))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseValue {
    pub value: f64,
    /// False when no cell was supervised; `value` is then 0.
    pub supervised: bool,
}

/// `Σ_masked w·(pred − target)² / Σ_masked w`.
pub fn weighted_masked_mse(pred: &[f64], target: &[f64], mask: &[bool], weights: &[f64]) -> MseValue {
    assert!(pred.len() == target.len() && target.len() == mask.len() && mask.len() == weights.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..pred.len() {
        if mask[k] {
            num += weights[k] * (pred[k] - target[k]).powi(2);
            den += weights[k];
        }
    }
    if den > 0.0 {
        MseValue {
            value: num / den,
            supervised: true,
        }
    } else {
        MseValue {
            value: 0.0,
            supervised: false,
        }
    }
}

/// Full-domain targets for one day, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct DayTargets {
    pub day: i64,
    pub ssh: GriddedField,
    pub u: GriddedField,
    pub v: GriddedField,
}

/// Daily observation and analysis fields over a common day axis starting at
/// `day_start`. Sources a run does not need may be left empty.
#[derive(Clone, Debug, Default)]
pub struct Observations {
    pub grid: Option<GridSpec>,
    pub calendar: Calendar,
    pub day_start: i64,
    pub land: Vec<bool>,
    pub nadir: Vec<GriddedField>,
    pub swot: Vec<GriddedField>,
    pub sst: Vec<GriddedField>,
    pub chl: Vec<GriddedField>,
    /// `[SSH, U, V]` per day of the coarse analysis.
    pub l4: Vec<[GriddedField; 3]>,
    /// `[SSH, U, V]` per day of the finer analysis.
    pub neurost: Vec<[GriddedField; 3]>,
    pub drifters: Vec<DrifterTrack>,
    pub geophys: GeophysParams,
}

impl Observations {
    pub fn grid(&self) -> Result<&GridSpec> {
        self.grid.as_ref().ok_or_else(|| Error::input("observations carry no grid"))
    }

    fn slot<'a, T>(&self, series: &'a [T], day: i64, name: &str) -> Result<&'a T> {
        if series.is_empty() {
            return Err(Error::input(format!("observation source `{name}` is missing")));
        }
        let k = day - self.day_start;
        if k < 0 || k as usize >= series.len() {
            return Err(Error::input(format!("observation source `{name}` has no day {day}")));
        }
        Ok(&series[k as usize])
    }

    pub fn input_field(&self, v: InputVariable, day: i64) -> Result<&GriddedField> {
        match v {
            InputVariable::SshNadir => self.slot(&self.nadir, day, "nadir"),
            InputVariable::SshSwot => self.slot(&self.swot, day, "swot"),
            InputVariable::Sst => self.slot(&self.sst, day, "sst"),
            InputVariable::Chl => self.slot(&self.chl, day, "chl"),
        }
    }

    pub fn analysis(&self, source: TargetSource, day: i64) -> Result<&[GriddedField; 3]> {
        match source {
            TargetSource::L4Analog => self.slot(&self.l4, day, "l4"),
            TargetSource::NeurostAnalog => self.slot(&self.neurost, day, "neurost"),
        }
    }

    pub fn n_days(&self) -> usize {
        [self.nadir.len(), self.swot.len(), self.sst.len(), self.chl.len(), self.l4.len(), self.neurost.len()]
            .into_iter()
            .max()
            .unwrap_or(0)
    }
}

/// Targets per stage over a day range, in physical units.
pub fn build_stage_targets(stage: Stage, source: TargetSource, obs: &Observations, days: Range<i64>) -> Result<Vec<DayTargets>> {
    let grid = obs.grid()?;
    days.map(|day| {
        let (ssh, u, v) = match stage {
            Stage::S1 => {
                let ssh = obs.slot(&obs.nadir, day, "nadir")?.clone();
                let [_, u, v] = obs.analysis(source, day)?.clone();
                (ssh, u, v)
            }
            Stage::S2 => {
                let swot = obs.slot(&obs.swot, day, "swot")?.clone();
                let (u, v) = swath_geostrophy(&swot, grid, &obs.geophys)?;
                (swot, u, v)
            }
            Stage::S3 => {
                if obs.drifters.is_empty() {
                    return Err(Error::input("observation source `drifters` is missing"));
                }
                let (u, v) = rasterize_drifters(&obs.drifters, grid, day);
                let ssh = GriddedField::filled(Variable::Ssh, day, grid.n_lat, grid.n_lon, 0.0, false);
                (ssh, u, v)
            }
        };
        Ok(DayTargets { day, ssh, u, v })
    })
    .collect()
}

/// A normalised field and its mask, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
struct Plane {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Plane {
    fn from_field(f: &GriddedField, clim: &ClimatologySet, grid: &GridSpec, cal: &Calendar, var: Variable) -> Result<Self> {
        let mut f = f.clone();
        f.variable = var;
        let n = normalize(&f, clim.get(var)?, grid, cal)?;
        let values = n
            .values
            .iter()
            .zip(&n.mask)
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect();
        Ok(Plane { values, mask: n.mask })
    }
}

#[derive(Clone, Debug)]
struct TargetDay {
    ssh: Plane,
    u: Plane,
    v: Plane,
    /// Physical current speed where both U and V are supervised.
    speed: Vec<f64>,
}

/// Normalised inputs and targets for one stage over a training period.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub grid: GridSpec,
    pub calendar: Calendar,
    pub ocean: Vec<bool>,
    pub stage: Stage,
    /// Days `days.start..days.end` are all available.
    pub days: Range<i64>,
    inputs: BTreeMap<InputVariable, Vec<Plane>>,
    targets: Vec<TargetDay>,
}

impl TrainingSet {
    pub fn build(
        obs: &Observations,
        clim: &ClimatologySet,
        model: &ModelConfig,
        stage: Stage,
        source: TargetSource,
        days: Range<i64>,
    ) -> Result<Self> {
        let grid = obs.grid()?.clone();
        let cal = obs.calendar;
        if days.end - days.start < (model.t_in + model.t_out) as i64 {
            return Err(Error::input(format!(
                "training period {}..{} is shorter than t_in + t_out = {}",
                days.start,
                days.end,
                model.t_in + model.t_out
            )));
        }
        let mut inputs = BTreeMap::new();
        for &v in &model.input_variables {
            let planes = days
                .clone()
                .map(|d| Plane::from_field(obs.input_field(v, d)?, clim, &grid, &cal, v.physical()))
                .collect::<Result<Vec<_>>>()?;
            inputs.insert(v, planes);
        }
        let raw = build_stage_targets(stage, source, obs, days.clone())?;
        let targets = raw
            .iter()
            .map(|t| {
                let speed = t
                    .u
                    .values
                    .iter()
                    .zip(&t.v.values)
                    .zip(t.u.mask.iter().zip(&t.v.mask))
                    .map(|((a, b), (ma, mb))| if *ma && *mb { a.hypot(*b) } else { 0.0 })
                    .collect();
                Ok(TargetDay {
                    ssh: Plane::from_field(&t.ssh, clim, &grid, &cal, Variable::Ssh)?,
                    u: Plane::from_field(&t.u, clim, &grid, &cal, Variable::U)?,
                    v: Plane::from_field(&t.v, clim, &grid, &cal, Variable::V)?,
                    speed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ocean = if obs.land.is_empty() {
            vec![true; grid.n_cells()]
        } else {
            obs.land.iter().map(|&l| !l).collect()
        };
        Ok(TrainingSet {
            grid,
            calendar: cal,
            ocean,
            stage,
            days,
            inputs,
            targets,
        })
    }

    pub fn n_days(&self) -> usize {
        (self.days.end - self.days.start) as usize
    }

    /// Allowed anchor days (last input day) for a model.
    pub fn anchor_range(&self, model: &ModelConfig) -> Result<Range<i64>> {
        let lo = self.days.start + model.t_in as i64 - 1;
        let hi = self.days.end - model.t_out as i64;
        if hi <= lo {
            return Err(Error::input(format!(
                "dataset spans {} days, fewer than t_in + t_out = {}",
                self.n_days(),
                model.t_in + model.t_out
            )));
        }
        Ok(lo..hi)
    }

    /// Assembles the sample anchored at day `anchor` with crop origin
    /// `(row, col)`.
    pub fn sample_at(&self, model: &ModelConfig, anchor: i64, row: usize, col: usize, v_ref: f64, w_max: f64) -> Result<TrainingSample> {
        let (h, w) = (model.patch_h, model.patch_w);
        let range = self.anchor_range(model)?;
        if !range.contains(&anchor) || row + h > self.grid.n_lat || col + w > self.grid.n_lon {
            return Err(Error::input(format!("sample anchor {anchor} at ({row}, {col}) is out of range")));
        }
        let n_lon = self.grid.n_lon;
        let crop = |plane: &Plane| -> (Vec<f64>, Vec<bool>) {
            (crop_slice(&plane.values, n_lon, row, col, h, w), crop_slice(&plane.mask, n_lon, row, col, h, w))
        };
        let base = |d: i64| (d - self.days.start) as usize;
        let mut inputs = ModelInputs::new();
        for (&v, planes) in &self.inputs {
            let (vals, masks): (Vec<_>, Vec<_>) = (0..model.t_in)
                .map(|s| crop(&planes[base(anchor - (model.t_in - 1 - s) as i64)]))
                .unzip();
            inputs.insert(v, input_tensor(&vals, &masks, h, w));
        }
        let mut targets: [Target; 3] = Default::default();
        let mut speed = Vec::with_capacity(model.t_out * h * w);
        for lead in 1..=model.t_out {
            let t = &self.targets[base(anchor + lead as i64)];
            for (k, plane) in [&t.ssh, &t.u, &t.v].into_iter().enumerate() {
                let (vals, mask) = crop(plane);
                targets[k].values.extend(vals);
                targets[k].mask.extend(mask);
            }
            speed.extend(crop_slice(&t.speed, n_lon, row, col, h, w));
        }
        let uv_w = magnitude_weights(&speed, &vec![0.0; speed.len()], v_ref, w_max)?;
        targets[0].weights = vec![1.0; speed.len()];
        targets[1].weights = uv_w.clone();
        targets[2].weights = uv_w;
        let (center_lat, center_lon) = crate::grid::patch_center(&self.grid, row, col, h, w);
        Ok(TrainingSample {
            inputs,
            targets,
            coords: PatchCoords {
                center_lat,
                center_lon,
                week_index: self.calendar.week_index(anchor),
                cell_deg: self.grid.resolution,
            },
            anchor_day: anchor,
            row,
            col,
        })
    }

    fn ocean_fraction(&self, row: usize, col: usize, h: usize, w: usize) -> f64 {
        let mut n = 0;
        for i in row..row + h {
            n += self.ocean[i * self.grid.n_lon + col..i * self.grid.n_lon + col + w]
                .iter()
                .filter(|&&o| o)
                .count();
        }
        n as f64 / (h * w) as f64
    }
}

fn crop_slice<T: Copy>(data: &[T], n_lon: usize, row: usize, col: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for i in row..row + h {
        out.extend_from_slice(&data[i * n_lon + col..i * n_lon + col + w]);
    }
    out
}

/// One supervised output over `T_out × h × w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Target {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
}

impl Target {
    /// Loss weights with unsupervised cells zeroed.
    pub fn effective_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.mask)
            .map(|(&w, &m)| if m { w } else { 0.0 })
            .collect()
    }

    pub fn weight_sum(&self) -> f64 {
        self.effective_weights().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub inputs: ModelInputs,
    /// SSH, U, V.
    pub targets: [Target; 3],
    pub coords: PatchCoords,
    pub anchor_day: i64,
    pub row: usize,
    pub col: usize,
}

const MAX_CROP_ATTEMPTS: usize = 10_000;

/// Uniform anchor day and crop with at least half the crop over ocean.
pub fn sample_patch(data: &TrainingSet, model: &ModelConfig, stage: &StageConfig, rng: &mut rng::Rng) -> Result<TrainingSample> {
    let range = data.anchor_range(model)?;
    let (h, w) = (model.patch_h, model.patch_w);
    if h > data.grid.n_lat || w > data.grid.n_lon {
        return Err(Error::config(format!(
            "patch {h}x{w} larger than grid {}x{}",
            data.grid.n_lat, data.grid.n_lon
        )));
    }
    let anchor = rng.random_range(range);
    for _ in 0..MAX_CROP_ATTEMPTS {
        let row = rng.random_range(0..=data.grid.n_lat - h);
        let col = rng.random_range(0..=data.grid.n_lon - w);
        if data.ocean_fraction(row, col, h, w) >= 0.5 {
            return data.sample_at(model, anchor, row, col, stage.v_ref, stage.w_max);
        }
    }
    Err(Error::input("no crop with at least 50% ocean found"))
}

const OUTPUT_ORDER: [Variable; 3] = [Variable::Ssh, Variable::U, Variable::V];

/// Batch loss pooled per term, `Σ_s num_s / Σ_s den_s`, with gradients for
/// every non-frozen parameter (same layout as the parameter set; frozen
/// groups get empty vectors).
pub struct BatchResult {
    pub loss: f64,
    /// SSH, U, V pooled terms (0 when unsupervised).
    pub terms: [f64; 3],
    pub grads: Vec<Vec<Vec<f64>>>,
}

pub fn batch_loss_and_grads(
    model: &ModelConfig,
    params: &ParameterSet,
    samples: &[TrainingSample],
    want_grads: bool,
) -> Result<BatchResult> {
    let mut den = [0.0; 3];
    for s in samples {
        for k in 0..3 {
            den[k] += s.targets[k].weight_sum();
        }
    }
    let coef: Vec<f64> = den.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let heads: Vec<Variable> = (0..3).filter(|&k| coef[k] > 0.0).map(|k| OUTPUT_ORDER[k]).collect();
    let mut grads: Vec<Vec<Vec<f64>>> = params
        .groups
        .iter()
        .map(|g| {
            g.params
                .iter()
                .map(|p| if want_grads && !g.frozen { vec![0.0; p.tensor.len()] } else { Vec::new() })
                .collect()
        })
        .collect();
    let mut terms = [0.0; 3];
    if heads.is_empty() {
        return Ok(BatchResult { loss: 0.0, terms, grads });
    }
    for s in samples {
        let mut g = Graph::new();
        let bp = BoundParams::bind(params, &mut g, want_grads);
        let out = crate::net::forward_graph(&mut g, model, &bp, &s.inputs, &s.coords, &heads)?;
        let mut parts = Vec::new();
        for k in 0..3 {
            if coef[k] == 0.0 {
                continue;
            }
            let pred = out.get(OUTPUT_ORDER[k]).expect("head requested");
            let t = &s.targets[k];
            let sse = g.weighted_sse(pred, t.values.clone(), t.effective_weights());
            terms[k] += coef[k] * g.scalar(sse);
            parts.push((sse, coef[k]));
        }
        if want_grads {
            let root = g.combine(&parts);
            let mut gr = g.backward(root, 1.0);
            for (gi, pi, var) in bp.iter() {
                if let Some(d) = gr.take(var) {
                    grads[gi][pi].iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Ok(BatchResult {
        loss: terms.iter().sum(),
        terms,
        grads,
    })
}

/// Adam with decoupled weight decay. Frozen groups are skipped.
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<Vec<f64>>> = params
            .groups
            .iter()
            .map(|g| g.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect())
            .collect();
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<Vec<f64>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, grp) in params.groups.iter_mut().enumerate() {
            if grp.frozen {
                continue;
            }
            for (pi, p) in grp.params.iter_mut().enumerate() {
                let g = &grads[gi][pi];
                if g.is_empty() {
                    continue;
                }
                let (m, v) = (&mut self.m[gi][pi], &mut self.v[gi][pi]);
                for k in 0..g.len() {
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                    let x = &mut p.tensor.data[k];
                    *x -= self.lr * self.weight_decay * *x;
                    *x -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub ssh_term: f64,
    pub uv_term: f64,
}

/// Marks groups frozen according to the stage configuration.
pub fn apply_freezing(params: &mut ParameterSet, stage: &StageConfig) -> Result<()> {
    for pat in &stage.frozen_groups {
        if !params.groups.iter().any(|g| stage_matches(pat, &g.name)) {
            return Err(Error::config(format!("frozen group `{pat}` matches no parameter group")));
        }
    }
    for g in &mut params.groups {
        g.frozen = stage.freezes(&g.name);
    }
    Ok(())
}

fn stage_matches(pat: &str, group: &str) -> bool {
    let probe = StageConfig {
        frozen_groups: vec![pat.to_string()],
        ..StageConfig::default_for(Stage::S1)
    };
    probe.freezes(group)
}

fn numerical_failure(batch: usize, epoch: usize, params: &ParameterSet) -> Error {
    let norms: Vec<String> = params.norms().iter().map(|(n, v)| format!("{n}={v:.4e}")).collect();
    Error::Numerical(format!(
        "non-finite loss in epoch {epoch}, batch {batch}; parameter norms: {}",
        norms.join(", ")
    ))
}

/// Trains one stage on freshly drawn patches. Deterministic in `seed`.
pub fn train_stage(
    params: &ParameterSet,
    model: &ModelConfig,
    stage: &StageConfig,
    data: &TrainingSet,
    seed: u64,
) -> Result<(ParameterSet, Vec<EpochLoss>)> {
    stage.validate()?;
    if data.stage != stage.stage {
        return Err(Error::config(format!(
            "training set was built for {} but the stage is {}",
            data.stage, stage.stage
        )));
    }
    let mut params = params.clone();
    apply_freezing(&mut params, stage)?;
    let mut opt = Adam::new(&params, stage.learning_rate, stage.weight_decay);
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let mut rng = rng::stream(seed, stage.stage.label(), epoch as u64);
        let mut sums = [0.0; 4];
        let mut n_batches = 0;
        let mut drawn = 0;
        while drawn < stage.patches_per_epoch {
            let n = stage.batch_size.min(stage.patches_per_epoch - drawn);
            let batch = (0..n)
                .map(|_| sample_patch(data, model, stage, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            drawn += n;
            let r = batch_loss_and_grads(model, &params, &batch, true)?;
            if !r.loss.is_finite() {
                return Err(numerical_failure(n_batches, epoch, &params));
            }
            opt.step(&mut params, &r.grads);
            if !params.is_finite() {
                return Err(numerical_failure(n_batches, epoch, &params));
            }
            sums[0] += r.loss;
            sums[1] += r.terms[0];
            sums[2] += r.terms[1] + r.terms[2];
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        history.push(EpochLoss {
            epoch,
            mean_loss: sums[0] / nb,
            ssh_term: sums[1] / nb,
            uv_term: sums[2] / nb,
        });
        log::debug!("{} epoch {epoch}: loss {:.5}", stage.stage, sums[0] / nb);
    }
    Ok((params, history))
}

/// Trains on a fixed list of samples, one optimizer step per batch in
/// order, and records the mean batch loss before each pass.
pub fn train_fixed(
    params: &ParameterSet,
    model: &ModelConfig,
    stage: &StageConfig,
    samples: &[TrainingSample],
    steps: usize,
) -> Result<(ParameterSet, Vec<f64>)> {
    stage.validate()?;
    let mut params = params.clone();
    apply_freezing(&mut params, stage)?;
    let mut opt = Adam::new(&params, stage.learning_rate, stage.weight_decay);
    let mut losses = Vec::with_capacity(steps + 1);
    let chunks: Vec<&[TrainingSample]> = samples.chunks(stage.batch_size).collect();
    for step in 0..steps {
        let batch = chunks[step % chunks.len()];
        let r = batch_loss_and_grads(model, &params, batch, true)?;
        if !r.loss.is_finite() {
            return Err(numerical_failure(step, 0, &params));
        }
        losses.push(r.loss);
        opt.step(&mut params, &r.grads);
    }
    losses.push(batch_loss_and_grads(model, &params, samples, false)?.loss);
    Ok((params, losses))
}

/// Result of one curriculum stage.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: Stage,
    pub params: ParameterSet,
    pub history: Vec<EpochLoss>,
}

/// Runs stages in order, each resuming from the previous one. Parameters
/// are rounded to `f32` after every stage so they equal their checkpoint.
pub fn run_curriculum(
    init: &ParameterSet,
    model: &ModelConfig,
    stages: &[StageConfig],
    data: &BTreeMap<Stage, TrainingSet>,
    seed: u64,
) -> Result<Vec<StageResult>> {
    check_stage_order(&stages.iter().map(|s| s.stage).collect::<Vec<_>>())?;
    let mut params = init.clone();
    let mut out = Vec::with_capacity(stages.len());
    for cfg in stages {
        let set = data
            .get(&cfg.stage)
            .ok_or_else(|| Error::input(format!("no training set for {}", cfg.stage)))?;
        let (mut p, history) = train_stage(&params, model, cfg, set, seed)?;
        p.round_to_f32();
        params = p;
        out.push(StageResult {
            stage: cfg.stage,
            params: params.clone(),
            history,
        });
    }
    Ok(out)
}

/// Stages must be strictly increasing (S1 → S2 → S3, any may be skipped).
pub fn check_stage_order(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::config("no stages requested"));
    }
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("stages {stages:?} are not in S1 → S2 → S3 order")));
    }
    Ok(())
}

pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,mean_loss,ssh_term,uv_term\n");
    for h in history {
        text.push_str(&format!("{},{},{},{}\n", h.epoch, h.mean_loss, h.ssh_term, h.uv_term));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnitude_weight_examples() {
        let w = magnitude_weights(&[0.0, 0.25, 10.0], &[0.0, 0.0, 0.0], 0.25, 5.0).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 5.0]);
        assert!(matches!(magnitude_weights(&[0.0], &[0.0], 0.0, 5.0), Err(Error::Config(_))));
    }

    #[test]
    fn mse_examples() {
        let r = weighted_masked_mse(&[1.0, 2.0], &[1.0, 2.0], &[true, true], &[1.0, 1.0]);
        assert_eq!(r.value, 0.0);
        let r = weighted_masked_mse(&[1.0], &[0.0], &[true], &[1.0]);
        assert_eq!(r.value, 1.0);
        let r = weighted_masked_mse(&[1.0, 3.0], &[0.0, 0.0], &[true, true], &[1.0, 3.0]);
        assert_eq!(r.value, 7.0);
        let r = weighted_masked_mse(&[1.0], &[0.0], &[false], &[1.0]);
        assert!(!r.supervised && r.value == 0.0);
    }

    #[test]
    fn freezing_patterns() {
        let s3 = StageConfig::default_for(Stage::S3);
        assert!(s3.freezes("encoder[SST]"));
        assert!(s3.freezes("decoder[SSH]"));
        assert!(!s3.freezes("decoder[U]"));
        let mut custom = StageConfig::default_for(Stage::S3);
        custom.frozen_groups.clear();
        assert!(custom.freezes("decoder[SSH]"));
        assert!(!custom.freezes("translator"));
        assert!(!StageConfig::default_for(Stage::S1).freezes("decoder[SSH]"));
    }

    #[test]
    fn stage_order() {
        assert!(check_stage_order(&[Stage::S1, Stage::S2, Stage::S3]).is_ok());
        assert!(check_stage_order(&[Stage::S1, Stage::S3]).is_ok());
        assert!(check_stage_order(&[Stage::S2, Stage::S1]).is_err());
        assert!(check_stage_order(&[Stage::S1, Stage::S1]).is_err());
    }

    #[test]
    fn stage_defaults() {
        let s1 = StageConfig::default_for(Stage::S1);
        assert_eq!((s1.learning_rate, s1.weight_decay, s1.epochs), (1e-3, 1e-3, 50));
        let s2 = StageConfig::default_for(Stage::S2);
        assert_eq!((s2.learning_rate, s2.epochs), (1e-4, 20));
        let s3 = StageConfig::default_for(Stage::S3);
        assert_eq!((s3.learning_rate, s3.epochs), (1e-4, 10));
        assert_eq!(s1.batch_size, 8);
    }
}
