//! Run configuration, synthetic data generation and the end-to-end
//! train / forecast / evaluate experiment shared by the CLI and the tests.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::climatology::{compute_climatology, ClimatologySet, DEFAULT_CELL_SIZE, DEFAULT_PERIOD};
use crate::dataset::{write_dataset, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::forecast::{forecast, persistence_forecast, ForecastProduct, TileConfig, TilePlan};
use crate::grid::{region, GridSpec, GriddedField, RegionSpec, Variable};
use crate::metrics::{match_drifters, report, Interpolation, MatchedPair, MetricsReport};
use crate::net::{init_parameters, Checkpoint, InputVariable, ModelConfig};
use crate::ocean::{
    observe_imagery, observe_l4, observe_nadir, observe_swot, read_drifters_csv, simulate_drifters, simulate_world,
    write_drifters_csv, DrifterTrack, NadirConfig, OceanWorld, SwotConfig, WorldConfig,
};
use crate::rng;
use crate::train::{run_curriculum, Observations, Stage, StageConfig, StageResult, TargetSource, TrainingSet};

fn default_cloud_cover() -> f64 {
    0.3
}
fn default_l4_sigma() -> f64 {
    3.0
}
fn default_neurost_sigma() -> f64 {
    1.0
}
fn default_clim_cell() -> f64 {
    DEFAULT_CELL_SIZE
}
fn default_clim_period() -> u32 {
    DEFAULT_PERIOD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub nadir: NadirConfig,
    pub swot: SwotConfig,
    #[serde(default = "default_cloud_cover")]
    pub cloud_cover: f64,
    /// Smoothing of the coarse L4 analog, cells.
    #[serde(default = "default_l4_sigma")]
    pub l4_sigma_cells: f64,
    /// Smoothing of the finer analysis used by the Stage-1 ablation, cells.
    #[serde(default = "default_neurost_sigma")]
    pub neurost_sigma_cells: f64,
    pub n_drifters_train: usize,
    pub n_drifters_eval: usize,
    #[serde(default = "default_clim_cell")]
    pub climatology_cell_deg: f64,
    #[serde(default = "default_clim_period")]
    pub climatology_period_days: u32,
}

fn default_issue_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Named region; `None` evaluates over the whole grid.
    #[serde(default)]
    pub region: Option<String>,
    /// Days `0..train_days` train the model; later days are held out.
    pub train_days: usize,
    #[serde(default = "default_issue_every")]
    pub issue_every: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub observations: ObservationConfig,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub tile: TileConfig,
    pub evaluation: EvaluationConfig,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.observations.swot.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        let ev = &self.evaluation;
        if ev.train_days < self.model.t_in + self.model.t_out || ev.train_days >= self.world.n_days {
            return Err(Error::config(format!(
                "evaluation.train_days = {} must leave both a training and a held-out period in {} days",
                ev.train_days, self.world.n_days
            )));
        }
        if ev.issue_every == 0 {
            return Err(Error::config("evaluation.issue_every must be positive"));
        }
        self.region()?;
        Ok(())
    }

    pub fn region(&self) -> Result<RegionSpec> {
        match &self.evaluation.region {
            Some(name) => region(name),
            None => Ok(RegionSpec::whole_grid(&self.world.grid)),
        }
    }

    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .cloned()
            .unwrap_or_else(|| StageConfig::default_for(stage))
    }

    /// Desk-sized example: a small mid-latitude box with drifting eddies.
    pub fn example() -> Self {
        let grid = GridSpec::new(32.0, 38.4, -40.0, -33.6, 0.1).expect("valid grid");
        RunConfig {
            world: WorldConfig {
                grid,
                calendar: Default::default(),
                n_days: 100,
                n_eddies: 14,
                eddy_amplitude_range: (0.1, 0.3),
                eddy_radius_range: (30.0, 50.0),
                eddy_drift_speed_range: (10.0, 20.0),
                eddy_drift_heading_deg: 270.0,
                eddy_drift_heading_spread_deg: 30.0,
                background_ssh_gradient: 0.02,
                land_fraction: 0.05,
                ageostrophic: crate::ocean::AgeostrophicConfig {
                    enabled: true,
                    mean_u: 0.08,
                    mean_v: 0.03,
                    noise_std: 0.03,
                    correlation_cells: 8.0,
                    time_correlation: 0.9,
                },
                geophys: Default::default(),
                seed: 7,
            },
            observations: ObservationConfig {
                nadir: NadirConfig {
                    n_tracks: 3,
                    along_track_spacing_km: 7.0,
                    noise_std: 0.01,
                    inclination_range_deg: (10.0, 40.0),
                },
                swot: SwotConfig {
                    noise_std: 0.002,
                    ..SwotConfig::default()
                },
                cloud_cover: 0.3,
                l4_sigma_cells: 3.0,
                neurost_sigma_cells: 1.0,
                n_drifters_train: 300,
                n_drifters_eval: 300,
                climatology_cell_deg: DEFAULT_CELL_SIZE,
                // A 100-day world sees each calendar week once, too little
                // for per-week statistics; one period spans the whole year.
                climatology_period_days: 365,
            },
            model: ModelConfig {
                t_in: 4,
                t_out: 3,
                patch_h: 32,
                patch_w: 32,
                input_variables: vec![InputVariable::SshNadir, InputVariable::Sst, InputVariable::Chl],
                latent_channels: 8,
                n_gsta_blocks: 2,
                embed_dim: crate::net::EMBED_DIM,
                hidden_channels: 32,
            },
            stages: [Stage::S1, Stage::S2, Stage::S3]
                .into_iter()
                .map(|s| StageConfig {
                    epochs: 4,
                    patches_per_epoch: 32,
                    ..StageConfig::default_for(s)
                })
                .collect(),
            tile: TileConfig::default(),
            evaluation: EvaluationConfig {
                region: None,
                train_days: 70,
                issue_every: 3,
                interpolation: Interpolation::Bilinear,
            },
            seed: 1,
            output_dir: None,
        }
    }

    /// The pinned world used by the acceptance suite: the example world with
    /// denser altimetry, SWOT as a model input, more drifters and a longer
    /// curriculum. Every issue day is scored.
    pub fn acceptance() -> Self {
        let mut cfg = Self::example();
        cfg.observations.nadir.n_tracks = 8;
        cfg.observations.n_drifters_train = 1000;
        cfg.observations.n_drifters_eval = 1000;
        cfg.model.input_variables.push(InputVariable::SshSwot);
        cfg.evaluation.issue_every = 1;
        for s in cfg.stages.iter_mut() {
            s.patches_per_epoch = 64;
            s.epochs = match s.stage {
                Stage::S1 => 40,
                Stage::S2 => 10,
                Stage::S3 => 30,
            };
        }
        cfg
    }
}

/// Synthetic world plus every observation source over its full day range.
#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub world: Option<OceanWorld>,
    pub obs: Observations,
    /// Held-out drifters used only for evaluation.
    pub eval_drifters: Vec<DrifterTrack>,
}

fn sub_seed(seed: u64, label: &str) -> u64 {
    rng::stream(seed, label, 0).random()
}

pub fn generate(cfg: &RunConfig) -> Result<GeneratedData> {
    cfg.world.validate()?;
    let world = simulate_world(&cfg.world)?;
    let oc = &cfg.observations;
    let seed = cfg.seed;
    let days = 0..world.n_days() as i64;
    let nadir = days
        .clone()
        .map(|d| observe_nadir(&world, d, &oc.nadir, sub_seed(seed, "nadir")))
        .collect::<Result<Vec<_>>>()?;
    let swot = days
        .clone()
        .map(|d| observe_swot(&world, d, &oc.swot, sub_seed(seed, "swot")))
        .collect::<Result<Vec<_>>>()?;
    let sst = days
        .clone()
        .map(|d| observe_imagery(&world, d, Variable::Sst, oc.cloud_cover, sub_seed(seed, "sst")))
        .collect::<Result<Vec<_>>>()?;
    let chl = days
        .clone()
        .map(|d| observe_imagery(&world, d, Variable::Chl, oc.cloud_cover, sub_seed(seed, "chl")))
        .collect::<Result<Vec<_>>>()?;
    let l4 = days
        .clone()
        .map(|d| observe_l4(&world, d, oc.l4_sigma_cells))
        .collect::<Result<Vec<_>>>()?;
    let neurost = days
        .clone()
        .map(|d| observe_l4(&world, d, oc.neurost_sigma_cells))
        .collect::<Result<Vec<_>>>()?;
    let drifters = simulate_drifters(&world, oc.n_drifters_train, sub_seed(seed, "drifters-train"))?;
    let eval_drifters = simulate_drifters(&world, oc.n_drifters_eval, sub_seed(seed, "drifters-eval"))?;
    let obs = Observations {
        grid: Some(world.grid().clone()),
        calendar: *world.calendar(),
        day_start: 0,
        land: world.land.clone(),
        nadir,
        swot,
        sst,
        chl,
        l4,
        neurost,
        drifters,
        geophys: cfg.world.geophys,
    };
    Ok(GeneratedData {
        world: Some(world),
        obs,
        eval_drifters,
    })
}

const DIRS: [&str; 6] = ["truth", "nadir", "swot", "imagery", "l4", "neurost"];
pub const TRAIN_DRIFTERS: &str = "drifters_train.csv";
pub const EVAL_DRIFTERS: &str = "drifters_eval.csv";

fn relabel(mut f: GriddedField, v: Variable) -> GriddedField {
    f.variable = v;
    f
}

/// Writes every source as a dataset directory under `dir`, plus the two
/// drifter CSVs.
pub fn write_generated(data: &GeneratedData, dir: &Path) -> Result<()> {
    let obs = &data.obs;
    let grid = obs.grid()?.clone();
    let n = obs.n_days();
    let meta = |vars: Vec<Variable>| DatasetMeta::new(grid.clone(), obs.calendar, vars, obs.day_start, n);
    let land = Some(obs.land.as_slice()).filter(|l| !l.is_empty());
    let mut sets: Vec<(&str, BTreeMap<Variable, Vec<GriddedField>>)> = Vec::new();
    if let Some(w) = &data.world {
        sets.push((
            DIRS[0],
            BTreeMap::from([(Variable::Ssh, w.ssh.clone()), (Variable::U, w.u_total.clone()), (Variable::V, w.v_total.clone())]),
        ));
    }
    sets.push((DIRS[1], BTreeMap::from([(Variable::Ssh, obs.nadir.clone())])));
    sets.push((DIRS[2], BTreeMap::from([(Variable::Ssh, obs.swot.clone())])));
    sets.push((DIRS[3], BTreeMap::from([(Variable::Sst, obs.sst.clone()), (Variable::Chl, obs.chl.clone())])));
    for (name, series) in [(DIRS[4], &obs.l4), (DIRS[5], &obs.neurost)] {
        let mut m = BTreeMap::new();
        for (k, v) in [Variable::Ssh, Variable::U, Variable::V].into_iter().enumerate() {
            m.insert(v, series.iter().map(|t| relabel(t[k].clone(), v)).collect());
        }
        sets.push((name, m));
    }
    for (name, fields) in sets {
        let vars: Vec<Variable> = fields.keys().copied().collect();
        write_dataset(&dir.join(name), &meta(vars), &fields, land)?;
    }
    write_drifters_csv(&dir.join(TRAIN_DRIFTERS), &obs.drifters, &obs.calendar)?;
    write_drifters_csv(&dir.join(EVAL_DRIFTERS), &data.eval_drifters, &obs.calendar)?;
    std::fs::write(
        dir.join("geophys.json"),
        serde_json::to_string_pretty(&obs.geophys)?,
    )
    .map_err(|e| Error::io(dir.join("geophys.json"), e))
}

/// Opens the observation datasets written by [`write_generated`] without
/// loading them.
pub fn open_inputs(dir: &Path) -> Result<crate::forecast::DatasetInputs> {
    let mut sources = BTreeMap::new();
    for v in InputVariable::ALL {
        let sub = match v {
            InputVariable::SshNadir => DIRS[1],
            InputVariable::SshSwot => DIRS[2],
            InputVariable::Sst | InputVariable::Chl => DIRS[3],
        };
        let path = dir.join(sub);
        if path.join(crate::dataset::META_FILE).exists() {
            sources.insert(v, Dataset::open(&path)?);
        }
    }
    if sources.is_empty() {
        return Err(Error::input(format!("{} holds no observation datasets", dir.display())));
    }
    Ok(crate::forecast::DatasetInputs { sources })
}

/// Loads everything written by [`write_generated`] back into memory.
pub fn read_generated(dir: &Path) -> Result<GeneratedData> {
    let open = |name: &str| Dataset::open(dir.join(name));
    let nadir = open(DIRS[1])?;
    let meta = nadir.meta.clone();
    let triple = |name: &str| -> Result<Vec<[GriddedField; 3]>> {
        let ds = open(name)?;
        (meta.day_start..meta.day_end())
            .map(|d| Ok([ds.read_day(Variable::Ssh, d)?, ds.read_day(Variable::U, d)?, ds.read_day(Variable::V, d)?]))
            .collect()
    };
    let imagery = open(DIRS[3])?;
    let geophys_path = dir.join("geophys.json");
    let geophys = match std::fs::read_to_string(&geophys_path) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(_) => Default::default(),
    };
    let obs = Observations {
        grid: Some(meta.grid.clone()),
        calendar: meta.calendar,
        day_start: meta.day_start,
        land: nadir.land()?,
        nadir: nadir.read_all(Variable::Ssh)?,
        swot: open(DIRS[2])?.read_all(Variable::Ssh)?,
        sst: imagery.read_all(Variable::Sst)?,
        chl: imagery.read_all(Variable::Chl)?,
        l4: triple(DIRS[4])?,
        neurost: triple(DIRS[5])?,
        drifters: read_drifters_csv(&dir.join(TRAIN_DRIFTERS), &meta.calendar)?,
        geophys,
    };
    Ok(GeneratedData {
        world: None,
        obs,
        eval_drifters: read_drifters_csv(&dir.join(EVAL_DRIFTERS), &meta.calendar)?,
    })
}

/// Normalisation statistics over the training days: SSH, U and V from the
/// coarse L4 analog, SST and CHL from the cloud-masked imagery.
pub fn training_climatology(obs: &Observations, days: Range<i64>, cell_deg: f64, period: u32) -> Result<ClimatologySet> {
    let grid = obs.grid()?;
    let idx = |d: i64| (d - obs.day_start) as usize;
    let mut set = ClimatologySet::default();
    for (k, v) in [Variable::Ssh, Variable::U, Variable::V].into_iter().enumerate() {
        let series: Vec<GriddedField> = days.clone().map(|d| relabel(obs.l4[idx(d)][k].clone(), v)).collect();
        set.insert(compute_climatology(&series, grid, &obs.calendar, cell_deg, period)?);
    }
    for src in [&obs.sst, &obs.chl] {
        if src.is_empty() {
            continue;
        }
        let series: Vec<GriddedField> = days.clone().map(|d| src[idx(d)].clone()).collect();
        set.insert(compute_climatology(&series, grid, &obs.calendar, cell_deg, period)?);
    }
    Ok(set)
}

/// A generated world ready for training and verification.
pub struct Experiment {
    pub config: RunConfig,
    pub data: GeneratedData,
    pub climatology: ClimatologySet,
}

impl Experiment {
    pub fn new(config: RunConfig, data: GeneratedData) -> Result<Self> {
        config.validate()?;
        let oc = &config.observations;
        let climatology = training_climatology(&data.obs, 0..config.evaluation.train_days as i64, oc.climatology_cell_deg, oc.climatology_period_days)?;
        Ok(Experiment {
            config,
            data,
            climatology,
        })
    }

    pub fn prepare(config: RunConfig) -> Result<Self> {
        let data = generate(&config)?;
        Self::new(config, data)
    }

    pub fn train_range(&self) -> Range<i64> {
        0..self.config.evaluation.train_days as i64
    }

    pub fn training_set(&self, stage: Stage, source: TargetSource) -> Result<TrainingSet> {
        TrainingSet::build(&self.data.obs, &self.climatology, &self.config.model, stage, source, self.train_range())
    }

    /// Runs the given stages from a fresh initialisation.
    pub fn train(&self, stages: &[StageConfig], seed: u64) -> Result<Vec<StageResult>> {
        let init = init_parameters(&self.config.model, seed)?;
        self.train_from(&init, stages, seed)
    }

    pub fn train_from(&self, init: &crate::net::ParameterSet, stages: &[StageConfig], seed: u64) -> Result<Vec<StageResult>> {
        let mut sets = BTreeMap::new();
        for s in stages {
            sets.insert(s.stage, self.training_set(s.stage, s.target_source)?);
        }
        run_curriculum(init, &self.config.model, stages, &sets, seed)
    }

    pub fn checkpoint(&self, result: &StageResult, seed: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.model.clone(),
            stage: result.stage.label().to_string(),
            seed,
            params: result.params.clone(),
            climatology: self.climatology.clone(),
            extra: serde_json::Map::new(),
        }
    }

    /// Issue days whose every lead falls in the held-out period.
    pub fn issue_days(&self) -> Vec<i64> {
        let m = &self.config.model;
        let first = (self.config.evaluation.train_days as i64 - 1).max(m.t_in as i64 - 1);
        let last = self.data.obs.n_days() as i64 - 1 - m.t_out as i64;
        (first..=last).step_by(self.config.evaluation.issue_every).collect()
    }

    pub fn tile_plan(&self) -> Result<TilePlan> {
        let m = &self.config.model;
        self.config
            .tile
            .plan(self.data.obs.grid()?, &self.config.region()?, m.patch_h, m.patch_w)
    }

    pub fn forecast(&self, ckpt: &Checkpoint, issue_day: i64) -> Result<ForecastProduct> {
        let m = &self.config.model;
        forecast(
            ckpt,
            &self.data.obs,
            issue_day,
            &self.tile_plan()?,
            self.config.tile.sigma(m.patch_h, m.patch_w),
        )
    }

    /// The coarse L4 analysis on the issue day, held over every lead.
    pub fn persistence(&self, issue_day: i64) -> Result<ForecastProduct> {
        let reference = self.data.obs.analysis(TargetSource::L4Analog, issue_day)?;
        let reference = [
            relabel(reference[0].clone(), Variable::Ssh),
            relabel(reference[1].clone(), Variable::U),
            relabel(reference[2].clone(), Variable::V),
        ];
        Ok(persistence_forecast(
            issue_day,
            &reference,
            self.data.obs.grid()?,
            self.data.obs.calendar,
            self.config.model.t_out,
            "L4_ANALOG",
        ))
    }

    pub fn pairs_for_checkpoint(&self, ckpt: &Checkpoint) -> Result<Vec<MatchedPair>> {
        let mut pairs = Vec::new();
        for d in self.issue_days() {
            pairs.extend(self.pairs(&self.forecast(ckpt, d)?)?);
        }
        Ok(pairs)
    }

    fn pairs(&self, product: &ForecastProduct) -> Result<Vec<MatchedPair>> {
        let region = self.config.region()?;
        Ok(match_drifters(product, &self.data.eval_drifters, Some(&region), self.config.evaluation.interpolation))
    }

    fn score(&self, products: impl Iterator<Item = Result<ForecastProduct>>, label: &str) -> Result<MetricsReport> {
        let mut pairs = Vec::new();
        for p in products {
            pairs.extend(self.pairs(&p?)?);
        }
        Ok(report(&pairs, self.config.model.t_out, &self.config.region()?.name, label))
    }

    pub fn evaluate_checkpoint(&self, ckpt: &Checkpoint) -> Result<MetricsReport> {
        self.score(self.issue_days().into_iter().map(|d| self.forecast(ckpt, d)), &ckpt.content_hash())
    }

    pub fn evaluate_persistence(&self) -> Result<MetricsReport> {
        self.score(self.issue_days().into_iter().map(|d| self.persistence(d)), "persistence:L4_ANALOG")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips_through_json() {
        let cfg = RunConfig::example();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_missing_keys_rejected() {
        let mut v = serde_json::to_value(RunConfig::example()).unwrap();
        v["bogus"] = 1.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v = serde_json::to_value(RunConfig::example()).unwrap();
        v.as_object_mut().unwrap().remove("world");
        match RunConfig::from_json(&v.to_string()) {
            Err(Error::Config(m)) => assert!(m.contains("world"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
