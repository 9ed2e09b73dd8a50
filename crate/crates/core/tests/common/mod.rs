//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use seacast::net::{init_parameters, InputVariable, ModelConfig, ModelInputs, ParameterSet, PatchCoords, EMBED_DIM};
use seacast::rng;
use seacast::tensor::Tensor;
use seacast::train::{magnitude_weights, Target, TrainingSample};

pub fn tiny_model(t_in: usize, t_out: usize, h: usize, w: usize, vars: &[InputVariable]) -> ModelConfig {
    ModelConfig {
        t_in,
        t_out,
        patch_h: h,
        patch_w: w,
        input_variables: vars.to_vec(),
        latent_channels: 8,
        n_gsta_blocks: 2,
        embed_dim: EMBED_DIM,
        hidden_channels: 8,
    }
}

pub fn coords(lat: f64, lon: f64, week: u32) -> PatchCoords {
    PatchCoords {
        center_lat: lat,
        center_lon: lon,
        week_index: week,
        cell_deg: 0.1,
    }
}

/// Random values with roughly `observed` of the cells flagged as observed.
pub fn random_inputs(cfg: &ModelConfig, r: &mut rng::Rng, observed: f64) -> ModelInputs {
    let plane = cfg.patch_h * cfg.patch_w;
    cfg.input_variables
        .iter()
        .map(|&v| {
            let mut t = Tensor::zeros([cfg.t_in, 2, cfg.patch_h, cfg.patch_w]);
            for s in 0..cfg.t_in {
                for k in 0..plane {
                    if r.random_bool(observed) {
                        t.data[2 * s * plane + k] = r.random_range(-2.0..2.0);
                        t.data[(2 * s + 1) * plane + k] = 1.0;
                    }
                }
            }
            (v, t)
        })
        .collect()
}

/// SSH target observed on `ssh_cover` of the cells, dense U/V targets.
pub fn random_sample(cfg: &ModelConfig, r: &mut rng::Rng, ssh_cover: f64) -> TrainingSample {
    let n = cfg.t_out * cfg.patch_h * cfg.patch_w;
    let vals = |r: &mut rng::Rng| (0..n).map(|_| r.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    let ssh = Target {
        values: vals(r),
        mask: (0..n).map(|_| r.random_bool(ssh_cover)).collect(),
        weights: vec![1.0; n],
    };
    let u = vals(r);
    let v = vals(r);
    let w = magnitude_weights(&u, &v, 0.25, 5.0).expect("matching lengths");
    let uv = |values: Vec<f64>| Target {
        values,
        mask: vec![true; n],
        weights: w.clone(),
    };
    TrainingSample {
        inputs: random_inputs(cfg, r, 0.6),
        targets: [ssh, uv(u), uv(v)],
        coords: coords(r.random_range(25.0..45.0), r.random_range(-60.0..-20.0), r.random_range(0..52)),
        anchor_day: 0,
        row: 0,
        col: 0,
    }
}

/// Seeded initialisation with every tensor nudged away from its initial
/// value, so that zero-initialised layers carry gradient through.
pub fn generic_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ParameterSet {
    let mut p = init_parameters(cfg, seed).expect("valid config");
    let mut r = rng::stream(seed, "generic-params", 0);
    for g in &mut p.groups {
        for t in &mut g.params {
            for x in &mut t.tensor.data {
                *x += r.random_range(-scale..scale);
            }
        }
    }
    p
}

/// Flat index of every scalar parameter as `(group, tensor, element)`.
pub fn all_scalars(p: &ParameterSet) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (gi, g) in p.groups.iter().enumerate() {
        for (pi, t) in g.params.iter().enumerate() {
            for k in 0..t.tensor.len() {
                out.push((gi, pi, k));
            }
        }
    }
    out
}

pub fn set_scalar(p: &mut ParameterSet, at: (usize, usize, usize), value: f64) {
    p.groups[at.0].params[at.1].tensor.data[at.2] = value;
}

pub fn get_scalar(p: &ParameterSet, at: (usize, usize, usize)) -> f64 {
    p.groups[at.0].params[at.1].tensor.data[at.2]
}

/// Relative gradient error with a floor on the scale below which two
/// numbers are indistinguishable from finite-difference round-off.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// The example world cut down to 30 days with a 16×16 model.
pub fn small_config() -> seacast::pipeline::RunConfig {
    let mut cfg = seacast::pipeline::RunConfig::example();
    cfg.world.n_days = 30;
    cfg.evaluation.train_days = 20;
    cfg.observations.n_drifters_train = 150;
    cfg.observations.n_drifters_eval = 60;
    cfg.model = tiny_model(4, 3, 16, 16, &[InputVariable::SshNadir, InputVariable::Sst, InputVariable::Chl]);
    cfg
}
