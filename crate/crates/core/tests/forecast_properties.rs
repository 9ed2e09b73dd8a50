mod common;

use std::sync::OnceLock;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use seacast::forecast::{forecast, gaussian_merge, render_png, tile_domain, ForecastProduct, PatchOutput, TilePlan};
use seacast::grid::{GridSpec, RegionSpec, Variable};
use seacast::net::Checkpoint;
use seacast::pipeline::{open_inputs, write_generated, Experiment};
use seacast::rng;
use seacast::train::{Stage, StageResult};
use seacast::Error;

fn small_experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| Experiment::prepare(small_config()).expect("small world"))
}

fn random_checkpoint(exp: &Experiment, seed: u64) -> Checkpoint {
    let result = StageResult {
        stage: Stage::S1,
        params: generic_params(&exp.config.model, seed, 0.05),
        history: Vec::new(),
    };
    exp.checkpoint(&result, seed)
}

fn plan_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (2usize..9, 2usize..9).prop_flat_map(|(h, w)| (Just(h), Just(w), 1..=h, 1..=w, h..3 * h, w..3 * w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merging_constants_returns_the_constant(
        (h, w, sr, sc, n_lat, n_lon) in plan_strategy(),
        c in -10.0f64..10.0,
        sigma in 0.3f64..6.0,
    ) {
        let grid = GridSpec::new(30.0, 30.0 + 0.1 * n_lat as f64, 0.0, 0.1 * n_lon as f64, 0.1).unwrap();
        let plan = tile_domain(&grid, &RegionSpec::whole_grid(&grid), (h, w), (sr, sc)).unwrap();
        let patches: Vec<PatchOutput> = plan
            .anchors
            .iter()
            .map(|&(row, col)| PatchOutput { row, col, values: vec![c; h * w] })
            .collect();
        let (merged, mask) = gaussian_merge(&patches, (h, w), (grid.n_lat, grid.n_lon), sigma).unwrap();
        prop_assert!(mask.iter().all(|&m| m));
        for x in merged {
            prop_assert!((x - c).abs() <= 1e-6);
        }
    }

    #[test]
    fn merge_ignores_patch_order(
        (h, w, sr, sc, n_lat, n_lon) in plan_strategy(),
        seed in 0u64..1000,
    ) {
        let grid = GridSpec::new(30.0, 30.0 + 0.1 * n_lat as f64, 0.0, 0.1 * n_lon as f64, 0.1).unwrap();
        let plan = tile_domain(&grid, &RegionSpec::whole_grid(&grid), (h, w), (sr, sc)).unwrap();
        let mut r = rng::stream(seed, "merge-order", 0);
        let mut patches: Vec<PatchOutput> = plan
            .anchors
            .iter()
            .map(|&(row, col)| PatchOutput {
                row,
                col,
                values: (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let a = gaussian_merge(&patches, (h, w), (grid.n_lat, grid.n_lon), 1.5).unwrap();
        patches.shuffle(&mut r);
        let b = gaussian_merge(&patches, (h, w), (grid.n_lat, grid.n_lon), 1.5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn single_patch_is_reproduced_exactly(h in 1usize..10, w in 1usize..10, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "single", 0);
        let values: Vec<f64> = (0..h * w).map(|_| r.random_range(-5.0..5.0)).collect();
        let p = PatchOutput { row: 0, col: 0, values: values.clone() };
        let (merged, mask) = gaussian_merge(&[p], (h, w), (h, w), 2.0).unwrap();
        prop_assert!(mask.iter().all(|&m| m));
        prop_assert_eq!(merged, values);
    }
}

#[test]
fn singly_covered_cells_keep_their_patch_value() {
    let exp = small_experiment();
    let ck = random_checkpoint(exp, 3);
    let m = &exp.config.model;
    let full = exp.tile_plan().unwrap();
    assert!(full.anchors.len() > 1);
    let lone = TilePlan {
        anchors: vec![(0, 0)],
        ..full.clone()
    };
    let sigma = exp.config.tile.sigma(m.patch_h, m.patch_w);
    let a = forecast(&ck, &exp.data.obs, 25, &full, sigma).unwrap();
    let b = forecast(&ck, &exp.data.obs, 25, &lone, sigma).unwrap();
    let n_lon = a.grid.n_lon;
    // Cells left of and above the second anchor in each direction.
    let (r_end, c_end) = (full.stride_rows, full.stride_cols);
    for lead in 1..=a.n_leads() {
        for v in [Variable::Ssh, Variable::U, Variable::V] {
            let (fa, fb) = (a.field(lead, v).unwrap(), b.field(lead, v).unwrap());
            for i in 0..r_end {
                for j in 0..c_end {
                    let k = i * n_lon + j;
                    assert_eq!(fa.mask[k], fb.mask[k]);
                    if fa.mask[k] {
                        assert_eq!(fa.values[k].to_bits(), fb.values[k].to_bits());
                    }
                }
            }
        }
    }
}

fn product_bytes(p: &ForecastProduct) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path()).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn on_disk_inputs_after_issue_day_are_never_read() {
    let exp = small_experiment();
    let ck = random_checkpoint(exp, 5);
    let m = &exp.config.model;
    let issue = 22;
    let plan = exp.tile_plan().unwrap();
    let sigma = exp.config.tile.sigma(m.patch_h, m.patch_w);

    let clean = tempfile::tempdir().unwrap();
    write_generated(&exp.data, clean.path()).unwrap();
    let a = forecast(&ck, &open_inputs(clean.path()).unwrap(), issue, &plan, sigma).unwrap();

    let mut data = exp.data.clone();
    let mut r = rng::stream(1, "mutate", 0);
    for series in [&mut data.obs.nadir, &mut data.obs.swot, &mut data.obs.sst, &mut data.obs.chl] {
        for f in series.iter_mut().filter(|f| f.day > issue) {
            for (x, m) in f.values.iter_mut().zip(f.mask.iter_mut()) {
                *x = r.random_range(-50.0..50.0);
                *m = r.random_bool(0.5);
            }
        }
    }
    let dirty = tempfile::tempdir().unwrap();
    write_generated(&data, dirty.path()).unwrap();
    let b = forecast(&ck, &open_inputs(dirty.path()).unwrap(), issue, &plan, sigma).unwrap();
    assert_eq!(product_bytes(&a), product_bytes(&b));
}

#[test]
fn short_history_lists_the_missing_days() {
    let exp = small_experiment();
    let ck = random_checkpoint(exp, 5);
    let m = &exp.config.model;
    let err = forecast(&ck, &exp.data.obs, 1, &exp.tile_plan().unwrap(), exp.config.tile.sigma(m.patch_h, m.patch_w))
        .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Input(_)));
    assert!(msg.contains("day -2") && msg.contains("day -1"), "{msg}");
}

#[test]
fn forecast_is_masked_on_land_and_renders() {
    let exp = small_experiment();
    let ck = random_checkpoint(exp, 8);
    let p = exp.forecast(&ck, 24).unwrap();
    assert_eq!(p.n_leads(), exp.config.model.t_out);
    for lead in 1..=p.n_leads() {
        let f = p.field(lead, Variable::U).unwrap();
        assert_eq!(f.day, 24 + lead as i64);
        for (k, &land) in exp.data.obs.land.iter().enumerate() {
            assert!(!(land && f.mask[k]));
            if !land {
                assert!(f.mask[k] && f.values[k].is_finite());
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("lead1.png");
    render_png(&p, 1, 4, 3, &png).unwrap();
    assert_eq!(&std::fs::read(&png).unwrap()[..4], b"\x89PNG");
}

#[test]
fn reloaded_checkpoint_forecasts_identically() {
    let exp = small_experiment();
    let mut ck = random_checkpoint(exp, 6);
    ck.params.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.climatology, ck.climatology);
    assert_eq!(product_bytes(&exp.forecast(&ck, 23).unwrap()), product_bytes(&exp.forecast(&loaded, 23).unwrap()));
}
