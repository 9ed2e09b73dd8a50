//! Embedding clustering, SWOT/nadir crossover statistics and the Stage-1
//! target ablation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, GriddedField, RegionSpec};
use crate::metrics::{report, render_markdown, MetricsReport};
use crate::net::{embed_points, ParameterSet};
use crate::pipeline::Experiment;
use crate::rng;
use crate::train::{Stage, StageResult, TargetSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingGrid {
    /// `(lat, lon, week_index)`.
    pub points: Vec<(f64, f64, u32)>,
    pub vectors: Vec<Vec<f64>>,
}

/// Positional embeddings on a regular lat/lon lattice over the region's
/// bounding box for each week. With `land`, points on land cells of that
/// grid are skipped.
pub fn embedding_grid(
    params: &ParameterSet,
    region: &RegionSpec,
    lat_step: f64,
    lon_step: f64,
    weeks: &[u32],
    land: Option<(&GridSpec, &[bool])>,
) -> Result<EmbeddingGrid> {
    if !(lat_step > 0.0 && lon_step > 0.0) {
        return Err(Error::config("embedding grid steps must be positive"));
    }
    let lat_lo = region.lat_ranges.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let lat_hi = region.lat_ranges.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let n_lat = ((lat_hi - lat_lo) / lat_step + 1e-9).floor() as usize + 1;
    let n_lon = ((region.lon_range.1 - region.lon_range.0) / lon_step + 1e-9).floor() as usize + 1;
    let mut points = Vec::new();
    for &week in weeks {
        for a in 0..n_lat {
            let lat = lat_lo + a as f64 * lat_step;
            for b in 0..n_lon {
                let lon = region.lon_range.0 + b as f64 * lon_step;
                if !region.contains(lat, lon) {
                    continue;
                }
                if let Some((grid, mask)) = land {
                    if let Some((i, j)) = grid.cell_of(lat, lon) {
                        if mask[i * grid.n_lon + j] {
                            continue;
                        }
                    }
                }
                points.push((lat, lon, week));
            }
        }
    }
    let vectors = embed_points(params, &points)?;
    Ok(EmbeddingGrid { points, vectors })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KMeansInit {
    /// `k` distinct points drawn uniformly.
    #[default]
    Uniform,
    /// D²-weighted seeding.
    PlusPlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub init: KMeansInit,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 30,
            batch_size: 8,
            max_iters: 10_000,
            seed: 0,
            init: KMeansInit::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Assignment of every point to its nearest centroid, and the inertia.
pub fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let a = points
        .iter()
        .map(|x| {
            let (c, d) = nearest(x, centroids);
            inertia += d;
            c
        })
        .collect();
    (a, inertia)
}

fn init_centroids(points: &[Vec<f64>], k: usize, init: KMeansInit, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    match init {
        KMeansInit::Uniform => sample(rng, points.len(), k).into_iter().map(|i| points[i].clone()).collect(),
        KMeansInit::PlusPlus => {
            let mut cs = vec![points[rng.random_range(0..points.len())].clone()];
            let mut d2: Vec<f64> = points.iter().map(|x| sq_dist(x, &cs[0])).collect();
            while cs.len() < k {
                let total: f64 = d2.iter().sum();
                let pick = if total > 0.0 {
                    let mut r = rng.random_range(0.0..total);
                    let mut idx = d2.len() - 1;
                    for (i, &d) in d2.iter().enumerate() {
                        if r < d {
                            idx = i;
                            break;
                        }
                        r -= d;
                    }
                    idx
                } else {
                    rng.random_range(0..points.len())
                };
                cs.push(points[pick].clone());
                for (i, x) in points.iter().enumerate() {
                    d2[i] = d2[i].min(sq_dist(x, &cs[cs.len() - 1]));
                }
            }
            cs
        }
    }
}

/// Moves each centroid without members onto the point farthest from its own
/// centroid, one at a time.
fn reseed_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], mut assignments: Vec<usize>, k: usize) {
    for _ in 0..k {
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(&points[a], &centroids[assignments[a]]);
                let db = sq_dist(&points[b], &centroids[assignments[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
        let Some(far) = far else { break };
        centroids[empty] = points[far].clone();
        assignments = assign(points, centroids).0;
    }
}

/// Mini-batch k-means with per-centroid `1/count` learning rates. After the
/// iteration budget, a cluster left without members is moved onto the point
/// farthest from its own centroid, repeatedly until none is empty.
pub fn minibatch_kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k < 2 || cfg.batch_size == 0 {
        return Err(Error::config("k-means needs k >= 2 and a positive batch size"));
    }
    if points.len() < cfg.k {
        return Err(Error::input(format!("{} points are fewer than k = {}", points.len(), cfg.k)));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::input("k-means points differ in dimension"));
    }
    let mut rng = rng::stream(cfg.seed, "kmeans", 0);
    let mut centroids = init_centroids(points, cfg.k, cfg.init, &mut rng);
    let mut counts = vec![0u64; cfg.k];
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.max_iters {
        batch.clear();
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..points.len());
            batch.push((i, nearest(&points[i], &centroids).0));
        }
        for &(i, c) in &batch {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (m, x) in centroids[c].iter_mut().zip(&points[i]) {
                *m = (1.0 - eta) * *m + eta * x;
            }
        }
    }
    let (assignments, _) = assign(points, &centroids);
    reseed_empty(points, &mut centroids, assignments, cfg.k);
    let (assignments, inertia) = assign(points, &centroids);
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
    })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sa: f64 = ra.values().map(|&n| choose2(n)).sum();
    let sb: f64 = rb.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Relabels clusters by ascending mean member latitude, ties by mean
/// longitude. Empty clusters go last. Returns the new centroids, the new
/// assignments and `old → new` label map.
pub fn reorder_clusters(
    centroids: &[Vec<f64>],
    assignments: &[usize],
    points: &[(f64, f64, u32)],
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let k = centroids.len();
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (&a, p) in assignments.iter().zip(points) {
        sums[a].0 += p.0;
        sums[a].1 += p.1;
        sums[a].2 += 1;
    }
    let key = |c: usize| {
        let (la, lo, n) = sums[c];
        if n == 0 {
            (f64::INFINITY, f64::INFINITY)
        } else {
            (la / n as f64, lo / n as f64)
        }
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| {
        let (a, b) = (key(x), key(y));
        a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(x.cmp(&y))
    });
    let mut map = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        map[old] = new;
    }
    let new_centroids = order.iter().map(|&o| centroids[o].clone()).collect();
    let new_assign = assignments.iter().map(|&a| map[a]).collect();
    (new_centroids, new_assign, map)
}

/// Pearson correlation and Euclidean distance between centroids. A
/// zero-variance centroid gets correlation 0 off the diagonal; the count of
/// such centroids is returned as well.
pub fn cluster_matrices(centroids: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
    let k = centroids.len();
    if k < 2 {
        return Err(Error::input("cluster matrices need at least two centroids"));
    }
    let centred: Vec<(Vec<f64>, f64)> = centroids
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let d: Vec<f64> = c.iter().map(|x| x - m).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d, n)
        })
        .collect();
    let degenerate = centred.iter().filter(|c| c.1 == 0.0).count();
    if degenerate > 0 {
        log::warn!("{degenerate} centroid(s) have zero variance; their correlations are set to 0");
    }
    let mut corr = vec![vec![0.0; k]; k];
    let mut dist = vec![vec![0.0; k]; k];
    for a in 0..k {
        corr[a][a] = 1.0;
        for b in a + 1..k {
            let (da, na) = &centred[a];
            let (db, nb) = &centred[b];
            let r = if *na == 0.0 || *nb == 0.0 {
                0.0
            } else {
                (da.iter().zip(db).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
            };
            let d = sq_dist(&centroids[a], &centroids[b]).sqrt();
            corr[a][b] = r;
            corr[b][a] = r;
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    Ok((corr, dist, degenerate))
}

pub fn write_matrix_csv(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut text = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_cluster_map_csv(path: &Path, points: &[(f64, f64, u32)], labels: &[usize]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("lat,lon,week,cluster\n");
    for (p, l) in points.iter().zip(labels) {
        text.push_str(&format!("{},{},{},{}\n", p.0, p.1, p.2, l));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverStats {
    pub n_points: usize,
    pub mean_bias: f64,
    pub std: f64,
    /// Distinct days contributing at least one crossover.
    pub n_days: usize,
}

/// Statistics of `swot − nadir` over every co-observed cell and day.
pub fn crossover_bias(swot: &[GriddedField], nadir: &[GriddedField]) -> Result<CrossoverStats> {
    let by_day: BTreeMap<i64, &GriddedField> = nadir.iter().map(|f| (f.day, f)).collect();
    let mut diffs = Vec::new();
    let mut days = 0;
    for s in swot {
        let Some(n) = by_day.get(&s.day) else { continue };
        if n.values.len() != s.values.len() {
            return Err(Error::input(format!("swot and nadir grids differ on day {}", s.day)));
        }
        let before = diffs.len();
        for k in 0..s.values.len() {
            if s.mask[k] && n.mask[k] {
                diffs.push(s.values[k] - n.values[k]);
            }
        }
        if diffs.len() > before {
            days += 1;
        }
    }
    if diffs.is_empty() {
        return Err(Error::input("no co-located SWOT and nadir observations"));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(CrossoverStats {
        n_points: diffs.len(),
        mean_bias: mean,
        std,
        n_days: days,
    })
}

/// Finished curricula keyed by Stage-1 target source and seed, so repeated
/// analyses of one experiment train each variant once.
pub type CurriculumCache = BTreeMap<(TargetSource, u64), Vec<StageResult>>;

pub fn run_variant<'a>(
    exp: &Experiment,
    source: TargetSource,
    seed: u64,
    cache: &'a mut CurriculumCache,
) -> Result<&'a [StageResult]> {
    if !cache.contains_key(&(source, seed)) {
        let mut stages = vec![exp.config.stage_config(Stage::S1)];
        stages[0].target_source = source;
        stages.extend(exp.config.stages.iter().filter(|s| s.stage != Stage::S1).cloned());
        let results = exp.train(&stages, seed)?;
        cache.insert((source, seed), results);
    }
    Ok(&cache[&(source, seed)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: TargetSource,
    pub stage: Stage,
    pub report: MetricsReport,
}

/// Trains every variant for every seed and scores each stage checkpoint on
/// the held-out drifters, pooling pairs across seeds.
pub fn ablation_run(
    exp: &Experiment,
    variants: &[TargetSource],
    seeds: &[u64],
    cache: &mut CurriculumCache,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let mut pooled: BTreeMap<Stage, Vec<crate::metrics::MatchedPair>> = BTreeMap::new();
        for &seed in seeds {
            let results = run_variant(exp, variant, seed, cache)?.to_vec();
            for r in &results {
                let pairs = exp.pairs_for_checkpoint(&exp.checkpoint(r, seed))?;
                pooled.entry(r.stage).or_default().extend(pairs);
            }
        }
        for (stage, pairs) in pooled {
            rows.push(AblationRow {
                variant,
                stage,
                report: report(&pairs, exp.config.model.t_out, &exp.config.region()?.name, variant.name()),
            });
        }
    }
    Ok(rows)
}

pub fn ablation_markdown(rows: &[AblationRow], leads: &[usize]) -> String {
    let named: Vec<(String, MetricsReport)> = rows
        .iter()
        .map(|r| (format!("{} {}", r.variant.name(), r.stage), r.report.clone()))
        .collect();
    render_markdown(&named, leads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = minibatch_kmeans(&pts, &KMeansConfig { k: 5, max_iters: 200, ..Default::default() }).unwrap();
        assert!(r.inertia < 1e-20);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert!(minibatch_kmeans(&pts[..3], &KMeansConfig { k: 5, ..Default::default() }).is_err());
    }

    #[test]
    fn reorder_examples() {
        let c = vec![vec![0.0], vec![1.0]];
        let pts = [(40.0, 0.0, 0), (-40.0, 0.0, 0)];
        let (_, a, map) = reorder_clusters(&c, &[0, 1], &pts);
        assert_eq!(a, vec![1, 0]);
        assert_eq!(map, vec![1, 0]);
        let pts = [(10.0, 5.0, 0), (10.0, -5.0, 0)];
        let (_, a, _) = reorder_clusters(&c, &[0, 1], &pts);
        assert_eq!(a, vec![1, 0]);
    }

    #[test]
    fn matrices_examples() {
        let (corr, dist, _) = cluster_matrices(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![-1.0, -2.0, -3.0]]).unwrap();
        assert!((corr[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(dist[0][1], 0.0);
        assert!((corr[0][2] + 1.0).abs() < 1e-12);
        let (corr, _, bad) = cluster_matrices(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(bad, 1);
        assert_eq!(corr[0][1], 0.0);
    }

    #[test]
    fn crossover_examples() {
        let mk = |v: f64, day| GriddedField::filled(crate::grid::Variable::Ssh, day, 2, 2, v, true);
        let s = crossover_bias(&[mk(0.0526 + 0.1, 0)], &[mk(0.1, 0)]).unwrap();
        assert!((s.mean_bias - 0.0526).abs() < 1e-12);
        assert!(s.std < 1e-12);
        let mut none = mk(0.0, 0);
        none.mask = vec![false; 4];
        assert!(crossover_bias(&[none], &[mk(0.0, 0)]).is_err());
    }
}
