use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use seacast::analysis::{
    adjusted_rand_index, assign, cluster_matrices, crossover_bias, embedding_grid, minibatch_kmeans, reorder_clusters,
    KMeansConfig, KMeansInit,
};
use seacast::grid::{GridSpec, GriddedField, RegionSpec, Variable};
use seacast::net::{init_parameters, ModelConfig};
use seacast::rng;

fn blobs(seed: u64, k: usize, per: usize, dim: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::stream(seed, "blobs", 0);
    let noise = Normal::new(0.0, spread).unwrap();
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| r.random_range(-10.0..10.0)).collect()).collect();
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, mu) in centres.iter().enumerate() {
        for _ in 0..per {
            pts.push(mu.iter().map(|m| m + noise.sample(&mut r)).collect());
            labels.push(c);
        }
    }
    (pts, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kmeans_never_ends_worse_than_it_starts(seed in 0u64..1000, k in 2usize..8, spread in 0.2f64..3.0) {
        let (pts, _) = blobs(seed, k, 20, 4, spread);
        let cfg = KMeansConfig { k, batch_size: 8, max_iters: 500, seed, init: KMeansInit::Uniform };
        let start = minibatch_kmeans(&pts, &KMeansConfig { max_iters: 0, ..cfg.clone() }).unwrap();
        let end = minibatch_kmeans(&pts, &cfg).unwrap();
        prop_assert!(end.inertia <= start.inertia);
        prop_assert_eq!(assign(&pts, &end.centroids).1, end.inertia);
    }

    #[test]
    fn reordering_relabels_without_changing_the_partition(
        seed in 0u64..1000,
        k in 2usize..12,
        n in 1usize..200,
    ) {
        let mut r = rng::stream(seed, "relabel", 0);
        let assignments: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let points: Vec<(f64, f64, u32)> = (0..n).map(|_| (r.random_range(-60.0..60.0), r.random_range(-180.0..180.0), 0)).collect();
        let centroids: Vec<Vec<f64>> = (0..k).map(|c| vec![c as f64, 1.0]).collect();
        let (cs, relabeled, map) = reorder_clusters(&centroids, &assignments, &points);
        let mut seen = map.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
        for i in 0..n {
            prop_assert_eq!(relabeled[i], map[assignments[i]]);
            prop_assert_eq!(&cs[map[assignments[i]]], &centroids[assignments[i]]);
        }
        if n > 1 {
            prop_assert_eq!(adjusted_rand_index(&assignments, &relabeled), 1.0);
        }
    }

    #[test]
    fn crossover_is_antisymmetric(seed in 0u64..1000, days in 1usize..6) {
        let mut r = rng::stream(seed, "crossover", 0);
        let field = |r: &mut rng::Rng, day: i64| {
            let values = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
            let mask = (0..100).map(|_| r.random_bool(0.6)).collect();
            GriddedField::new(Variable::Ssh, day, 10, 10, values, mask)
        };
        let a: Vec<_> = (0..days as i64).map(|d| field(&mut r, d)).collect();
        let b: Vec<_> = (0..days as i64).map(|d| field(&mut r, d)).collect();
        let ab = crossover_bias(&a, &b).unwrap();
        let ba = crossover_bias(&b, &a).unwrap();
        prop_assert_eq!(ab.mean_bias, -ba.mean_bias);
        prop_assert_eq!(ab.std, ba.std);
        prop_assert_eq!(ab.n_points, ba.n_points);
        prop_assert!(ab.std >= 0.0);
    }
}

#[test]
fn separated_blobs_are_recovered() {
    let (pts, truth) = blobs(1, 10, 30, 8, 0.3);
    let res = minibatch_kmeans(
        &pts,
        &KMeansConfig {
            k: 10,
            init: KMeansInit::PlusPlus,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(adjusted_rand_index(&res.assignments, &truth) > 0.95);
    let (corr, dist, _) = cluster_matrices(&res.centroids).unwrap();
    for i in 0..10 {
        assert!((corr[i][i] - 1.0).abs() < 1e-12);
        assert_eq!(dist[i][i], 0.0);
        for j in 0..10 {
            assert_eq!(dist[i][j], dist[j][i]);
        }
    }
}

#[test]
fn embedding_grid_skips_land() {
    let params = init_parameters(&ModelConfig::default(), 1).unwrap();
    let grid = GridSpec::new(30.0, 31.0, -40.0, -39.0, 0.5).unwrap();
    let region = RegionSpec::whole_grid(&grid);
    let all = embedding_grid(&params, &region, 0.25, 0.25, &[0, 10], None).unwrap();
    assert_eq!(all.points.len(), 2 * 5 * 5);
    assert!(all.vectors.iter().all(|v| v.len() == 32));
    let land = vec![true, false, false, false];
    let wet = embedding_grid(&params, &region, 0.25, 0.25, &[0], Some((&grid, &land))).unwrap();
    assert!(wet.points.len() < 25);
    assert!(wet.points.iter().all(|&(lat, lon, _)| grid.cell_of(lat, lon) != Some((0, 0))));
    assert!(embedding_grid(&params, &region, 0.0, 0.25, &[0], None).is_err());
}
