use proptest::prelude::*;
use seacast::forecast::persistence_forecast;
use seacast::grid::{Calendar, GridSpec, GriddedField, RegionSpec, Variable};
use seacast::metrics::{
    angle_correct, angle_error, evaluate, headline_leads, magnitude_correct, magnitude_error, match_drifters,
    render_markdown, report, vector_error, Interpolation, LeadMetrics, MatchedPair,
};
use seacast::ocean::drifters::{DrifterSample, DrifterTrack};

fn vec2() -> impl Strategy<Value = (f64, f64)> {
    (-2.0f64..2.0, -2.0f64..2.0).prop_filter("non-zero", |v| v.0.hypot(v.1) > 1e-3)
}

/// Scalar oracle built on `atan2` rather than the dot product.
fn oracle(pairs: &[MatchedPair], lead: usize) -> (usize, usize, usize, f64) {
    let (mut n, mut na, mut nm, mut sum) = (0, 0, 0, 0.0);
    for p in pairs {
        if p.lead != lead {
            continue;
        }
        n += 1;
        let (a, b) = (p.w_hat, p.w_drifter);
        let (ma, mb) = ((a.0 * a.0 + a.1 * a.1).sqrt(), (b.0 * b.0 + b.1 * b.1).sqrt());
        if ma > 0.0 && mb > 0.0 {
            let mut d = (a.1.atan2(a.0) - b.1.atan2(b.0)).abs().to_degrees();
            if d > 180.0 {
                d = 360.0 - d;
            }
            if d <= 45.0 {
                na += 1;
            }
        }
        if (ma - mb).abs() <= 0.025 {
            nm += 1;
        }
        sum += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    }
    (n, na, nm, sum)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn angle_error_is_symmetric_and_scale_free(a in vec2(), b in vec2(), s in 0.01f64..100.0, t in 0.01f64..100.0) {
        let e = angle_error(a, b).unwrap();
        prop_assert_eq!(e, angle_error(b, a).unwrap());
        let scaled = angle_error((s * a.0, s * a.1), (t * b.0, t * b.1)).unwrap();
        prop_assert!((e - scaled).abs() < 1e-6, "{} vs {}", e, scaled);
        prop_assert!((0.0..=180.0).contains(&e));
    }

    #[test]
    fn decisions_survive_rescaling_and_rotation(a in vec2(), b in vec2(), s in 0.01f64..100.0, phi in -3.2f64..3.2) {
        let theta = angle_error(a, b).unwrap();
        prop_assume!((theta - 45.0).abs() > 1e-6);
        prop_assert_eq!(angle_correct(a, b), angle_correct((s * a.0, s * a.1), b));
        let dm = magnitude_error(a, b);
        prop_assume!((dm - 0.025).abs() > 1e-9);
        let rot = |v: (f64, f64)| (v.0 * phi.cos() - v.1 * phi.sin(), v.0 * phi.sin() + v.1 * phi.cos());
        prop_assert_eq!(magnitude_correct(a, b), magnitude_correct(rot(a), rot(b)));
    }

    #[test]
    fn vector_error_obeys_the_triangle_bound(a in vec2(), b in vec2()) {
        prop_assert!(vector_error(a, b) <= a.0.hypot(a.1) + b.0.hypot(b.1) + 1e-15);
    }

    #[test]
    fn evaluate_matches_the_scalar_oracle(
        raw in prop::collection::vec(((-1.0f64..1.0, -1.0f64..1.0), (-1.0f64..1.0, -1.0f64..1.0), 1usize..4), 0..300)
    ) {
        let pairs: Vec<MatchedPair> = raw
            .iter()
            .map(|&(w_hat, w_drifter, lead)| MatchedPair { w_hat, w_drifter, lat: 0.0, lon: 0.0, valid_day: 0, lead })
            .collect();
        let got = evaluate(&pairs, 3);
        for lead in 1..=3 {
            let (n, na, nm, sum) = oracle(&pairs, lead);
            let m: &LeadMetrics = &got[lead - 1];
            prop_assert_eq!(m.n_pairs, n);
            if n == 0 {
                prop_assert!(m.meva.is_none());
                continue;
            }
            prop_assert_eq!(m.pct_correct_angle.unwrap(), 100.0 * na as f64 / n as f64);
            prop_assert_eq!(m.pct_correct_magnitude.unwrap(), 100.0 * nm as f64 / n as f64);
            prop_assert!((m.meva.unwrap() - sum / n as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn boundaries_are_inclusive() {
    assert!(angle_correct((1.0, 1.0), (1.0, 0.0)));
    assert!(angle_correct((0.0, 2.0), (3.0, 3.0)));
    assert!(!angle_correct((0.0, 1.0), (1.0, 0.0)));
    assert!(magnitude_correct((0.325, 0.0), (0.3, 0.0)));
    assert!(magnitude_correct((0.0, 0.275), (0.3, 0.0)));
    assert!(!magnitude_correct((0.33, 0.0), (0.3, 0.0)));
}

fn uniform_field(v: Variable, day: i64, grid: &GridSpec, value: f64) -> GriddedField {
    GriddedField::filled(v, day, grid.n_lat, grid.n_lon, value, true)
}

fn sample(day: i64, lat: f64, lon: f64, u: f64, v: f64) -> DrifterSample {
    DrifterSample { day, hour: 12, lat, lon, u, v }
}

#[test]
fn matching_filters_slow_drifters_and_regions() {
    let grid = GridSpec::new(30.0, 40.0, -40.0, -30.0, 0.5).unwrap();
    let cal = Calendar::default();
    let reference = [
        uniform_field(Variable::Ssh, 10, &grid, 0.0),
        uniform_field(Variable::U, 10, &grid, 0.4),
        uniform_field(Variable::V, 10, &grid, 0.0),
    ];
    let product = persistence_forecast(10, &reference, &grid, cal, 2, "test");
    let track = DrifterTrack {
        id: "a".into(),
        hourly: Vec::new(),
        daily: vec![
            sample(10, 35.0, -35.0, 0.5, 0.0),
            sample(11, 35.0, -35.0, 0.5, 0.0),
            sample(11, 36.0, -35.0, 0.1, 0.1),
            sample(12, 31.0, -39.0, 0.0, -0.3),
            sample(12, 45.0, -35.0, 0.5, 0.0),
            sample(13, 35.0, -35.0, 0.5, 0.0),
        ],
    };
    let pairs = match_drifters(&product, &[track.clone()], None, Interpolation::Bilinear);
    assert_eq!(pairs.len(), 2);
    assert_eq!((pairs[0].lead, pairs[1].lead), (1, 2));
    assert!((pairs[0].w_hat.0 - 0.4).abs() < 1e-12);

    let north = RegionSpec {
        name: "north".into(),
        lat_ranges: vec![(33.0, 40.0)],
        lon_range: (-40.0, -30.0),
    };
    let pairs = match_drifters(&product, &[track], Some(&north), Interpolation::Nearest);
    assert_eq!(pairs.len(), 1);

    let rep = report(&pairs, 2, "north", "abc");
    assert_eq!(rep.lead(1).unwrap().pct_correct_angle, Some(100.0));
    assert_eq!(rep.lead(2).unwrap().n_pairs, 0);
    let md = render_markdown(&[("Persistence".into(), rep)], &headline_leads(2));
    assert!(md.contains("Persistence"));
}
