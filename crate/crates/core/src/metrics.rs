//! Drifter-referenced verification: direction, magnitude and error-vector
//! scores, forecast/drifter matching and the along-route current projection.

use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastProduct;
use crate::grid::{RegionSpec, Variable};
use crate::ocean::DrifterTrack;

pub const ANGLE_THRESHOLD_DEG: f64 = 45.0;
pub const MAGNITUDE_THRESHOLD: f64 = 0.025;
pub const MIN_DRIFTER_SPEED: f64 = 0.25;

pub type Vec2 = (f64, f64);

fn norm(a: Vec2) -> f64 {
    a.0.hypot(a.1)
}

/// Angle between two current vectors, degrees in `[0, 180]`.
pub fn angle_error(w_hat: Vec2, w: Vec2) -> Result<f64> {
    let (na, nb) = (norm(w_hat), norm(w));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::input("angle between a zero vector and another is undefined"));
    }
    let cos = ((w_hat.0 * w.0 + w_hat.1 * w.1) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

pub fn magnitude_error(w_hat: Vec2, w: Vec2) -> f64 {
    (norm(w_hat) - norm(w)).abs()
}

pub fn vector_error(w_hat: Vec2, w: Vec2) -> f64 {
    norm((w_hat.0 - w.0, w_hat.1 - w.1))
}

/// A zero prediction has no direction and counts as a wrong angle.
pub fn angle_correct(w_hat: Vec2, w: Vec2) -> bool {
    // The 45° boundary is decided on the cosine so that vectors exactly 45°
    // apart are not lost to rounding in `acos`.
    match angle_error(w_hat, w) {
        Ok(theta) => theta <= ANGLE_THRESHOLD_DEG || {
            let cos = (w_hat.0 * w.0 + w_hat.1 * w.1) / (norm(w_hat) * norm(w));
            (cos - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-15
        },
        Err(_) => false,
    }
}

pub fn magnitude_correct(w_hat: Vec2, w: Vec2) -> bool {
    // Same rounding guard for the 2.5 cm/s boundary.
    magnitude_error(w_hat, w) <= MAGNITUDE_THRESHOLD + 1e-15
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub w_hat: Vec2,
    pub w_drifter: Vec2,
    pub lat: f64,
    pub lon: f64,
    pub valid_day: i64,
    pub lead: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Pairs every daily drifter sample on day `issue_day + lead` with the
/// forecast at its position. Slow drifters, positions outside the region
/// and positions where the forecast is masked are dropped.
pub fn match_drifters(
    product: &ForecastProduct,
    tracks: &[DrifterTrack],
    region: Option<&RegionSpec>,
    interp: Interpolation,
) -> Vec<MatchedPair> {
    let grid = &product.grid;
    let mut out = Vec::new();
    for lead in 1..=product.n_leads() {
        let day = product.issue_day + lead as i64;
        let (u, v) = (
            product.field(lead, Variable::U).expect("lead in range"),
            product.field(lead, Variable::V).expect("lead in range"),
        );
        for t in tracks {
            for s in t.daily.iter().filter(|s| s.day == day) {
                if s.u.hypot(s.v) <= MIN_DRIFTER_SPEED || !grid.contains(s.lat, s.lon) {
                    continue;
                }
                if region.is_some_and(|r| !r.contains(s.lat, s.lon)) {
                    continue;
                }
                let pick = |f: &crate::grid::GriddedField| match interp {
                    Interpolation::Bilinear => f.interpolate(grid, s.lat, s.lon),
                    Interpolation::Nearest => f.nearest(grid, s.lat, s.lon),
                };
                if let (Some(pu), Some(pv)) = (pick(u), pick(v)) {
                    out.push(MatchedPair {
                        w_hat: (pu, pv),
                        w_drifter: (s.u, s.v),
                        lat: s.lat,
                        lon: s.lon,
                        valid_day: day,
                        lead,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadMetrics {
    pub lead: usize,
    pub pct_correct_angle: Option<f64>,
    pub pct_correct_magnitude: Option<f64>,
    pub meva: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub region: String,
    pub checkpoint_hash: String,
    pub leads: Vec<LeadMetrics>,
}

impl MetricsReport {
    pub fn lead(&self, lead: usize) -> Option<&LeadMetrics> {
        self.leads.iter().find(|l| l.lead == lead)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-lead scores for leads `1..=n_leads`; leads without pairs report
/// `None` with `n_pairs = 0`.
pub fn evaluate(pairs: &[MatchedPair], n_leads: usize) -> Vec<LeadMetrics> {
    let angle_ok: Vec<bool> = pairs.iter().map(|p| angle_correct(p.w_hat, p.w_drifter)).collect();
    let mag_ok: Vec<bool> = pairs.iter().map(|p| magnitude_correct(p.w_hat, p.w_drifter)).collect();
    let dv: Vec<f64> = pairs.iter().map(|p| vector_error(p.w_hat, p.w_drifter)).collect();
    (1..=n_leads)
        .map(|lead| {
            let idx: Vec<usize> = (0..pairs.len()).filter(|&k| pairs[k].lead == lead).collect();
            let n = idx.len();
            if n == 0 {
                return LeadMetrics {
                    lead,
                    pct_correct_angle: None,
                    pct_correct_magnitude: None,
                    meva: None,
                    n_pairs: 0,
                };
            }
            let na = idx.iter().filter(|&&k| angle_ok[k]).count();
            let nm = idx.iter().filter(|&&k| mag_ok[k]).count();
            let sum: f64 = idx.iter().map(|&k| dv[k]).sum();
            LeadMetrics {
                lead,
                pct_correct_angle: Some(100.0 * na as f64 / n as f64),
                pct_correct_magnitude: Some(100.0 * nm as f64 / n as f64),
                meva: Some(sum / n as f64),
                n_pairs: n,
            }
        })
        .collect()
}

pub fn report(pairs: &[MatchedPair], n_leads: usize, region: &str, checkpoint_hash: &str) -> MetricsReport {
    MetricsReport {
        region: region.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
        leads: evaluate(pairs, n_leads),
    }
}

/// Table with one row per model and angle / magnitude / MEVA columns for
/// each requested lead.
pub fn render_markdown(rows: &[(String, MetricsReport)], leads: &[usize]) -> String {
    let mut head = String::from("| Model |");
    let mut rule = String::from("|---|");
    for l in leads {
        head.push_str(&format!(" Angle T+{l} (%) | Magnitude T+{l} (%) | MEVA T+{l} (m/s) |"));
        rule.push_str("---|---|---|");
    }
    let mut out = format!("{head}\n{rule}\n");
    let fmt = |x: Option<f64>, p: usize| x.map_or("n/a".to_string(), |v| format!("{v:.p$}"));
    for (name, r) in rows {
        out.push_str(&format!("| {name} |"));
        for &l in leads {
            let m = r.lead(l);
            out.push_str(&format!(
                " {} | {} | {} |",
                fmt(m.and_then(|m| m.pct_correct_angle), 1),
                fmt(m.and_then(|m| m.pct_correct_magnitude), 1),
                fmt(m.and_then(|m| m.meva), 3)
            ));
        }
        out.push('\n');
    }
    out
}

/// Leads worth showing in a table: 1 and 7 when available, else 1 and the
/// last.
pub fn headline_leads(n_leads: usize) -> Vec<usize> {
    match n_leads {
        0 => vec![],
        1 => vec![1],
        n if n >= 7 => vec![1, 7],
        n => vec![1, n],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePoint {
    pub timestamp: NaiveDateTime,
    pub lat: f64,
    pub lon: f64,
    /// Degrees clockwise from north.
    pub heading_deg: f64,
}

/// Forecast current projected on the heading at each route point, m/s.
/// Points outside the grid or the lead horizon give `None`.
pub fn route_projection(route: &[RoutePoint], product: &ForecastProduct) -> Vec<Option<f64>> {
    route
        .iter()
        .map(|p| {
            let day = product.calendar.day_of(p.timestamp.date());
            let lead = usize::try_from(day - product.issue_day).ok()?;
            let u = product.field(lead, Variable::U)?.interpolate(&product.grid, p.lat, p.lon)?;
            let v = product.field(lead, Variable::V)?.interpolate(&product.grid, p.lat, p.lon)?;
            Some(current_along(u, v, p.heading_deg))
        })
        .collect()
}

/// `(u, v) · (sin h, cos h)`.
pub fn current_along(u: f64, v: f64, heading_deg: f64) -> f64 {
    let h = heading_deg.to_radians();
    u * h.sin() + v * h.cos()
}

pub fn read_route_csv(path: &Path) -> Result<Vec<RoutePoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::input(format!("{}: expected 4 columns", path.display())));
        }
        let ts = NaiveDateTime::parse_from_str(rec[0].trim(), "%Y-%m-%dT%H:%M:%SZ")
            .map_err(|e| Error::input(format!("{}: bad timestamp `{}`: {e}", path.display(), &rec[0])))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("{}: bad number `{}`", path.display(), &rec[k])))
        };
        out.push(RoutePoint {
            timestamp: ts,
            lat: num(1)?,
            lon: num(2)?,
            heading_deg: num(3)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_examples() {
        assert_eq!(angle_error((1.0, 0.0), (1.0, 0.0)).unwrap(), 0.0);
        assert!((angle_error((1.0, 0.0), (0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
        let d = std::f64::consts::FRAC_1_SQRT_2;
        assert!((angle_error((1.0, 0.0), (d, d)).unwrap() - 45.0).abs() < 1e-9);
        assert!(angle_correct((1.0, 0.0), (d, d)));
        assert!(angle_correct((1.0, 0.0), (1.0, 1.0)));
        assert!(!angle_correct((1.0, 0.0), (0.0, 1.0)));
        assert!(angle_error((0.0, 0.0), (1.0, 0.0)).is_err());
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_error((0.3, 0.0), (0.3, 0.0)), 0.0);
        assert!(magnitude_correct((0.30, 0.0), (0.28, 0.0)));
        assert!(!magnitude_correct((0.30, 0.0), (0.26, 0.0)));
        assert!(magnitude_correct((0.30, 0.0), (0.275, 0.0)));
    }

    #[test]
    fn vector_examples() {
        assert!((vector_error((0.3, 0.0), (0.0, 0.4)) - 0.5).abs() < 1e-15);
        assert_eq!(vector_error((0.0, 0.0), (0.3, 0.4)), 0.5);
    }

    #[test]
    fn route_examples() {
        assert!((current_along(0.5, 0.0, 90.0) - 0.5).abs() < 1e-15);
        assert!(current_along(0.5, 0.0, 0.0).abs() < 1e-15);
        assert_eq!(current_along(0.0, 0.0, 33.0), 0.0);
    }

    #[test]
    fn evaluate_small() {
        let p = |w_hat, lead| MatchedPair {
            w_hat,
            w_drifter: (0.3, 0.0),
            lat: 0.0,
            lon: 0.0,
            valid_day: 1,
            lead,
        };
        let r = evaluate(&[p((0.3, 0.0), 1)], 2);
        assert_eq!(r[0].pct_correct_angle, Some(100.0));
        assert_eq!(r[0].pct_correct_magnitude, Some(100.0));
        assert_eq!(r[0].meva, Some(0.0));
        assert_eq!(r[1].n_pairs, 0);
        assert_eq!(r[1].meva, None);
        let r = evaluate(&[p((0.3, 0.0), 1), p((0.0, 0.3), 1)], 1);
        assert_eq!(r[0].pct_correct_angle, Some(50.0));
    }
}
