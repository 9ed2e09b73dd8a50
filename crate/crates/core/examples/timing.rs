//! Trains the pinned acceptance curriculum once and prints per-stage scores.
//!
//! Usage: `cargo run --release --example timing -- [seed] [L4_ANALOG|NEUROST_ANALOG]`

use std::time::Instant;

use seacast::pipeline::{Experiment, RunConfig};
use seacast::train::TargetSource;

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|a| a.parse().expect("seed")).unwrap_or(1);
    let source = match args.next().as_deref() {
        Some("NEUROST_ANALOG") => TargetSource::NeurostAnalog,
        _ => TargetSource::L4Analog,
    };
    let mut cfg = RunConfig::acceptance();
    for s in cfg.stages.iter_mut() {
        s.target_source = source;
    }
    let t = Instant::now();
    let exp = Experiment::prepare(cfg.clone()).expect("prepare");
    println!("prepare {:.2}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let res = exp.train(&cfg.stages, seed).expect("train");
    println!("train {:.2}s", t.elapsed().as_secs_f64());
    for r in &res {
        let h: Vec<String> = r.history.iter().map(|h| format!("{:.3}", h.mean_loss)).collect();
        println!("{} {}", r.stage, h.join(" "));
        let rep = exp.evaluate_checkpoint(&exp.checkpoint(r, seed)).expect("evaluate");
        for l in &rep.leads {
            println!(
                "  lead {} angle {:.1} mag {:.1} meva {:.4} n {}",
                l.lead,
                l.pct_correct_angle.unwrap_or(f64::NAN),
                l.pct_correct_magnitude.unwrap_or(f64::NAN),
                l.meva.unwrap_or(f64::NAN),
                l.n_pairs
            );
        }
    }
    for l in &exp.evaluate_persistence().expect("persistence").leads {
        println!(
            "  persistence lead {} angle {:.1} meva {:.4}",
            l.lead,
            l.pct_correct_angle.unwrap_or(f64::NAN),
            l.meva.unwrap_or(f64::NAN)
        );
    }
}
