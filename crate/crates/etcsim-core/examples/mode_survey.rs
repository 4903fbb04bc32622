//! Runs every mode on the stock scenario and prints a comparison table.
//!
//! ```text
//! cargo run --example mode_survey --release
//! ```

use std::time::Instant;

use etcsim_core::config::ConfigDocument;
use etcsim_core::engine::{compare_modes, ModeSpec};

fn main() {
    let (mut scn, _) = ConfigDocument::default().compile().unwrap();
    scn.h = 1e-3;
    let modes = [
        ModeSpec::Centralized,
        ModeSpec::DecentralizedTheta0,
        ModeSpec::DecentralizedAdaptive,
        ModeSpec::Periodic { period: 1e-2 },
    ];
    let t0 = Instant::now();
    let report = compare_modes(&scn, &modes).unwrap();
    let wall = t0.elapsed();

    println!(
        "{:<24} {:>9} {:>12} {:>12} {:>12} {:>10} {:>12}",
        "mode", "updates", "min dt", "mean dt", "max dt", "final |d|", "hd rise"
    );
    for oc in &report.outcomes {
        match &oc.result {
            Ok(r) => {
                let s = &r.summary;
                println!(
                    "{:<24} {:>9} {:>12.6} {:>12.6} {:>12.6} {:>10.4} {:>12.3e}",
                    s.mode,
                    s.update_count,
                    s.min_interval.unwrap_or(f64::NAN),
                    s.mean_interval.unwrap_or(f64::NAN),
                    s.max_interval.unwrap_or(f64::NAN),
                    s.final_distance,
                    s.hd_max_relative_increase,
                );
            }
            Err(e) => println!("{:<24} failed: {e}", oc.mode),
        }
    }
    for p in &report.pairs {
        println!(
            "deviation {:<22} vs {:<22} {:.6} cm",
            p.first, p.second, p.max_xy_deviation
        );
    }
    println!("total wall time {wall:.2?}");
}
