//! Acceptance gate for the library: nine numbered criteria covering the
//! trigger algebra, the offset solver, prediction accuracy, scheduling,
//! stabilization of the stock scenario, efficiency ordering, the energy
//! monitor and reproducibility. Each test prints one line of the form
//! `criterion N: PASS - ...` on success; tolerances are pinned here.

use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use etcsim_core::adaptation::{solve_theta, taylor_estimates};
use etcsim_core::config::parse_and_validate;
use etcsim_core::engine::{run, ModeSpec, Scenario, SimResult};
use etcsim_core::ode::sample_trajectory;
use etcsim_core::output::write_bundle;
use etcsim_core::plant::{feedback_law, LevelPolicy, QuadrupleTank};
use etcsim_core::trigger::{centralized_gap, local_gaps, TriggerConfig};

const CONFIG_PATH: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../configs/paper_scenario.json"
);

// Pinned tolerances and budgets.
const SAFETY_DRAWS: usize = 100_000;
const SAFETY_BUDGET_S: f64 = 10.0;
const DECOMP_DRAWS: usize = 10_000;
const DECOMP_TOL: f64 = 1e-12;
const SOLVER_SUM_TOL: f64 = 1e-12;
const SOLVER_EQUALIZE_TOL: f64 = 1e-10;
const SOLVER_ORACLE_TOL: f64 = 1e-12;
const Q1_RATIO: (f64, f64) = (3.0, 5.0);
const Q2_RATIO: (f64, f64) = (6.5, 9.5);
const TAYLOR_TAU: f64 = 1e-2;
const LEVEL_TOL_CM: f64 = 0.1;
const PAIRWISE_TOL_CM: f64 = 0.5;
const MODE_BUDGET_S: f64 = 60.0;
const COUNT_RATIO_FLOOR: f64 = 2.0;
const ENERGY_RISE_TOL: f64 = 1e-6;

struct EtRun {
    result: SimResult,
    wall_s: f64,
}

struct PeriodicStats {
    count: u64,
    min_dt: f64,
    final_state: [f64; 6],
    wall_s: f64,
}

struct Fixture {
    scn: Scenario,
    et: Vec<EtRun>,
    periodic: PeriodicStats,
}

/// Full-horizon runs of all four modes on the shipped scenario, shared by
/// the scheduling, stabilization, ordering and energy criteria. The
/// periodic run's multi-million-row log is reduced to statistics here.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let text = std::fs::read_to_string(CONFIG_PATH).expect("shipped scenario config");
        let (_doc, scn, warnings) = parse_and_validate(&text, true).unwrap();
        assert!(warnings.is_empty(), "shipped config warned: {warnings:?}");

        let et = [
            ModeSpec::Centralized,
            ModeSpec::DecentralizedTheta0,
            ModeSpec::DecentralizedAdaptive,
        ]
        .into_iter()
        .map(|mode| {
            let t0 = Instant::now();
            let result = run(&scn, mode).unwrap();
            EtRun {
                result,
                wall_s: t0.elapsed().as_secs_f64(),
            }
        })
        .collect();

        let t0 = Instant::now();
        let p = run(
            &scn,
            ModeSpec::Periodic {
                period: scn.trigger.tau_min,
            },
        )
        .unwrap();
        let wall_s = t0.elapsed().as_secs_f64();
        let min_dt = p
            .events
            .dts
            .iter()
            .skip(1)
            .fold(f64::INFINITY, |m, &dt| m.min(dt));
        let periodic = PeriodicStats {
            count: p.summary.update_count,
            min_dt,
            final_state: p.summary.final_state,
            wall_s,
        };
        Fixture { scn, et, periodic }
    })
}

/// Random partition of `0..n` into nonempty groups.
fn random_grouping(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut groups = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.random_range(1..=n - start);
        groups.push(idx[start..start + len].to_vec());
        start += len;
    }
    groups
}

/// Zero-sum offsets on a dyadic grid so the sum is exactly zero in floats.
fn exact_zero_sum_offsets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    const SCALE: f64 = 1.0 / (1u64 << 20) as f64;
    let mut theta: Vec<f64> = (0..n - 1)
        .map(|_| rng.random_range(-(1 << 20)..=1 << 20) as f64 * SCALE)
        .collect();
    let last = -theta.iter().sum::<f64>();
    theta.push(last);
    theta
}

#[test]
fn criterion_1_local_conditions_imply_the_central_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7C5_0001);
    let t0 = Instant::now();
    let mut violations = 0usize;
    let mut all_quiet_cases = 0usize;
    for _ in 0..SAFETY_DRAWS {
        let n = rng.random_range(2..=8);
        let cfg = TriggerConfig {
            sigma: 10f64.powf(rng.random_range(-6.0..2.0)),
            tau_min: 1.0,
            grouping: random_grouping(&mut rng, n),
            center: vec![0.0; n],
        };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let theta = exact_zero_sum_offsets(&mut rng, cfg.grouping.len());
        let locals = local_gaps(&cfg, &x, &e, &theta).unwrap();
        if locals.iter().all(|g| *g <= 0.0) {
            all_quiet_cases += 1;
            if centralized_gap(&cfg, &x, &e) > 0.0 {
                violations += 1;
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    assert_eq!(
        violations, 0,
        "central condition violated while all nodes quiet"
    );
    assert!(
        all_quiet_cases > 0,
        "draw distribution never exercised the implication"
    );
    assert!(
        elapsed < SAFETY_BUDGET_S,
        "safety sweep took {elapsed:.2} s, budget {SAFETY_BUDGET_S} s"
    );
    println!(
        "criterion 1: PASS - {SAFETY_DRAWS} draws, {all_quiet_cases} all-quiet cases, \
         0 violations, {elapsed:.2} s"
    );
}

#[test]
fn criterion_2_local_gaps_sum_to_the_central_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7C5_0002);
    let mut worst = 0.0_f64;
    for _ in 0..DECOMP_DRAWS {
        let n = rng.random_range(2..=8);
        let cfg = TriggerConfig {
            sigma: 10f64.powf(rng.random_range(-6.0..2.0)),
            tau_min: 1.0,
            grouping: random_grouping(&mut rng, n),
            center: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
        };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let zeros = vec![0.0; cfg.grouping.len()];
        let locals = local_gaps(&cfg, &x, &e, &zeros).unwrap();
        let central = centralized_gap(&cfg, &x, &e);
        let gap_sum: f64 = locals.iter().sum();
        let err = (gap_sum - central).abs();
        let bound = DECOMP_TOL * (1.0 + central.abs());
        assert!(
            err <= bound,
            "decomposition error {err:e} exceeds {bound:e}"
        );
        worst = worst.max(err / (1.0 + central.abs()));
    }
    println!(
        "criterion 2: PASS - {DECOMP_DRAWS} draws, worst relative residual {worst:.3e} \
         (tolerance {DECOMP_TOL:.0e})"
    );
}

#[test]
fn criterion_3_offset_solver_equalizes_estimated_gaps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7C5_0003);
    let mut worst_sum = 0.0_f64;
    let mut worst_spread = 0.0_f64;
    let mut worst_oracle = 0.0_f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=10);
        let c_hat: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta = solve_theta(&c_hat, 0).unwrap();
        let c_max = c_hat.iter().fold(0.0_f64, |m, c| m.max(c.abs()));

        let sum = theta.values.iter().sum::<f64>().abs();
        assert!(sum <= SOLVER_SUM_TOL * n as f64 * c_max.max(f64::MIN_POSITIVE));
        worst_sum = worst_sum.max(sum);

        // Equalization: the post-offset estimated gaps must agree.
        let gaps: Vec<f64> = c_hat
            .iter()
            .zip(&theta.values)
            .map(|(c, t)| c - t)
            .collect();
        let spread = gaps.iter().fold(f64::NEG_INFINITY, |m, g| m.max(*g))
            - gaps.iter().fold(f64::INFINITY, |m, g| m.min(*g));
        assert!(spread <= SOLVER_EQUALIZE_TOL * c_max.max(1.0));
        worst_spread = worst_spread.max(spread);

        let mean = c_hat.iter().sum::<f64>() / n as f64;
        for (th, c) in theta.values.iter().zip(&c_hat) {
            let err = (th - (c - mean)).abs();
            assert!(err <= SOLVER_ORACLE_TOL, "oracle mismatch {err:e}");
            worst_oracle = worst_oracle.max(err);
        }
    }
    println!(
        "criterion 3: PASS - 500 draws, worst sum {worst_sum:.3e}, spread {worst_spread:.3e}, \
         oracle error {worst_oracle:.3e}"
    );
}

#[test]
fn criterion_4_prediction_error_shrinks_at_the_truncation_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7C5_0004);
    let fx = fixture();
    let plant = QuadrupleTank::new(
        fx.scn.params.clone(),
        fx.scn.setpoint.clone(),
        LevelPolicy::Strict,
    );
    let x: Vec<f64> = (0..6)
        .map(|i| {
            if i < 4 {
                rng.random_range(2.0..18.0)
            } else {
                rng.random_range(-5.0..5.0)
            }
        })
        .collect();
    let u = feedback_law(&fx.scn.gains, &fx.scn.setpoint, &x);

    let err = |q: u32, te: f64| -> f64 {
        let (x_hat, _) = taylor_estimates(&plant, &x, &u, q, te, Some(1e-6)).unwrap();
        let reference = sample_trajectory(&plant, &x, &u, 1e-6, te).unwrap();
        let x_ref = &reference.last().unwrap().1;
        x_hat
            .iter()
            .zip(x_ref)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let r1 = err(1, TAYLOR_TAU) / err(1, TAYLOR_TAU / 2.0);
    let r2 = err(2, TAYLOR_TAU) / err(2, TAYLOR_TAU / 2.0);
    assert!(
        (Q1_RATIO.0..=Q1_RATIO.1).contains(&r1),
        "first-order halving ratio {r1} outside [{}, {}]",
        Q1_RATIO.0,
        Q1_RATIO.1
    );
    assert!(
        (Q2_RATIO.0..=Q2_RATIO.1).contains(&r2),
        "second-order halving ratio {r2} outside [{}, {}]",
        Q2_RATIO.0,
        Q2_RATIO.1
    );
    println!("criterion 4: PASS - halving ratios q=1: {r1:.3}, q=2: {r2:.3}");
}

#[test]
fn criterion_5_update_spacing_never_dips_below_the_floor() {
    let fx = fixture();
    assert_eq!(fx.scn.trigger.tau_min, 1e-4, "shipped floor is 0.1 ms");
    let mut global_min = f64::INFINITY;
    for et in &fx.et {
        for &dt in et.result.events.dts.iter().skip(1) {
            assert!(
                dt >= fx.scn.trigger.tau_min,
                "{}: spacing {dt:e} below the floor",
                et.result.summary.mode
            );
            global_min = global_min.min(dt);
        }
    }
    assert!(fx.periodic.min_dt >= fx.scn.trigger.tau_min);
    global_min = global_min.min(fx.periodic.min_dt);
    println!(
        "criterion 5: PASS - minimum spacing over all runs {global_min:.6e} >= {:.0e}",
        fx.scn.trigger.tau_min
    );
}

/// Linear interpolation of the two controlled levels onto a uniform grid,
/// written independently of the engine's comparison helper.
fn levels_on_grid(result: &SimResult, horizon: f64, n: usize) -> Vec<(f64, f64)> {
    let times = &result.samples.times;
    let mut out = Vec::with_capacity(n);
    let mut p = 0;
    for i in 0..n {
        let t = horizon * i as f64 / (n - 1) as f64;
        while p + 1 < times.len() && times[p + 1] <= t {
            p += 1;
        }
        if p + 1 >= times.len() {
            let s = result.samples.state(times.len() - 1);
            out.push((s[0], s[1]));
            continue;
        }
        let (t0, t1) = (times[p], times[p + 1]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        let a = result.samples.state(p);
        let b = result.samples.state(p + 1);
        out.push((a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])));
    }
    out
}

#[test]
fn criterion_6_stock_scenario_stabilizes_in_every_mode() {
    let fx = fixture();
    // The shipped scenario really is the documented one.
    assert!((fx.scn.trigger.sigma - 0.0054 * 0.0054).abs() < 1e-18);
    assert_eq!(fx.scn.x0, [12.0, 10.0, 5.0, 7.0, 0.0, 0.0]);
    assert_eq!(fx.scn.setpoint.x_star[0], 15.0);
    assert_eq!(fx.scn.setpoint.x_star[1], 13.0);

    let mut worst_level = 0.0_f64;
    for et in &fx.et {
        let s = &et.result.summary;
        let d1 = (s.final_state[0] - 15.0).abs();
        let d2 = (s.final_state[1] - 13.0).abs();
        assert!(
            d1 < LEVEL_TOL_CM && d2 < LEVEL_TOL_CM,
            "{} ended off target",
            s.mode
        );
        assert!(
            et.wall_s < MODE_BUDGET_S,
            "{} took {:.1} s, budget {MODE_BUDGET_S} s",
            s.mode,
            et.wall_s
        );
        worst_level = worst_level.max(d1).max(d2);
    }
    let d1 = (fx.periodic.final_state[0] - 15.0).abs();
    let d2 = (fx.periodic.final_state[1] - 13.0).abs();
    assert!(
        d1 < LEVEL_TOL_CM && d2 < LEVEL_TOL_CM,
        "periodic ended off target"
    );
    assert!(fx.periodic.wall_s < MODE_BUDGET_S);
    worst_level = worst_level.max(d1).max(d2);

    let grids: Vec<Vec<(f64, f64)>> = fx
        .et
        .iter()
        .map(|et| levels_on_grid(&et.result, fx.scn.horizon, 2001))
        .collect();
    let mut worst_dev = 0.0_f64;
    for a in 0..grids.len() {
        for b in a + 1..grids.len() {
            for (pa, pb) in grids[a].iter().zip(&grids[b]) {
                worst_dev = worst_dev.max((pa.0 - pb.0).abs()).max((pa.1 - pb.1).abs());
            }
        }
    }
    assert!(
        worst_dev < PAIRWISE_TOL_CM,
        "event-triggered trajectories split by {worst_dev} cm"
    );
    println!(
        "criterion 6: PASS - worst final level error {worst_level:.4} cm, \
         worst pairwise deviation {worst_dev:.4} cm, slowest mode {:.1} s",
        fx.et
            .iter()
            .map(|e| e.wall_s)
            .fold(fx.periodic.wall_s, f64::max)
    );
}

#[test]
fn criterion_7_decentralization_costs_updates_in_order() {
    let fx = fixture();
    let count = |i: usize| fx.et[i].result.summary.update_count;
    let (central, theta0, adaptive) = (count(0), count(1), count(2));
    assert!(
        central <= adaptive,
        "centralized {central} > adaptive {adaptive}"
    );
    assert!(adaptive <= theta0, "adaptive {adaptive} > theta0 {theta0}");
    let ratio = theta0 as f64 / central as f64;
    assert!(
        ratio >= COUNT_RATIO_FLOOR,
        "fixed-offset overhead ratio {ratio:.2} below {COUNT_RATIO_FLOOR}"
    );
    println!(
        "criterion 7: PASS - counts centralized {central} <= adaptive {adaptive} \
         <= theta0 {theta0}; theta0/centralized = {ratio:.2} (periodic ran {})",
        fx.periodic.count
    );
}

#[test]
fn criterion_8_sampled_energy_is_monotone_at_updates() {
    let fx = fixture();
    let mut worst = f64::NEG_INFINITY;
    for et in &fx.et {
        let hd = &et.result.events.hd;
        for (k, w) in hd.windows(2).enumerate() {
            let rise = w[1] - w[0];
            let bound = ENERGY_RISE_TOL * w[0].abs().max(1e-12);
            assert!(
                rise <= bound,
                "{} row {k}: energy rose by {rise:e} (bound {bound:e})",
                et.result.summary.mode
            );
            worst = worst.max(rise / w[0].abs().max(1e-12));
        }
    }
    println!(
        "criterion 8: PASS - largest relative energy change at updates {worst:.3e} \
         (tolerance {ENERGY_RISE_TOL:.0e})"
    );
}

#[test]
fn criterion_9_identical_configs_produce_byte_identical_bundles() {
    let text = std::fs::read_to_string(CONFIG_PATH).unwrap();
    let bundle = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let (_doc, scn, _) = parse_and_validate(&text, true).unwrap();
        let result = run(&scn, ModeSpec::DecentralizedAdaptive).unwrap();
        let paths = write_bundle(dir, &result).unwrap();
        [paths.trajectory, paths.events, paths.theta, paths.summary]
            .iter()
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(p).unwrap(),
                )
            })
            .collect()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = bundle(dir_a.path());
    let b = bundle(dir_b.path());
    assert_eq!(a.len(), 4);
    let mut total = 0usize;
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert!(
            bytes_a == bytes_b,
            "{name_a} differs between two runs of the same config"
        );
        total += bytes_a.len();
    }
    println!(
        "criterion 9: PASS - two independent runs wrote identical bundles \
         ({} files, {total} bytes)",
        a.len()
    );
}
