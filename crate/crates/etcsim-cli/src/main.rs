//! Command-line front end for the event-triggered control simulator.
//!
//! Four subcommands cover the workflow: `simulate` runs one update policy
//! and writes an output bundle, `compare` runs several policies on the same
//! scenario and reports their deviations, `sweep` runs a grid of trigger
//! variants and aggregates the summaries, and `validate-config` checks a
//! configuration file without running anything.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
//! 4 filesystem error. Invalid flags exit 2 through the argument parser.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use etcsim_core::config::{self, ConfigDocument, TeRuleName};
use etcsim_core::engine::{self, ModeSpec, Summary};
use etcsim_core::{output, plant, Error, Result};

#[derive(Parser)]
#[command(
    name = "etcsim",
    version,
    about = "Event-triggered control simulation for a four-tank process"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write its output bundle.
    Simulate(SimulateArgs),
    /// Run several update policies on one scenario and compare trajectories.
    Compare(CompareArgs),
    /// Run a grid of trigger and prediction variants, one summary row each.
    Sweep(SweepArgs),
    /// Check a configuration file and report every rule it violates.
    ValidateConfig(ValidateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Downgrade unknown configuration keys from errors to warnings.
    #[arg(long)]
    lenient: bool,

    /// Replace the seed recorded in the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Update policy to run; defaults to the `mode` key in the configuration.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,

    /// Update period in seconds; required by the periodic policy.
    #[arg(long, value_name = "SECONDS")]
    period: Option<f64>,

    /// Output directory; defaults to `output_dir` in the configuration,
    /// then to `etcsim-out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Comma-separated policies to compare; defaults to all four.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    modes: Option<Vec<String>>,

    /// Update period in seconds for the periodic policy; defaults to the
    /// minimum update spacing from the configuration.
    #[arg(long, value_name = "SECONDS")]
    period: Option<f64>,

    /// Output directory; defaults to `output_dir` in the configuration,
    /// then to `etcsim-out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Update policy for every cell; defaults to the `mode` key in the
    /// configuration.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,

    /// Update period in seconds; required by the periodic policy.
    #[arg(long, value_name = "SECONDS")]
    period: Option<f64>,

    /// Output directory; defaults to `output_dir` in the configuration,
    /// then to `etcsim-out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Comma-separated trigger level values; defaults to the configured one.
    #[arg(
        long,
        value_name = "LIST",
        value_delimiter = ',',
        allow_hyphen_values = true
    )]
    sigma: Option<Vec<f64>>,

    /// Comma-separated prediction orders; defaults to the configured one.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    q: Option<Vec<u32>>,

    /// Comma-separated prediction horizon rules; defaults to the configured
    /// one.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    te_rule: Option<Vec<String>>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Random states to draw for the energy-gradient alignment check;
    /// 0 skips it.
    #[arg(long, value_name = "N", default_value_t = 0)]
    gradient_samples: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ValidateConfig(args) => cmd_validate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Validation(_) | Error::Precondition(_) | Error::Capability(_) => 2,
        Error::Domain(_) | Error::NonFinite(_) | Error::Diverged { .. } => 3,
        Error::Io { .. } => 4,
    }
}

/// Read and parse the configuration file, applying the seed override.
fn load_document(args: &ConfigArgs) -> Result<(ConfigDocument, Vec<String>)> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Io {
        path: args.config.display().to_string(),
        source: e,
    })?;
    let (mut doc, warnings) = config::parse_document(&text, !args.lenient)?;
    if let Some(seed) = args.seed {
        doc.seed = Some(seed);
    }
    Ok((doc, warnings))
}

fn report_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Pick the update policy: the flag wins over the configuration's `mode` key.
fn resolve_mode(
    cli_mode: Option<&str>,
    doc: &ConfigDocument,
    period: Option<f64>,
) -> Result<ModeSpec> {
    let name = cli_mode.or(doc.mode.as_deref()).ok_or_else(|| {
        Error::Precondition(
            "no update policy selected; pass --mode or set \"mode\" in the configuration".into(),
        )
    })?;
    ModeSpec::parse(name, period)
}

/// Pick the output directory: flag, then configuration, then `etcsim-out`.
fn resolve_out(cli_out: Option<PathBuf>, doc: &ConfigDocument) -> PathBuf {
    cli_out
        .or_else(|| doc.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("etcsim-out"))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let (doc, mut warnings) = load_document(&args.config)?;
    let mode = resolve_mode(args.mode.as_deref(), &doc, args.period)?;
    let (scn, compile_warnings) = doc.compile()?;
    warnings.extend(compile_warnings);
    report_warnings(&warnings);
    let out = resolve_out(args.out, &doc);

    let result = engine::run(&scn, mode)?;
    report_warnings(&result.warnings);
    output::write_bundle(&out, &result)?;

    let s = &result.summary;
    println!(
        "mode {}: {} updates over {} s",
        s.mode, s.update_count, scn.horizon
    );
    if let (Some(min), Some(mean), Some(max)) = (s.min_interval, s.mean_interval, s.max_interval) {
        println!("update intervals s: min {min:.6e}  mean {mean:.6e}  max {max:.6e}");
    }
    println!(
        "final distance to operating point: {:.6e}",
        s.final_distance
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let (doc, mut warnings) = load_document(&args.config)?;
    let (scn, compile_warnings) = doc.compile()?;
    warnings.extend(compile_warnings);
    report_warnings(&warnings);

    let names: Vec<String> = match args.modes {
        Some(list) => list,
        None => ModeSpec::NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let period = args.period.unwrap_or(scn.trigger.tau_min);
    let modes = names
        .iter()
        .map(|n| ModeSpec::parse(n, Some(period)))
        .collect::<Result<Vec<_>>>()?;
    let out = resolve_out(args.out, &doc);

    let report = engine::compare_modes(&scn, &modes)?;
    let path = output::write_comparison(&out, &report)?;

    for outcome in &report.outcomes {
        match &outcome.result {
            Ok(r) => println!(
                "{}: {} updates, final distance {:.6e}",
                outcome.mode, r.summary.update_count, r.summary.final_distance
            ),
            Err(e) => println!("{}: failed: {e}", outcome.mode),
        }
    }
    if let Some(dev) = report.max_pairwise_deviation {
        println!("max pairwise level deviation: {dev:.6e} cm");
    }
    println!("wrote {}", path.display());

    if report.outcomes.iter().all(|o| o.result.is_err()) {
        let first = report
            .outcomes
            .first()
            .and_then(|o| o.result.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(Error::NonFinite(format!(
            "every compared policy failed; first error: {first}"
        )));
    }
    Ok(())
}

fn te_rule_name(rule: TeRuleName) -> &'static str {
    match rule {
        TeRuleName::PreviousInterval => "previous-interval",
        TeRuleName::TauMin => "tau-min",
        TeRuleName::Fixed => "fixed",
    }
}

fn parse_te_rule(name: &str) -> Result<TeRuleName> {
    match name {
        "previous-interval" => Ok(TeRuleName::PreviousInterval),
        "tau-min" => Ok(TeRuleName::TauMin),
        "fixed" => Ok(TeRuleName::Fixed),
        other => Err(Error::Precondition(format!(
            "unknown prediction horizon rule \"{other}\"; expected previous-interval, tau-min, or fixed"
        ))),
    }
}

/// Run one sweep cell on its own copy of the configuration, so an invalid
/// cell value fails only that row.
fn sweep_cell(
    doc: &ConfigDocument,
    mode: ModeSpec,
    sigma: f64,
    q: u32,
    rule: TeRuleName,
) -> std::result::Result<Summary, String> {
    let mut cell = doc.clone();
    cell.trigger.sigma = sigma;
    cell.adaptation.q = q;
    cell.adaptation.te_rule = rule;
    let (scn, _) = cell.compile().map_err(|e| e.to_string())?;
    engine::run(&scn, mode)
        .map(|r| r.summary)
        .map_err(|e| e.to_string())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (doc, mut warnings) = load_document(&args.config)?;
    let mode = resolve_mode(args.mode.as_deref(), &doc, args.period)?;
    // The base configuration must be valid on its own; cell values are
    // checked per cell so one bad value cannot sink the whole grid.
    let (_, compile_warnings) = doc.compile()?;
    warnings.extend(compile_warnings);
    report_warnings(&warnings);

    let sigmas = args.sigma.unwrap_or_else(|| vec![doc.trigger.sigma]);
    let qs = args.q.unwrap_or_else(|| vec![doc.adaptation.q]);
    let rules = match args.te_rule {
        Some(list) => list
            .iter()
            .map(|s| parse_te_rule(s))
            .collect::<Result<Vec<_>>>()?,
        None => vec![doc.adaptation.te_rule],
    };
    if sigmas.is_empty() || qs.is_empty() || rules.is_empty() {
        return Err(Error::Precondition(
            "sweep grid is empty; every axis needs at least one value".into(),
        ));
    }

    let mut cells = Vec::new();
    for &sigma in &sigmas {
        for &q in &qs {
            for &rule in &rules {
                cells.push((sigma, q, rule));
            }
        }
    }

    let rows: Vec<output::SweepRow> = cells
        .par_iter()
        .map(|&(sigma, q, rule)| output::SweepRow {
            sigma,
            q,
            te_rule: te_rule_name(rule).to_string(),
            mode: mode.name().to_string(),
            outcome: sweep_cell(&doc, mode, sigma, q, rule),
        })
        .collect();

    let out = resolve_out(args.out, &doc);
    let path = output::write_sweep(&out, &rows)?;

    let failed: Vec<&output::SweepRow> = rows.iter().filter(|r| r.outcome.is_err()).collect();
    for row in &failed {
        if let Err(e) = &row.outcome {
            eprintln!(
                "warning: cell sigma={} q={} te_rule={} failed: {e}",
                row.sigma, row.q, row.te_rule
            );
        }
    }
    println!(
        "{} of {} cells succeeded; wrote {}",
        rows.len() - failed.len(),
        rows.len(),
        path.display()
    );
    if failed.len() == rows.len() {
        return Err(Error::NonFinite("every sweep cell failed".into()));
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let (doc, mut warnings) = load_document(&args.config)?;
    let (scn, compile_warnings) = doc.compile()?;
    warnings.extend(compile_warnings);
    report_warnings(&warnings);

    println!("configuration valid: {}", args.config.config.display());
    match &doc.mode {
        Some(mode) => println!("update policy: {mode}"),
        None => println!("update policy: unset (pass --mode at run time)"),
    }
    println!(
        "sigma {:e}, tau_min {:e} s, horizon {} s, {} trigger nodes",
        scn.trigger.sigma,
        scn.trigger.tau_min,
        scn.horizon,
        scn.trigger.grouping.len()
    );

    if args.gradient_samples > 0 {
        // Levels between 1 and 20 cm with integrator states up to +-20
        // cover the shipped scenario's whole excursion.
        let lo = [1.0, 1.0, 1.0, 1.0, -20.0, -20.0];
        let hi = [20.0, 20.0, 20.0, 20.0, 20.0, 20.0];
        let seed = args.config.seed.unwrap_or(0);
        let ratio = plant::min_gradient_ratio(
            &scn.params,
            &scn.gains,
            &scn.setpoint,
            &lo,
            &hi,
            args.gradient_samples,
            seed,
        );
        println!(
            "energy gradient alignment over {} samples: min ratio {ratio:.6e}",
            args.gradient_samples
        );
        if ratio <= 0.0 {
            eprintln!(
                "warning: gradient alignment fails inside the sampled box; \
                 the energy decrease argument does not cover it"
            );
        }
    }
    Ok(())
}
