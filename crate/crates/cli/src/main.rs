use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use musa::engine::LogPoints;
use musa::experiment::{execute, ExperimentConfig, ExperimentError, Plan};
use musa::optimizer::{brute_force, composition_count, gap_params, optimal_config, OptimizeError, DEFAULT_ORACLE_CAP};
use musa::ModelSpec;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "musa", version, about = "Decentralized multi-user bandit spectrum-access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the optimal configuration, J1, J2 and the gap for a model.
    Oracle {
        /// Model file (TOML).
        #[arg(long)]
        model: PathBuf,
        /// Number of users K.
        #[arg(long)]
        users: usize,
        /// Skip the brute-force cross-check above this many configurations.
        #[arg(long, default_value_t = DEFAULT_ORACLE_CAP as u64)]
        cap: u64,
    },
    /// Run an experiment and write CSV traces plus summary.toml.
    Run(RunArgs),
    /// Check a config without running it.
    Validate {
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory (default: the config's `output.dir`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log every n-th slot.
    #[arg(long, conflicts_with = "log_powers")]
    log_every: Option<u64>,
    /// Log at powers of two.
    #[arg(long)]
    log_powers: bool,
    /// Write every slot's outcome.
    #[arg(long)]
    full_log: bool,
}

/// Failure tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        Failure { code, error: e.into() }
    }
}

fn validation(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_VALIDATION, error: error.into() }
}

/// Up to 12 significant digits, trailing zeros dropped.
fn num(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.') } else { &s };
    if s == "-0" { "0".into() } else { s.into() }
}

fn oracle(model: &Path, users: usize, cap: u64) -> Result<(), Failure> {
    let spec = ModelSpec::load(model).map_err(validation)?;
    let model = spec.build().map_err(validation)?;
    let table = model.means();
    let (k_star, j1) = optimal_config(table, users).map_err(validation)?;
    match gap_params(table, users) {
        Ok(g) => println!("k*={k_star} J1={} J2={} Δ={}", num(j1), num(g.j2), num(g.delta)),
        Err(OptimizeError::DegenerateGap { .. }) => {
            println!("k*={k_star} J1={} J2=undefined Δ=undefined", num(j1));
            println!("degenerate gap: every configuration of {users} users has system value {}", num(j1));
        }
        Err(e) => return Err(validation(e)),
    }
    let count = composition_count(table.channels(), table.max_occupancy(), users);
    match brute_force(table, users, cap as u128) {
        Ok(report) => {
            let dp_j2 = gap_params(table, users).ok().map(|g| g.j2);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            let j2_agrees = match (report.j2(), dp_j2) {
                (Some(a), Some(b)) => close(a, b),
                (a, b) => a.is_none() && b.is_none(),
            };
            let agrees = report.best == k_star && close(report.j1(), j1) && j2_agrees;
            if agrees {
                println!("brute force: agrees ({count} configurations)");
            } else {
                println!("brute force: MISMATCH (oracle k*={} J1={})", report.best, num(report.j1()));
                return Err(Failure { code: EXIT_RUNTIME, error: anyhow::anyhow!("optimizer disagrees with brute force") });
            }
        }
        Err(OptimizeError::OracleTooLarge { .. }) => {
            println!("brute force: skipped ({count} configurations exceed the cap of {cap})");
        }
        Err(e) => return Err(Failure { code: EXIT_RUNTIME, error: e.into() }),
    }
    Ok(())
}

fn load_plan(path: &Path, tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<Plan, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(validation)?;
    let mut config = ExperimentConfig::from_toml_str(&text)?;
    tweak(&mut config);
    let base = path.parent().unwrap_or(Path::new("."));
    let plan = Plan::prepare(config, base, Some(&text))?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    Ok(plan)
}

fn run_cmd(args: RunArgs) -> Result<(), Failure> {
    let plan = load_plan(&args.config, |c| {
        if let Some(seed) = args.seed {
            c.seed = seed;
        }
        if let Some(runs) = args.runs {
            c.runs = runs;
        }
        if let Some(n) = args.log_every {
            c.output.log = LogPoints::Every(n);
        }
        if args.log_powers {
            c.output.log = LogPoints::PowersOfTwo;
        }
        c.output.full_log |= args.full_log;
    })?;
    let dir = args.out.or_else(|| plan.config.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let report = execute(&plan, &dir)?;
    let s = &report.summary;
    println!("wrote {} run(s) to {}", s.runs, dir.display());
    println!("R(T) at T={}: mean {} std {}", s.horizon, num(s.final_regret_mean), num(s.final_regret_std));
    if plan.params.is_some() {
        println!(
            "estimation regret {} allocation regret {} (means over runs)",
            num(s.estimation_regret_mean),
            num(s.allocation_regret_mean)
        );
        println!("schedule check: {} violations in {} samples", s.schedule_violations, s.samples_checked);
    }
    if let Some(b) = &s.bound {
        println!("static regret bound: {} (bound at T {})", if b.holds { "holds" } else { "VIOLATED" }, num(b.bound_at_horizon));
    }
    for r in &s.rate {
        println!("R(t)/(sqrt(t) ln t) at t={}: {}", r.t, num(r.rate));
    }
    Ok(())
}

fn validate_cmd(path: &Path) -> Result<(), Failure> {
    let plan = load_plan(path, |_| {})?;
    let mut line = format!("ok: K={} M={} N={}", plan.users, plan.model.channels(), plan.model.max_occupancy());
    if let Some(g) = plan.gap {
        line += &format!(" Δ={}", num(g.delta));
    }
    if let (Some(d), Some(p)) = (plan.delta_lb, plan.params) {
        line += &format!(" delta_lb={} T0={}", num(d), p.samples_per_cell);
    }
    if let Some(len) = plan.estimation_len {
        line += &format!(" estimation={len}");
    }
    println!("{line}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Oracle { model, users, cap } => oracle(&model, users, cap),
        Command::Run(args) => run_cmd(args),
        Command::Validate { config } => validate_cmd(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
