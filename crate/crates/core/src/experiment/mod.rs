//! Experiment configs, validation, seeded batch runs and their outputs.
//!
//! A config is checked once by [`Plan::prepare`], which resolves the model,
//! the gap and the policy parameters. [`run_single`] and [`run_batch`] then
//! execute seeded runs; [`execute`] also writes the CSV traces and the
//! summary document.

mod config;
mod output;

pub use config::{ChurnConfig, DeltaLb, ExperimentConfig, ModelSource, OutputConfig, PolicyKind};
pub use output::{execute, write_outputs, BatchReport, BoundCheck, EpochStats, RateCheckpoint, RunStats, Summary};

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{generate_churn, validate_tau, worst_case_estimation, ChurnError, ChurnParams, ChurnSchedule, DynamicPopulation};
use crate::engine::{run, EngineError, EpochPopulation, RandomPopulation, RunResult, SlotOutcome};
use crate::env::{ModelError, RewardModel};
use crate::optimizer::{gap_params, min_gap_over_user_counts, GapParams, OptimizeError};
use crate::policy::{estimation_len, PolicyParams};

/// One problem found while validating a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// Dotted config key, e.g. `churn.tau`.
    pub key: String,
    /// 1-based line of the key in the config text, when known.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

fn join(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("cannot read {0}")]
    Io(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config:\n{}", join(.0))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Churn(#[from] ChurnError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl ExperimentError {
    /// Errors caused by the inputs rather than by running them.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Io(_) | Self::Parse(_) | Self::Model(_) | Self::Invalid(_))
    }
}

/// Independent random streams within one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rewards = 0,
    RandomPolicy = 1,
    Churn = 2,
}

const STREAMS_PER_RUN: u64 = 4;

/// Generator for `stream` of run `run` under base seed `seed`. Run `i` sees
/// the same randomness whatever the batch size.
pub fn stream_rng(seed: u64, run: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64 * STREAMS_PER_RUN + stream as u64);
    rng
}

/// `K^2 M N / (2 Delta^2) * ln T + 2 K^2 M N / (e - 2)`.
pub fn static_regret_bound(users: usize, channels: usize, max_occupancy: usize, delta: f64, t: u64) -> f64 {
    let kmn = (users * users * channels * max_occupancy) as f64;
    let log_t = if t == 0 { 0.0 } else { (t as f64).ln() };
    kmn / (2.0 * delta * delta) * log_t + 2.0 * kmn / (std::f64::consts::E - 2.0)
}

/// `R / (sqrt(t) ln t)`, the normalized dynamic-case rate.
pub fn dynamic_rate(regret: f64, t: u64) -> f64 {
    let t = t as f64;
    regret / (t.sqrt() * t.ln())
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub model: RewardModel,
    /// Population at slot 1.
    pub users: usize,
    /// Ground-truth gap at `users`; `None` when every configuration ties.
    pub gap: Option<GapParams>,
    /// Gap lower bound handed to the agents (epoch policy only).
    pub delta_lb: Option<f64>,
    /// Policy parameters (epoch policy only).
    pub params: Option<PolicyParams>,
    /// Estimation-phase length for `users` (epoch policy only).
    pub estimation_len: Option<u64>,
    pub warnings: Vec<Diagnostic>,
}

struct Checker<'a> {
    source: Option<&'a str>,
    errors: Vec<Diagnostic>,
    warnings: Vec<Diagnostic>,
}

impl Checker<'_> {
    fn diag(&self, key: &str, message: impl Into<String>) -> Diagnostic {
        Diagnostic { key: key.into(), line: self.source.and_then(|s| key_line(s, key)), message: message.into() }
    }

    fn error(&mut self, key: &str, message: impl Into<String>) {
        let d = self.diag(key, message);
        self.errors.push(d);
    }

    fn warn(&mut self, key: &str, message: impl Into<String>) {
        let d = self.diag(key, message);
        self.warnings.push(d);
    }
}

/// Line of `a.b` in TOML text: the first `b = ...` under a `[a]` header (or
/// the top level when the key has no dot). Inline tables are not searched.
pub fn key_line(source: &str, key: &str) -> Option<usize> {
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", key),
    };
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = header.trim().to_string();
            continue;
        }
        if current == table {
            if let Some(rest) = line.strip_prefix(leaf) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl Plan {
    /// Reads and validates a config file. A model file is resolved relative
    /// to the config's directory.
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        let config = ExperimentConfig::from_toml_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::prepare(config, &base, Some(&text))
    }

    /// Validates `config`, collecting every violation. `source` is the config
    /// text, used only to attach line numbers to diagnostics.
    pub fn prepare(config: ExperimentConfig, base_dir: &Path, source: Option<&str>) -> Result<Self, ExperimentError> {
        let mut ck = Checker { source, errors: Vec::new(), warnings: Vec::new() };

        if config.runs == 0 {
            ck.error("runs", "must be at least 1");
        }
        if config.horizon == 0 {
            ck.error("horizon", "must be at least 1");
        }
        if config.policy == PolicyKind::Epoch && config.tx == 0 {
            ck.error("tx", "fairness window must be at least 1 slot");
        }
        match (config.users, config.churn) {
            (Some(_), Some(_)) => ck.error("users", "give either `users` or a `[churn]` table, not both"),
            (None, None) => ck.error("users", "population size missing: set `users` or a `[churn]` table"),
            _ => {}
        }
        if config.churn.is_some() && config.policy == PolicyKind::Random {
            ck.error("policy", "the random baseline does not support churn");
        }
        if let DeltaLb::Value(d) = config.delta_lb {
            if !(d.is_finite() && d > 0.0) {
                ck.error("delta_lb", format!("must be a positive number or \"auto\", got {d}"));
            }
        }
        if config.output.full_log && config.horizon > 1_000_000 {
            ck.warn("output.full_log", format!("full slot log of {} slots per run will be very large", config.horizon));
        }

        let model = match config.model_spec(base_dir).and_then(|spec| Ok(spec.build()?)) {
            Ok(m) => Some(m),
            Err(ExperimentError::Model(e)) => {
                ck.error("model", e.to_string());
                None
            }
            Err(e) => return Err(e),
        };
        let Some(model) = model else {
            return Err(ExperimentError::Invalid(ck.errors));
        };

        let capacity = model.capacity();
        let users = config.initial_users().unwrap_or(0);
        let user_key = if config.churn.is_some() { "churn.initial_users" } else { "users" };
        if config.initial_users().is_some() && !(1..=capacity).contains(&users) {
            ck.error(user_key, format!("{users} users outside [1, M*N = {capacity}]"));
        }
        if !ck.errors.is_empty() {
            return Err(ExperimentError::Invalid(ck.errors));
        }

        let table = model.means();
        let gap = match gap_params(table, users) {
            Ok(g) => Some(g),
            Err(OptimizeError::DegenerateGap { .. }) => None,
            Err(e) => {
                ck.error(user_key, e.to_string());
                return Err(ExperimentError::Invalid(ck.errors));
            }
        };

        let mut params = None;
        let mut est_len = None;
        let mut resolved_lb = None;
        if config.policy == PolicyKind::Epoch {
            // the gap the policy must resolve: at K for a fixed population,
            // over every reachable K under churn
            let (true_gap, what) = if config.churn.is_some() {
                (min_gap_over_user_counts(table), "smallest gap over all user counts")
            } else {
                (gap.map(|g| g.delta), "gap")
            };
            let delta_lb = match (config.delta_lb, true_gap) {
                (DeltaLb::Value(d), Some(truth)) => {
                    if d > truth {
                        ck.warn("delta_lb", format!("{d} exceeds the true {what} {truth}; the regret guarantee no longer applies"));
                    }
                    Some(d)
                }
                (DeltaLb::Value(d), None) => Some(d),
                (DeltaLb::Auto, Some(truth)) => Some(truth),
                (DeltaLb::Auto, None) => {
                    ck.error("delta_lb", "every configuration has the same value, so the gap is undefined; set delta_lb explicitly");
                    None
                }
            };
            if let Some(d) = delta_lb.filter(|d| d.is_finite() && *d > 0.0) {
                match PolicyParams::from_delta(model.channels(), model.max_occupancy(), d, config.tx.max(1)) {
                    Ok(p) => {
                        resolved_lb = Some(d);
                        est_len = Some(estimation_len(users, p.channels, p.max_occupancy, p.samples_per_cell));
                        params = Some(p);
                    }
                    Err(e) => ck.error("delta_lb", e.to_string()),
                }
            }
        }

        if let Some(churn) = config.churn {
            let cp = ChurnParams {
                zeta: churn.zeta,
                c: churn.c,
                horizon: config.horizon,
                channels: model.channels(),
                max_occupancy: model.max_occupancy(),
                initial_users: users,
            };
            match cp.validate() {
                Err(ChurnError::BadExponent(z)) => ck.error("churn.zeta", format!("churn exponent must lie in [0, 0.5), got {z}")),
                Err(ChurnError::BadBudget(c)) => ck.error("churn.c", format!("budget constant must be finite and non-negative, got {c}")),
                Err(e) => ck.error("churn", e.to_string()),
                Ok(()) => {}
            }
            if let Some(p) = &params {
                if let Err(e) = validate_tau(churn.tau, p) {
                    let estimation = worst_case_estimation(p);
                    ck.error(
                        "churn.tau",
                        format!("{e} (a full system of {capacity} users needs {estimation} estimation slots; tau must be larger)"),
                    );
                }
            }
        }

        if !ck.errors.is_empty() {
            return Err(ExperimentError::Invalid(ck.errors));
        }
        Ok(Plan { config, model, users, gap, delta_lb: resolved_lb, params, estimation_len: est_len, warnings: ck.warnings })
    }

    fn churn_params(&self) -> Option<ChurnParams> {
        self.config.churn.map(|c| ChurnParams {
            zeta: c.zeta,
            c: c.c,
            horizon: self.config.horizon,
            channels: self.model.channels(),
            max_occupancy: self.model.max_occupancy(),
            initial_users: c.initial_users,
        })
    }

    /// Churn schedule of run `run` (dynamic configs only).
    pub fn churn_schedule(&self, run: usize) -> Result<Option<ChurnSchedule>, ExperimentError> {
        match self.churn_params() {
            Some(cp) => Ok(Some(generate_churn(cp, &mut stream_rng(self.config.seed, run, Stream::Churn))?)),
            None => Ok(None),
        }
    }
}

/// Outcome of one seeded run.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub index: usize,
    pub result: RunResult,
    pub churn: Option<ChurnSchedule>,
}

/// Executes run `index` of the plan. `observer` sees every slot.
pub fn run_single(
    plan: &Plan,
    index: usize,
    observer: Option<&mut dyn FnMut(&SlotOutcome)>,
) -> Result<SingleRun, ExperimentError> {
    let cfg = &plan.config;
    let rewards = stream_rng(cfg.seed, index, Stream::Rewards);
    let log = cfg.output.log;
    let churn = plan.churn_schedule(index)?;
    let result = match (cfg.policy, &churn, plan.params) {
        (PolicyKind::Random, _, _) => {
            let mut pop = RandomPopulation::new(
                plan.users,
                plan.model.channels(),
                stream_rng(cfg.seed, index, Stream::RandomPolicy),
            );
            run(&plan.model, &mut pop, cfg.horizon, rewards, log, observer)?
        }
        (PolicyKind::Epoch, Some(schedule), Some(params)) => {
            let tau = cfg.churn.map_or(0, |c| c.tau);
            let mut pop = DynamicPopulation::new(params, tau, schedule.clone())?;
            run(&plan.model, &mut pop, cfg.horizon, rewards, log, observer)?
        }
        (PolicyKind::Epoch, None, Some(params)) => {
            let mut pop = EpochPopulation::new(plan.users, params).map_err(EngineError::from)?;
            run(&plan.model, &mut pop, cfg.horizon, rewards, log, observer)?
        }
        (PolicyKind::Epoch, _, None) => unreachable!("validated epoch plans carry policy parameters"),
    };
    Ok(SingleRun { index, result, churn })
}

/// Executes every run of the plan in parallel; results are in run order.
pub fn run_batch(plan: &Plan) -> Result<Vec<SingleRun>, ExperimentError> {
    (0..plan.config.runs).into_par_iter().map(|i| run_single(plan, i, None)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::LogPoints;
    use crate::env::{Family, ModelSpec};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            channels: 2,
            max_occupancy: 2,
            family: Family::PointMass,
            variance: None,
            means: Some(vec![vec![0.9, 0.3], vec![0.8, 0.2]]),
            seed: None,
        }
    }

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            policy: PolicyKind::Epoch,
            horizon: 200,
            tx: 4,
            delta_lb: DeltaLb::Auto,
            runs: 2,
            seed: 3,
            users: Some(2),
            model: ModelSource::Inline(tiny_spec()),
            churn: None,
            output: OutputConfig { dir: None, log: LogPoints::Every(10), full_log: false },
        }
    }

    fn errors(cfg: ExperimentConfig) -> Vec<Diagnostic> {
        match Plan::prepare(cfg, Path::new("."), None) {
            Err(ExperimentError::Invalid(d)) => d,
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn auto_delta_uses_ground_truth() {
        let plan = Plan::prepare(base(), Path::new("."), None).unwrap();
        let gap = plan.gap.unwrap();
        assert!((gap.delta - 0.1375).abs() < 1e-12);
        assert_eq!(plan.params.unwrap().samples_per_cell, 27);
        assert!(plan.warnings.is_empty());
    }

    #[test]
    fn optimistic_delta_is_a_warning() {
        let cfg = ExperimentConfig { delta_lb: DeltaLb::Value(0.2), ..base() };
        let plan = Plan::prepare(cfg, Path::new("."), None).unwrap();
        assert_eq!(plan.warnings.len(), 1);
        assert_eq!(plan.warnings[0].key, "delta_lb");
    }

    #[test]
    fn collects_several_errors() {
        let cfg = ExperimentConfig { runs: 0, horizon: 0, ..base() };
        let keys: Vec<String> = errors(cfg).into_iter().map(|d| d.key).collect();
        assert_eq!(keys, vec!["runs", "horizon"]);
    }

    #[test]
    fn too_many_users() {
        let d = errors(ExperimentConfig { users: Some(5), ..base() });
        assert_eq!(d[0].key, "users");
        assert!(d[0].message.contains("M*N = 4"), "{}", d[0].message);
    }

    #[test]
    fn degenerate_auto_gap_is_an_error() {
        // one user on one channel: a single configuration
        let spec = ModelSpec { channels: 1, max_occupancy: 1, means: Some(vec![vec![0.5]]), ..tiny_spec() };
        let cfg = ExperimentConfig { users: Some(1), model: ModelSource::Inline(spec), ..base() };
        assert_eq!(errors(cfg)[0].key, "delta_lb");
    }

    #[test]
    fn short_tau_cites_estimation_length() {
        let cfg = ExperimentConfig {
            users: None,
            churn: Some(ChurnConfig { zeta: 0.3, c: 1.0, tau: 10, initial_users: 2 }),
            ..base()
        };
        let d = errors(cfg);
        assert_eq!(d[0].key, "churn.tau");
        assert!(d[0].message.contains("estimation"), "{}", d[0].message);
    }

    #[test]
    fn support_violation_is_reported_against_the_model() {
        let spec = ModelSpec {
            family: Family::Uniform,
            variance: Some(0.01),
            means: Some(vec![vec![0.05, 0.3], vec![0.8, 0.2]]),
            ..tiny_spec()
        };
        let d = errors(ExperimentConfig { model: ModelSource::Inline(spec), ..base() });
        assert_eq!(d[0].key, "model");
        assert!(d[0].message.contains("support"), "{}", d[0].message);
    }

    #[test]
    fn key_lines() {
        let text = "policy = \"epoch\"\nruns = 0\n\n[churn]\ntau = 5\n[output]\nlog = \"powers-of-two\"\n";
        assert_eq!(key_line(text, "runs"), Some(2));
        assert_eq!(key_line(text, "churn.tau"), Some(5));
        assert_eq!(key_line(text, "output.log"), Some(7));
        assert_eq!(key_line(text, "tau"), None);
    }

    #[test]
    fn runs_are_reproducible_and_distinct() {
        let plan = Plan::prepare(ExperimentConfig { policy: PolicyKind::Random, ..base() }, Path::new("."), None).unwrap();
        let a = run_batch(&plan).unwrap();
        let b = run_batch(&plan).unwrap();
        assert_eq!(a[0].result, b[0].result);
        assert_ne!(a[0].result.trace, a[1].result.trace);
        let solo = run_single(&plan, 1, None).unwrap();
        assert_eq!(solo.result, a[1].result);
    }

    #[test]
    fn static_regret_bound_at_one_slot_is_the_constant() {
        let b = static_regret_bound(2, 2, 2, 0.1375, 1);
        assert!((b - 32.0 / (std::f64::consts::E - 2.0)).abs() < 1e-9);
    }
}
