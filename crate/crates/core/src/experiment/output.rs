//! CSV traces and the summary document.
//!
//! Files written into the output directory:
//!
//! | file | columns |
//! |------|---------|
//! | `run_NNN.csv` | `t, cumulative_regret, epoch, phase` |
//! | `aggregate.csv` | `t, mean, std` |
//! | `run_NNN_slots.csv` (full log) | one row per slot |
//! | `run_NNN_churn.csv` (churn) | `t, kind, user` |
//! | `summary.toml` | [`Summary`] |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{dynamic_rate, run_single, static_regret_bound, ExperimentError, Plan, PolicyKind, SingleRun};
use crate::dynamics::ChurnKind;
use crate::engine::{aggregate_runs, AggregateTrace, PhaseTag, SlotOutcome};
use crate::policy::Action;

fn out_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Output { path: path.display().to_string(), message: e.to_string() }
}

fn run_stem(index: usize) -> String {
    format!("run_{index:03}")
}

#[derive(Serialize)]
struct TraceRow {
    t: u64,
    cumulative_regret: f64,
    epoch: u32,
    phase: PhaseTag,
}

#[derive(Serialize)]
struct AggregateRow {
    t: u64,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct ChurnRow {
    t: u64,
    kind: &'static str,
    user: u64,
}

#[derive(Serialize)]
struct SlotRow {
    t: u64,
    users: usize,
    super_epoch: u32,
    epoch: u32,
    phase: String,
    /// `;`-separated users per channel.
    occupancy: String,
    /// `;`-separated channel per user, `-` for idle.
    actions: String,
    /// `;`-separated rewards, empty for idle users.
    rewards: String,
    expected_system_reward: f64,
    regret: f64,
    /// `;`-separated `user:channel:occupancy` estimation samples.
    samples: String,
}

impl SlotRow {
    fn from_outcome(o: &SlotOutcome) -> Self {
        let list = |items: Vec<String>| items.join(";");
        Self {
            t: o.t,
            users: o.users,
            super_epoch: o.super_epoch,
            epoch: o.epoch,
            phase: o.phase.map(|p| p.to_string()).unwrap_or_default(),
            occupancy: list(o.occupancy.iter().map(ToString::to_string).collect()),
            actions: list(
                o.actions
                    .iter()
                    .map(|a| match a {
                        Action::Idle => "-".to_string(),
                        Action::Transmit(m) => m.to_string(),
                    })
                    .collect(),
            ),
            rewards: list(o.rewards.iter().map(|r| r.map(|x| x.to_string()).unwrap_or_default()).collect()),
            expected_system_reward: o.expected_system_reward,
            regret: o.regret,
            samples: list(o.labels.iter().map(|(u, l)| format!("{u}:{}:{}", l.channel, l.occupancy)).collect()),
        }
    }
}

/// Regret envelope check against the static-case bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub bound_at_horizon: f64,
    /// Mean regret stayed below the bound at every logged slot.
    pub holds: bool,
    /// Smallest bound / mean-regret ratio over logged slots with positive regret.
    pub min_slack: f64,
}

/// `R(t) / (sqrt(t) ln t)` of the mean trace.
#[derive(Debug, Clone, Serialize)]
pub struct RateCheckpoint {
    pub t: u64,
    pub mean_regret: f64,
    pub rate: f64,
}

/// Mean regret of one epoch across the runs that reached it.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub super_epoch: u32,
    pub epoch: u32,
    pub runs: usize,
    pub complete_runs: usize,
    pub estimation_regret: f64,
    pub allocation_regret: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub index: usize,
    pub final_regret: f64,
    pub estimation_regret: f64,
    pub allocation_regret: f64,
    pub samples_checked: u64,
    pub schedule_violations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub churn_events: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub changed_super_epochs: Option<usize>,
}

/// Everything `summary.toml` reports.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub policy: String,
    #[serde(rename = "M")]
    pub channels: usize,
    #[serde(rename = "N")]
    pub max_occupancy: usize,
    pub users: usize,
    pub horizon: u64,
    pub runs: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_star: Option<String>,
    pub j1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_lb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_cell: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimation_len: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tx: Option<u64>,
    pub final_regret_mean: f64,
    pub final_regret_std: f64,
    pub estimation_regret_mean: f64,
    pub allocation_regret_mean: f64,
    pub samples_checked: u64,
    pub schedule_violations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundCheck>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rate: Vec<RateCheckpoint>,
    pub epochs: Vec<EpochStats>,
    pub run: Vec<RunStats>,
}

/// Outputs of a batch, in memory.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub runs: Vec<SingleRun>,
    pub aggregate: AggregateTrace,
    pub summary: Summary,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Summary {
    pub fn build(plan: &Plan, runs: &[SingleRun], aggregate: &AggregateTrace) -> Self {
        let cfg = &plan.config;
        let table = plan.model.means();
        let k_star = crate::optimizer::optimal_config(table, plan.users).ok();
        let last = aggregate.points.last();

        let bound = match (cfg.policy, cfg.churn, plan.gap) {
            (PolicyKind::Epoch, None, Some(gap)) => {
                let (m, n) = (plan.model.channels(), plan.model.max_occupancy());
                let mut holds = true;
                let mut min_slack = f64::INFINITY;
                for p in &aggregate.points {
                    let b = static_regret_bound(plan.users, m, n, gap.delta, p.t);
                    holds &= p.mean <= b;
                    if p.mean > 0.0 {
                        min_slack = min_slack.min(b / p.mean);
                    }
                }
                Some(BoundCheck { bound_at_horizon: static_regret_bound(plan.users, m, n, gap.delta, cfg.horizon), holds, min_slack })
            }
            _ => None,
        };

        let rate = if cfg.churn.is_some() {
            let mut ts = vec![cfg.horizon / 10, cfg.horizon];
            ts.retain(|&t| t > 1);
            ts.dedup();
            ts.into_iter()
                .filter_map(|t| {
                    aggregate.mean_at(t).map(|r| RateCheckpoint { t, mean_regret: r, rate: dynamic_rate(r, t) })
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut epochs: BTreeMap<(u32, u32), Vec<_>> = BTreeMap::new();
        for r in runs {
            for e in &r.result.summary.epochs {
                epochs.entry((e.super_epoch, e.epoch)).or_default().push(*e);
            }
        }
        let epochs = epochs
            .into_iter()
            .filter(|&((_, epoch), _)| epoch > 0)
            .map(|((super_epoch, epoch), es)| EpochStats {
                super_epoch,
                epoch,
                runs: es.len(),
                complete_runs: es.iter().filter(|e| e.complete).count(),
                estimation_regret: mean(es.iter().map(|e| e.estimation_regret)),
                allocation_regret: mean(es.iter().map(|e| e.allocation_regret)),
            })
            .collect();

        let run = runs
            .iter()
            .map(|r| {
                let s = &r.result.summary;
                RunStats {
                    index: r.index,
                    final_regret: s.final_regret,
                    estimation_regret: s.estimation_regret,
                    allocation_regret: s.allocation_regret,
                    samples_checked: s.samples_checked,
                    schedule_violations: s.schedule_violations,
                    churn_events: r.churn.as_ref().map(|c| c.events.len()),
                    changed_super_epochs: r.churn.as_ref().map(|_| s.super_epochs.iter().filter(|se| se.changed).count()),
                }
            })
            .collect::<Vec<_>>();

        let epoch_policy = cfg.policy == PolicyKind::Epoch;
        Summary {
            policy: cfg.policy.to_string(),
            channels: plan.model.channels(),
            max_occupancy: plan.model.max_occupancy(),
            users: plan.users,
            horizon: cfg.horizon,
            runs: runs.len(),
            seed: cfg.seed,
            k_star: k_star.as_ref().map(|(k, _)| k.to_string()),
            j1: k_star.map_or(0.0, |(_, j)| j),
            j2: plan.gap.map(|g| g.j2),
            delta: plan.gap.map(|g| g.delta),
            delta_lb: plan.delta_lb,
            samples_per_cell: plan.params.map(|p| p.samples_per_cell),
            estimation_len: plan.estimation_len,
            tx: epoch_policy.then_some(cfg.tx),
            final_regret_mean: last.map_or(0.0, |p| p.mean),
            final_regret_std: last.map_or(0.0, |p| p.std),
            estimation_regret_mean: mean(run.iter().map(|r| r.estimation_regret)),
            allocation_regret_mean: mean(run.iter().map(|r| r.allocation_regret)),
            samples_checked: run.iter().map(|r| r.samples_checked).sum(),
            schedule_violations: run.iter().map(|r| r.schedule_violations).sum(),
            bound,
            rate,
            epochs,
            run,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("summary is always representable as TOML")
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))
}

/// Writes traces, churn schedules and the summary for finished runs.
pub fn write_outputs(plan: &Plan, runs: &[SingleRun], dir: &Path) -> Result<BatchReport, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let traces: Vec<_> = runs.iter().map(|r| r.result.trace.clone()).collect();
    let aggregate = aggregate_runs(&traces)?;

    for r in runs {
        let path = dir.join(format!("{}.csv", run_stem(r.index)));
        write_csv(
            &path,
            r.result.trace.points.iter().map(|p| TraceRow {
                t: p.t,
                cumulative_regret: p.cumulative_regret,
                epoch: p.epoch,
                phase: p.phase,
            }),
        )?;
        if let Some(schedule) = &r.churn {
            let path = dir.join(format!("{}_churn.csv", run_stem(r.index)));
            write_csv(
                &path,
                schedule.events.iter().map(|e| match e.kind {
                    ChurnKind::Arrive { user } => ChurnRow { t: e.t, kind: "arrive", user },
                    ChurnKind::Depart { user } => ChurnRow { t: e.t, kind: "depart", user },
                }),
            )?;
        }
    }
    write_csv(
        &dir.join("aggregate.csv"),
        aggregate.points.iter().map(|p| AggregateRow { t: p.t, mean: p.mean, std: p.std }),
    )?;

    let summary = Summary::build(plan, runs, &aggregate);
    let path = dir.join("summary.toml");
    let mut f = BufWriter::new(File::create(&path).map_err(|e| out_err(&path, e))?);
    f.write_all(summary.to_toml_string().as_bytes()).and_then(|_| f.flush()).map_err(|e| out_err(&path, e))?;

    Ok(BatchReport { runs: runs.to_vec(), aggregate, summary })
}

/// Runs the whole batch in parallel and writes every output into `dir`.
/// In full-log mode each run also streams its slots to `run_NNN_slots.csv`.
pub fn execute(plan: &Plan, dir: &Path) -> Result<BatchReport, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let runs = (0..plan.config.runs)
        .into_par_iter()
        .map(|i| {
            if !plan.config.output.full_log {
                return run_single(plan, i, None);
            }
            let path = dir.join(format!("{}_slots.csv", run_stem(i)));
            let mut w = csv::Writer::from_path(&path).map_err(|e| out_err(&path, e))?;
            let mut failure = None;
            let mut obs = |o: &SlotOutcome| {
                if failure.is_none() {
                    if let Err(e) = w.serialize(SlotRow::from_outcome(o)) {
                        failure = Some(e);
                    }
                }
            };
            let res = run_single(plan, i, Some(&mut obs))?;
            if let Some(e) = failure {
                return Err(out_err(&path, e));
            }
            w.flush().map_err(|e| out_err(&path, e))?;
            Ok(res)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_outputs(plan, &runs, dir)
}
