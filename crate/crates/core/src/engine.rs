//! Slot-synchronous simulator.
//!
//! Each slot the engine collects one action per participant from a
//! [`Population`], forms the occupancy vector, draws every transmitting
//! user's reward from the ground truth, hands each user its own reward, and
//! books pseudo-regret `J1(K_t) - sum_m k_t(m) mu(m, k_t(m))` where `K_t` is
//! the number of users in the system that slot.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::RewardModel;
use crate::optimizer::{optimal_config, OptimizeError, VALUE_TOLERANCE};
use crate::policy::{Action, Agent, EpochClock, EstimationSchedule, Phase, PolicyError, PolicyParams, SampleLabel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("user {user} chose channel {channel}, but the model has {channels} channels")]
    InvalidChannel { user: usize, channel: usize, channels: usize },
    #[error("population reports {users} users, above the system capacity {capacity}")]
    Overfull { users: usize, capacity: usize },
    #[error("slot {t}: system reward {value} exceeds J1 = {j1} with every user transmitting; optimizer bug")]
    NegativeRegret { t: u64, value: f64, j1: f64 },
    #[error("traces have mismatched sample points")]
    MismatchedTraces,
    #[error("no traces to aggregate")]
    NoTraces,
    #[error("churn schedule corrupted: {0}")]
    Churn(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

/// Phase label attached to every slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseTag {
    Estimation,
    Allocation,
    /// Baseline policies without phases.
    Random,
}

impl From<Phase> for PhaseTag {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Estimation => PhaseTag::Estimation,
            Phase::Allocation => PhaseTag::Allocation,
        }
    }
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseTag::Estimation => "estimation",
            PhaseTag::Allocation => "allocation",
            PhaseTag::Random => "random",
        })
    }
}

/// Where the population is in its epoch loop during a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    /// 1-based super-epoch; always 1 for static populations.
    pub super_epoch: u32,
    /// 1-based epoch; 0 for baselines.
    pub epoch: u32,
    pub phase: PhaseTag,
    pub phase_clock: u64,
    pub phase_len: u64,
}

impl Annotation {
    pub fn from_clock(super_epoch: u32, clock: &EpochClock) -> Self {
        Self {
            super_epoch,
            epoch: clock.epoch(),
            phase: clock.phase().into(),
            phase_clock: clock.phase_clock(),
            phase_len: clock.phase_len(),
        }
    }

    fn baseline() -> Self {
        Self { super_epoch: 1, epoch: 0, phase: PhaseTag::Random, phase_clock: 0, phase_len: 0 }
    }
}

/// A set of users driven by the engine.
///
/// Per slot the engine calls [`prepare`](Population::prepare),
/// [`annotation`](Population::annotation), [`actions`](Population::actions)
/// and finally [`deliver`](Population::deliver) with one reward entry per
/// action, in the same order.
pub trait Population {
    /// Hook run before the slot at 0-based index `slot`.
    fn prepare(&mut self, slot: u64) -> Result<(), EngineError> {
        let _ = slot;
        Ok(())
    }

    /// Users in the system this slot (`K_t`), including idle ones.
    fn users(&self) -> usize;

    fn annotation(&self) -> Annotation;

    fn actions(&mut self, out: &mut Vec<Action>);

    /// Hands out rewards (`None` for idle users) and collects the estimation
    /// labels agents recorded, as `(participant index, label)`.
    fn deliver(&mut self, rewards: &[Option<f64>], labels: &mut Vec<(usize, SampleLabel)>) -> Result<(), EngineError>;

    /// Super-epochs (1-based) in which the population changed.
    fn changed_super_epochs(&self) -> Vec<u32> {
        Vec::new()
    }
}

/// Fixed population running the epoch policy.
#[derive(Debug, Clone)]
pub struct EpochPopulation {
    agents: Vec<Agent>,
    clock: EpochClock,
}

impl EpochPopulation {
    pub fn new(users: usize, params: PolicyParams) -> Result<Self, PolicyError> {
        let schedule = EstimationSchedule::build(users, params.channels, params.max_occupancy, params.samples_per_cell)?;
        let agents = (0..users).map(|id| Agent::with_schedule(id, &schedule, params)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { agents, clock: EpochClock::new(schedule.len()) })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn clock(&self) -> &EpochClock {
        &self.clock
    }
}

impl Population for EpochPopulation {
    fn users(&self) -> usize {
        self.agents.len()
    }

    fn annotation(&self) -> Annotation {
        Annotation::from_clock(1, &self.clock)
    }

    fn actions(&mut self, out: &mut Vec<Action>) {
        out.extend(self.agents.iter_mut().map(Agent::act));
    }

    fn deliver(&mut self, rewards: &[Option<f64>], labels: &mut Vec<(usize, SampleLabel)>) -> Result<(), EngineError> {
        for (j, (agent, &reward)) in self.agents.iter_mut().zip(rewards).enumerate() {
            if let Some(label) = agent.observe(reward)? {
                labels.push((j, label));
            }
        }
        self.clock.tick();
        Ok(())
    }
}

/// Baseline: every user picks a channel uniformly at random every slot.
#[derive(Debug, Clone)]
pub struct RandomPopulation {
    users: usize,
    channels: usize,
    rng: ChaCha8Rng,
}

impl RandomPopulation {
    pub fn new(users: usize, channels: usize, rng: ChaCha8Rng) -> Self {
        Self { users, channels, rng }
    }
}

/// One draw of the random baseline policy.
#[inline]
pub fn random_action<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Action {
    Action::Transmit(rng.random_range(0..channels))
}

impl Population for RandomPopulation {
    fn users(&self) -> usize {
        self.users
    }

    fn annotation(&self) -> Annotation {
        Annotation::baseline()
    }

    fn actions(&mut self, out: &mut Vec<Action>) {
        for _ in 0..self.users {
            out.push(random_action(self.channels, &mut self.rng));
        }
    }

    fn deliver(&mut self, _: &[Option<f64>], _: &mut Vec<(usize, SampleLabel)>) -> Result<(), EngineError> {
        Ok(())
    }
}

/// Everything that happened in one slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotOutcome {
    /// 1-based slot number.
    pub t: u64,
    pub users: usize,
    pub actions: Vec<Action>,
    pub occupancy: Vec<usize>,
    pub rewards: Vec<Option<f64>>,
    pub expected_system_reward: f64,
    pub regret: f64,
    pub labels: Vec<(usize, SampleLabel)>,
    pub super_epoch: u32,
    pub epoch: u32,
    pub phase: Option<PhaseTag>,
}

/// Which slots get a trace point. The final slot is always logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogPoints {
    /// Every `n`-th slot.
    Every(u64),
    /// Slots 1, 2, 4, 8, ...
    PowersOfTwo,
}

impl Default for LogPoints {
    fn default() -> Self {
        LogPoints::Every(1)
    }
}

impl LogPoints {
    #[inline]
    fn includes(self, t: u64, horizon: u64) -> bool {
        t == horizon
            || match self {
                LogPoints::Every(n) => n > 0 && t.is_multiple_of(n),
                LogPoints::PowersOfTwo => t.is_power_of_two(),
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: u64,
    pub cumulative_regret: f64,
    pub epoch: u32,
    pub phase: PhaseTag,
}

/// Cumulative pseudo-regret sampled at the log points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretTrace {
    pub points: Vec<TracePoint>,
}

impl RegretTrace {
    /// `R(T)`; zero for an empty trace.
    pub fn final_regret(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.cumulative_regret)
    }

    /// Regret at the last logged slot not after `t`.
    pub fn regret_at(&self, t: u64) -> Option<f64> {
        let idx = self.points.partition_point(|p| p.t <= t);
        idx.checked_sub(1).map(|i| self.points[i].cumulative_regret)
    }
}

/// Regret booked in one epoch, split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRegret {
    pub super_epoch: u32,
    pub epoch: u32,
    pub estimation_regret: f64,
    pub allocation_regret: f64,
    pub estimation_slots: u64,
    pub allocation_slots: u64,
    /// Largest single-slot regret seen in the allocation phase.
    pub allocation_max_slot_regret: f64,
    /// The allocation phase ran to its full length.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperEpochRegret {
    pub index: u32,
    pub start: u64,
    pub slots: u64,
    pub regret: f64,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub horizon: u64,
    pub final_regret: f64,
    pub estimation_regret: f64,
    pub allocation_regret: f64,
    pub epochs: Vec<EpochRegret>,
    pub super_epochs: Vec<SuperEpochRegret>,
    /// Estimation samples whose label was checked against the true occupancy.
    pub samples_checked: u64,
    /// Samples recorded under an occupancy that did not match reality.
    pub schedule_violations: u64,
    /// Most negative per-slot increment seen (only possible with idle users).
    pub min_slot_regret: f64,
}

impl RunSummary {
    /// Last epoch whose allocation phase finished within the horizon.
    pub fn last_complete_epoch(&self) -> Option<&EpochRegret> {
        self.epochs.iter().rev().find(|e| e.complete)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub trace: RegretTrace,
    pub summary: RunSummary,
}

/// Slot-by-slot simulator state. [`run`] covers the common case; drive
/// `Simulation` directly to swap populations mid-run on one reward stream.
pub struct Simulation<'a> {
    model: &'a RewardModel,
    /// `J1(K)` for `K = 0..=M*N`.
    optimum: Vec<f64>,
    rng: ChaCha8Rng,
    t: u64,
    cumulative: f64,
    outcome: SlotOutcome,
    summary: RunSummary,
}

impl<'a> Simulation<'a> {
    pub fn new(model: &'a RewardModel, rng: ChaCha8Rng) -> Result<Self, EngineError> {
        let optimum = (0..=model.capacity())
            .map(|k| optimal_config(model.means(), k).map(|(_, j1)| j1))
            .collect::<Result<Vec<_>, _>>()?;
        let outcome = SlotOutcome { occupancy: vec![0; model.channels()], ..SlotOutcome::default() };
        Ok(Self { model, optimum, rng, t: 0, cumulative: 0.0, outcome, summary: RunSummary::default() })
    }

    /// `J1` for a population of `users`.
    pub fn optimum(&self, users: usize) -> Option<f64> {
        self.optimum.get(users).copied()
    }

    /// Slots simulated so far.
    pub fn elapsed(&self) -> u64 {
        self.t
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.cumulative
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    /// Simulates one slot and returns its outcome.
    pub fn step<P: Population + ?Sized>(&mut self, population: &mut P) -> Result<&SlotOutcome, EngineError> {
        population.prepare(self.t)?;
        let users = population.users();
        let j1 = *self
            .optimum
            .get(users)
            .ok_or(EngineError::Overfull { users, capacity: self.model.capacity() })?;
        let note = population.annotation();

        let out = &mut self.outcome;
        out.actions.clear();
        out.rewards.clear();
        out.labels.clear();
        out.occupancy.iter_mut().for_each(|k| *k = 0);

        population.actions(&mut out.actions);
        let channels = self.model.channels();
        let mut idle = 0;
        for (user, action) in out.actions.iter().enumerate() {
            match *action {
                Action::Transmit(m) if m < channels => out.occupancy[m] += 1,
                Action::Transmit(m) => return Err(EngineError::InvalidChannel { user, channel: m, channels }),
                Action::Idle => idle += 1,
            }
        }
        for action in &out.actions {
            let reward = action.channel().map(|m| self.model.sample_unchecked(m, out.occupancy[m], &mut self.rng));
            out.rewards.push(reward);
        }
        population.deliver(&out.rewards, &mut out.labels)?;

        for &(_, label) in &out.labels {
            self.summary.samples_checked += 1;
            if out.occupancy.get(label.channel) != Some(&label.occupancy) {
                self.summary.schedule_violations += 1;
            }
        }

        let value = self.model.means().system_value(&out.occupancy);
        let mut regret = j1 - value;
        if regret.abs() <= VALUE_TOLERANCE {
            regret = 0.0;
        } else if regret < 0.0 && idle == 0 && out.actions.len() == users {
            return Err(EngineError::NegativeRegret { t: self.t + 1, value, j1 });
        }

        self.t += 1;
        self.cumulative += regret;
        out.t = self.t;
        out.users = users;
        out.expected_system_reward = value;
        out.regret = regret;
        out.super_epoch = note.super_epoch;
        out.epoch = note.epoch;
        out.phase = Some(note.phase);
        book(&mut self.summary, &note, regret, self.t);
        Ok(&self.outcome)
    }

    fn finish<P: Population + ?Sized>(mut self, population: &P, trace: RegretTrace) -> RunResult {
        let changed = population.changed_super_epochs();
        for se in &mut self.summary.super_epochs {
            se.changed = changed.contains(&se.index);
        }
        self.summary.horizon = self.t;
        self.summary.final_regret = self.cumulative;
        RunResult { trace, summary: self.summary }
    }
}

fn book(summary: &mut RunSummary, note: &Annotation, regret: f64, t: u64) {
    summary.min_slot_regret = summary.min_slot_regret.min(regret);
    match summary.super_epochs.last_mut() {
        Some(se) if se.index == note.super_epoch => {
            se.slots += 1;
            se.regret += regret;
        }
        _ => summary.super_epochs.push(SuperEpochRegret {
            index: note.super_epoch,
            start: t - 1,
            slots: 1,
            regret,
            changed: false,
        }),
    }

    let fresh = !matches!(summary.epochs.last(), Some(e) if e.super_epoch == note.super_epoch && e.epoch == note.epoch);
    if fresh {
        summary.epochs.push(EpochRegret {
            super_epoch: note.super_epoch,
            epoch: note.epoch,
            estimation_regret: 0.0,
            allocation_regret: 0.0,
            estimation_slots: 0,
            allocation_slots: 0,
            allocation_max_slot_regret: 0.0,
            complete: false,
        });
    }
    let rec = summary.epochs.last_mut().expect("epoch record exists");
    match note.phase {
        PhaseTag::Allocation => {
            summary.allocation_regret += regret;
            rec.allocation_regret += regret;
            rec.allocation_slots += 1;
            rec.allocation_max_slot_regret = rec.allocation_max_slot_regret.max(regret);
            if note.phase_clock + 1 == note.phase_len {
                rec.complete = true;
            }
        }
        PhaseTag::Estimation | PhaseTag::Random => {
            summary.estimation_regret += regret;
            rec.estimation_regret += regret;
            rec.estimation_slots += 1;
        }
    }
}

/// Runs `population` for `horizon` slots.
///
/// `observer`, when given, sees every slot's full outcome (full-log mode).
pub fn run<P: Population + ?Sized>(
    model: &RewardModel,
    population: &mut P,
    horizon: u64,
    rng: ChaCha8Rng,
    log: LogPoints,
    mut observer: Option<&mut dyn FnMut(&SlotOutcome)>,
) -> Result<RunResult, EngineError> {
    let mut sim = Simulation::new(model, rng)?;
    let mut trace = RegretTrace::default();
    for _ in 0..horizon {
        sim.step(population)?;
        let out = &sim.outcome;
        if let Some(obs) = observer.as_mut() {
            obs(out);
        }
        if log.includes(out.t, horizon) {
            trace.points.push(TracePoint {
                t: out.t,
                cumulative_regret: sim.cumulative,
                epoch: out.epoch,
                phase: out.phase.unwrap_or(PhaseTag::Random),
            });
        }
    }
    Ok(sim.finish(population, trace))
}

/// Pointwise mean and population standard deviation across runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateTrace {
    pub points: Vec<AggregatePoint>,
    pub runs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatePoint {
    pub t: u64,
    pub mean: f64,
    pub std: f64,
}

impl AggregateTrace {
    pub fn final_mean(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.mean)
    }

    pub fn mean_at(&self, t: u64) -> Option<f64> {
        self.points.iter().find(|p| p.t == t).map(|p| p.mean)
    }
}

pub fn aggregate_runs(traces: &[RegretTrace]) -> Result<AggregateTrace, EngineError> {
    let first = traces.first().ok_or(EngineError::NoTraces)?;
    let times: Vec<u64> = first.points.iter().map(|p| p.t).collect();
    for tr in traces {
        if tr.points.len() != times.len() || tr.points.iter().zip(&times).any(|(p, &t)| p.t != t) {
            return Err(EngineError::MismatchedTraces);
        }
    }
    let n = traces.len() as f64;
    let points = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mean = traces.iter().map(|tr| tr.points[i].cumulative_regret).sum::<f64>() / n;
            let var = traces.iter().map(|tr| (tr.points[i].cumulative_regret - mean).powi(2)).sum::<f64>() / n;
            AggregatePoint { t, mean, std: var.sqrt() }
        })
        .collect();
    Ok(AggregateTrace { points, runs: traces.len() })
}
