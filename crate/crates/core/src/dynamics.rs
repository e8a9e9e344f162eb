//! Arrivals, departures and super-epoch restarts.
//!
//! In the dynamic setting the epoch policy is restarted at super-epoch
//! boundaries `tau * r * (r + 1) / 2`, so super-epoch `r` lasts `r * tau`
//! slots. Churn is budgeted: the cumulative number of arrivals plus
//! departures up to slot `t` never exceeds `c * t^zeta` with `zeta < 1/2`.
//!
//! Departing users vanish immediately. Arriving users wait, idle, until the
//! next boundary, where every user in the system gets a fresh rank
//! `0..K_t` and a fresh agent.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Annotation, EngineError, Population};
use crate::policy::{estimation_len, Action, Agent, EpochClock, EstimationSchedule, PolicyError, PolicyParams, SampleLabel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChurnError {
    #[error("churn exponent zeta must lie in [0, 0.5), got {0}")]
    BadExponent(f64),
    #[error("churn budget constant must be finite and non-negative, got {0}")]
    BadBudget(f64),
    #[error("initial population {users} outside [1, {capacity}]")]
    InfeasiblePopulation { users: usize, capacity: usize },
    #[error("super-epoch length tau must be positive")]
    ZeroTau,
    #[error("tau = {tau} does not exceed the worst-case estimation phase of {estimation} slots")]
    TauTooShort { tau: u64, estimation: u64 },
    #[error("user {0} departs but is not in the system")]
    UnknownUser(u64),
    #[error("event at slot {t} breaks the churn budget: {count} events > {budget}")]
    BudgetExceeded { t: u64, count: usize, budget: f64 },
    #[error("event at slot {t} leaves {users} users, outside [1, {capacity}]")]
    PopulationOutOfRange { t: u64, users: usize, capacity: usize },
    #[error("events are not in time order at slot {0}")]
    Unordered(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChurnKind {
    /// A new user joins; it receives the next unused user key.
    Arrive { user: u64 },
    Depart { user: u64 },
}

/// Takes effect at the start of 1-based slot `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub t: u64,
    #[serde(flatten)]
    pub kind: ChurnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnParams {
    pub zeta: f64,
    pub c: f64,
    pub horizon: u64,
    pub channels: usize,
    pub max_occupancy: usize,
    pub initial_users: usize,
}

impl ChurnParams {
    pub fn capacity(&self) -> usize {
        self.channels * self.max_occupancy
    }

    pub fn validate(&self) -> Result<(), ChurnError> {
        if !(0.0..0.5).contains(&self.zeta) {
            return Err(ChurnError::BadExponent(self.zeta));
        }
        if !self.c.is_finite() || self.c < 0.0 {
            return Err(ChurnError::BadBudget(self.c));
        }
        if self.initial_users == 0 || self.initial_users > self.capacity() {
            return Err(ChurnError::InfeasiblePopulation { users: self.initial_users, capacity: self.capacity() });
        }
        Ok(())
    }

    /// `c * t^zeta`.
    pub fn budget(&self, t: u64) -> f64 {
        self.c * (t as f64).powf(self.zeta)
    }
}

/// Time-ordered churn events plus the parameters they were drawn under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnSchedule {
    pub params: ChurnParams,
    pub events: Vec<ChurnEvent>,
}

const BUDGET_SLACK: f64 = 1e-9;

/// Draws a churn schedule.
///
/// Candidate times follow the budget curve itself: `floor(c * T^zeta)`
/// candidates with CDF `(t / T)^zeta` (uniform when `zeta = 0`), so the
/// expected candidate count by `t` is `c * t^zeta`. Candidates are then
/// thinned in time order so the realized count never exceeds the budget.
/// Each kept event arrives or departs with equal probability among the
/// feasible kinds; a departing user is picked uniformly from the system.
pub fn generate_churn<R: Rng + ?Sized>(params: ChurnParams, rng: &mut R) -> Result<ChurnSchedule, ChurnError> {
    params.validate()?;
    let horizon = params.horizon;
    let candidates = if horizon == 0 { 0 } else { params.budget(horizon).floor() as usize };
    let mut times: Vec<u64> = (0..candidates)
        .map(|_| {
            let u: f64 = rng.random();
            let frac = if params.zeta == 0.0 { u } else { u.powf(1.0 / params.zeta) };
            ((frac * horizon as f64).ceil() as u64).clamp(1, horizon)
        })
        .collect();
    times.sort_unstable();

    let capacity = params.capacity();
    let mut members: Vec<u64> = (0..params.initial_users as u64).collect();
    let mut next_key = params.initial_users as u64;
    let mut events = Vec::new();
    for t in times {
        if (events.len() + 1) as f64 > params.budget(t) + BUDGET_SLACK {
            continue;
        }
        let can_arrive = members.len() < capacity;
        let can_depart = members.len() > 1;
        let arrive = match (can_arrive, can_depart) {
            (true, true) => rng.random_bool(0.5),
            (true, false) => true,
            (false, true) => false,
            (false, false) => continue,
        };
        let kind = if arrive {
            members.push(next_key);
            next_key += 1;
            ChurnKind::Arrive { user: next_key - 1 }
        } else {
            let user = *members.choose(rng).expect("population is non-empty");
            members.retain(|&k| k != user);
            ChurnKind::Depart { user }
        };
        events.push(ChurnEvent { t, kind });
    }
    Ok(ChurnSchedule { params, events })
}

impl ChurnSchedule {
    pub fn empty(params: ChurnParams) -> Self {
        Self { params, events: Vec::new() }
    }

    /// Exhaustive check of the budget and population bounds. The event count
    /// is a step function, so checking at every event time covers all `t`.
    pub fn check(&self) -> Result<(), ChurnError> {
        self.params.validate()?;
        let capacity = self.params.capacity();
        let mut roster = Roster::new(self.params.initial_users, capacity);
        let mut last = 0;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.t < last || ev.t == 0 {
                return Err(ChurnError::Unordered(ev.t));
            }
            last = ev.t;
            let budget = self.params.budget(ev.t);
            if (i + 1) as f64 > budget + BUDGET_SLACK {
                return Err(ChurnError::BudgetExceeded { t: ev.t, count: i + 1, budget });
            }
            roster.apply(ev)?;
            if roster.is_empty() || roster.len() > capacity {
                return Err(ChurnError::PopulationOutOfRange { t: ev.t, users: roster.len(), capacity });
            }
        }
        Ok(())
    }

    /// `kappa_t`: events with time at most `t`.
    pub fn count_until(&self, t: u64) -> usize {
        self.events.partition_point(|e| e.t <= t)
    }
}

/// 0-based slot at which 1-based super-epoch `r` starts: `tau * r (r - 1) / 2`.
pub fn super_epoch_start(r: u32, tau: u64) -> u64 {
    let r = r as u64;
    tau * (r * (r.saturating_sub(1)) / 2)
}

/// Worst-case estimation-phase length, reached with a full system of `M*N`
/// users. `tau` must exceed it.
pub fn worst_case_estimation(params: &PolicyParams) -> u64 {
    estimation_len(params.capacity(), params.channels, params.max_occupancy, params.samples_per_cell)
}

pub fn validate_tau(tau: u64, params: &PolicyParams) -> Result<(), ChurnError> {
    if tau == 0 {
        return Err(ChurnError::ZeroTau);
    }
    let estimation = worst_case_estimation(params);
    if tau <= estimation {
        return Err(ChurnError::TauTooShort { tau, estimation });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberStatus {
    /// Participating with this rank in the current super-epoch.
    Active { rank: usize },
    /// Arrived mid-super-epoch; idle until the next boundary.
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Member {
    pub key: u64,
    pub status: MemberStatus,
}

/// Who is in the system, kept in user-key order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roster {
    members: Vec<Member>,
    capacity: usize,
}

impl Roster {
    /// Users `0..initial` are active with ranks equal to their keys.
    pub fn new(initial: usize, capacity: usize) -> Self {
        let members = (0..initial).map(|k| Member { key: k as u64, status: MemberStatus::Active { rank: k } }).collect();
        Self { members, capacity }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    /// Applies one event. Returns the removed member on departure.
    pub fn apply(&mut self, event: &ChurnEvent) -> Result<Option<Member>, ChurnError> {
        match event.kind {
            ChurnKind::Arrive { user } => {
                if self.members.iter().any(|m| m.key == user) {
                    return Err(ChurnError::UnknownUser(user));
                }
                if self.members.len() >= self.capacity {
                    return Err(ChurnError::PopulationOutOfRange {
                        t: event.t,
                        users: self.members.len() + 1,
                        capacity: self.capacity,
                    });
                }
                let at = self.members.partition_point(|m| m.key < user);
                self.members.insert(at, Member { key: user, status: MemberStatus::Pending });
                Ok(None)
            }
            ChurnKind::Depart { user } => {
                let idx = self.members.iter().position(|m| m.key == user).ok_or(ChurnError::UnknownUser(user))?;
                Ok(Some(self.members.remove(idx)))
            }
        }
    }

    /// Super-epoch boundary: everybody gets a fresh rank in key order.
    pub fn relabel(&mut self) -> usize {
        for (rank, m) in self.members.iter_mut().enumerate() {
            m.status = MemberStatus::Active { rank };
        }
        self.members.len()
    }
}

/// Population running the epoch policy inside super-epochs with churn.
#[derive(Debug, Clone)]
pub struct DynamicPopulation {
    params: PolicyParams,
    tau: u64,
    schedule: ChurnSchedule,
    next_event: usize,
    roster: Roster,
    /// Agents of the current super-epoch, indexed by rank; `None` once gone.
    agents: Vec<Option<Agent>>,
    clock: EpochClock,
    super_epoch: u32,
    next_boundary: u64,
    changed: Vec<u32>,
}

impl DynamicPopulation {
    pub fn new(params: PolicyParams, tau: u64, schedule: ChurnSchedule) -> Result<Self, EngineError> {
        validate_tau(tau, &params).map_err(|e| EngineError::Churn(e.to_string()))?;
        schedule.check().map_err(|e| EngineError::Churn(e.to_string()))?;
        let roster = Roster::new(schedule.params.initial_users, params.capacity());
        // the first super-epoch starts in `prepare(0)`, after any events at t = 1
        Ok(Self {
            params,
            tau,
            schedule,
            next_event: 0,
            roster,
            agents: Vec::new(),
            clock: EpochClock::new(0),
            super_epoch: 0,
            next_boundary: 0,
            changed: Vec::new(),
        })
    }

    pub fn super_epoch(&self) -> u32 {
        self.super_epoch
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    fn start_super_epoch(&mut self) -> Result<(), PolicyError> {
        self.super_epoch += 1;
        self.next_boundary = super_epoch_start(self.super_epoch + 1, self.tau);
        let users = self.roster.relabel();
        let schedule = EstimationSchedule::build(
            users,
            self.params.channels,
            self.params.max_occupancy,
            self.params.samples_per_cell,
        )?;
        self.agents =
            (0..users).map(|id| Agent::with_schedule(id, &schedule, self.params).map(Some)).collect::<Result<_, _>>()?;
        self.clock = EpochClock::new(schedule.len());
        Ok(())
    }

    fn mark_changed(&mut self) {
        if self.changed.last() != Some(&self.super_epoch) {
            self.changed.push(self.super_epoch);
        }
    }
}

impl Population for DynamicPopulation {
    fn prepare(&mut self, slot: u64) -> Result<(), EngineError> {
        let t = slot + 1;
        let boundary = slot == self.next_boundary;
        while let Some(ev) = self.schedule.events.get(self.next_event).copied() {
            if ev.t > t {
                break;
            }
            self.next_event += 1;
            let removed = self.roster.apply(&ev).map_err(|e| EngineError::Churn(e.to_string()))?;
            if let Some(Member { status: MemberStatus::Active { rank }, .. }) = removed {
                // before the first boundary there are no agents yet
                if let Some(agent) = self.agents.get_mut(rank) {
                    *agent = None;
                }
            }
            if !boundary {
                self.mark_changed();
            }
        }
        if boundary {
            self.start_super_epoch()?;
        }
        Ok(())
    }

    fn users(&self) -> usize {
        self.roster.len()
    }

    fn annotation(&self) -> Annotation {
        Annotation::from_clock(self.super_epoch, &self.clock)
    }

    fn actions(&mut self, out: &mut Vec<Action>) {
        for m in &self.roster.members {
            out.push(match m.status {
                MemberStatus::Active { rank } => self.agents[rank].as_mut().map_or(Action::Idle, Agent::act),
                MemberStatus::Pending => Action::Idle,
            });
        }
    }

    fn deliver(&mut self, rewards: &[Option<f64>], labels: &mut Vec<(usize, SampleLabel)>) -> Result<(), EngineError> {
        for (j, (m, &reward)) in self.roster.members.iter().zip(rewards).enumerate() {
            if let MemberStatus::Active { rank } = m.status {
                if let Some(agent) = self.agents[rank].as_mut() {
                    if let Some(label) = agent.observe(reward)? {
                        labels.push((j, label));
                    }
                }
            }
        }
        self.clock.tick();
        Ok(())
    }

    fn changed_super_epochs(&self) -> Vec<u32> {
        self.changed.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(zeta: f64, c: f64, horizon: u64, initial: usize) -> ChurnParams {
        ChurnParams { zeta, c, horizon, channels: 6, max_occupancy: 3, initial_users: initial }
    }

    #[test]
    fn zero_budget_is_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_churn(params(0.0, 0.0, 1_000_000, 10), &mut rng).unwrap();
        assert!(s.events.is_empty());
    }

    #[test]
    fn budget_respected_for_sublinear_exponent() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_churn(params(0.3, 1.0, 1_000_000, 10), &mut rng).unwrap();
            s.check().unwrap();
            // 10^(6 * 0.3) = 63.09...
            assert!(s.events.len() <= 63);
            for (i, e) in s.events.iter().enumerate() {
                assert!((i + 1) as f64 <= (e.t as f64).powf(0.3) + 1e-9);
            }
        }
    }

    #[test]
    fn full_system_first_event_departs() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_churn(params(0.3, 2.0, 100_000, 18), &mut rng).unwrap();
            if let Some(first) = s.events.first() {
                assert!(matches!(first.kind, ChurnKind::Depart { .. }));
            }
        }
    }

    #[test]
    fn departure_in_the_first_slot() {
        use crate::engine::{run, LogPoints};
        use crate::env::{MeansTable, RewardModel};
        let table = MeansTable::from_rows(&[vec![0.9, 0.3], vec![0.8, 0.2]]).unwrap();
        let model = RewardModel::point_mass(&table).unwrap();
        let policy = PolicyParams::from_delta(2, 2, 0.1375, 2).unwrap();
        let cp = ChurnParams { zeta: 0.0, c: 1.0, horizon: 1500, channels: 2, max_occupancy: 2, initial_users: 2 };
        let schedule = ChurnSchedule { params: cp, events: vec![ChurnEvent { t: 1, kind: ChurnKind::Depart { user: 1 } }] };
        let mut pop = DynamicPopulation::new(policy, 400, schedule).unwrap();
        let res = run(&model, &mut pop, 1500, ChaCha8Rng::seed_from_u64(0), LogPoints::Every(100), None).unwrap();
        assert_eq!(pop.roster().len(), 1);
        // the departure precedes the first boundary, so no super-epoch is written off
        assert!(res.summary.super_epochs.iter().all(|se| !se.changed));
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(generate_churn(params(0.5, 1.0, 10, 3), &mut rng), Err(ChurnError::BadExponent(_))));
        assert!(matches!(
            generate_churn(params(0.3, 1.0, 10, 0), &mut rng),
            Err(ChurnError::InfeasiblePopulation { .. })
        ));
        assert!(matches!(
            generate_churn(params(0.3, 1.0, 10, 19), &mut rng),
            Err(ChurnError::InfeasiblePopulation { .. })
        ));
    }

    #[test]
    fn super_epoch_boundaries() {
        assert_eq!(super_epoch_start(1, 100), 0);
        assert_eq!(super_epoch_start(2, 100), 100);
        assert_eq!(super_epoch_start(3, 100), 300);
        assert_eq!(super_epoch_start(4, 100), 600);
    }

    #[test]
    fn roster_bookkeeping() {
        let mut roster = Roster::new(4, 18);
        roster.apply(&ChurnEvent { t: 5, kind: ChurnKind::Depart { user: 1 } }).unwrap();
        roster.apply(&ChurnEvent { t: 6, kind: ChurnKind::Depart { user: 3 } }).unwrap();
        roster.apply(&ChurnEvent { t: 7, kind: ChurnKind::Arrive { user: 4 } }).unwrap();
        assert_eq!(roster.members()[2].status, MemberStatus::Pending);
        assert_eq!(roster.relabel(), 3);
        let ranks: Vec<_> = roster.members().iter().map(|m| (m.key, m.status)).collect();
        assert_eq!(
            ranks,
            vec![
                (0, MemberStatus::Active { rank: 0 }),
                (2, MemberStatus::Active { rank: 1 }),
                (4, MemberStatus::Active { rank: 2 })
            ]
        );
        let err = roster.apply(&ChurnEvent { t: 8, kind: ChurnKind::Depart { user: 9 } });
        assert_eq!(err, Err(ChurnError::UnknownUser(9)));
    }

    #[test]
    fn tau_must_exceed_worst_case_estimation() {
        let p = PolicyParams { channels: 6, max_occupancy: 3, samples_per_cell: 10, tx: 4 };
        // (18 + 9 + 6) groups * 6 channels * 10
        assert_eq!(worst_case_estimation(&p), 1980);
        assert!(matches!(validate_tau(1980, &p), Err(ChurnError::TauTooShort { .. })));
        assert!(validate_tau(1981, &p).is_ok());
    }

    #[test]
    fn schedule_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_churn(params(0.3, 1.0, 10_000, 10), &mut rng).unwrap();
        let text = toml::to_string(&s).unwrap();
        let back: ChurnSchedule = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
