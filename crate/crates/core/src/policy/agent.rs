use crate::env::MeansTable;
use crate::optimizer::{optimal_config, Configuration};

use super::schedule::EstimationSchedule;
use super::{rotated_position, Action, Phase, PolicyError};

/// System constants and tuning shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams {
    pub channels: usize,
    pub max_occupancy: usize,
    /// Samples per (channel, occupancy) cell in each estimation phase.
    pub samples_per_cell: u64,
    /// Rotation window in slots.
    pub tx: u64,
}

impl PolicyParams {
    /// `T0 = ceil(1 / (2 * delta_lb^2))`.
    pub fn from_delta(channels: usize, max_occupancy: usize, delta_lb: f64, tx: u64) -> Result<Self, PolicyError> {
        if !(delta_lb.is_finite() && delta_lb > 0.0) {
            return Err(PolicyError::InvalidParams(format!("delta lower bound must be positive, got {delta_lb}")));
        }
        let params = Self { channels, max_occupancy, samples_per_cell: samples_per_cell(delta_lb), tx };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.channels == 0 || self.max_occupancy == 0 {
            return Err(PolicyError::InvalidParams("channels and max occupancy must be positive".into()));
        }
        if self.samples_per_cell == 0 {
            return Err(PolicyError::InvalidParams("T0 must be positive".into()));
        }
        if self.tx == 0 {
            return Err(PolicyError::InvalidParams("Tx must be positive".into()));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.channels * self.max_occupancy
    }
}

/// Samples per cell needed for a gap lower bound.
pub fn samples_per_cell(delta_lb: f64) -> u64 {
    (1.0 / (2.0 * delta_lb * delta_lb)).ceil() as u64
}

/// An estimation sample the agent just recorded: it transmitted on `channel`
/// expecting exactly `occupancy` users there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLabel {
    pub channel: usize,
    pub occupancy: usize,
}

/// Epoch/phase bookkeeping shared by every agent of a population: an
/// estimation phase of fixed length followed by `2^epoch` allocation slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochClock {
    estimation_len: u64,
    epoch: u32,
    phase: Phase,
    phase_clock: u64,
}

impl EpochClock {
    pub fn new(estimation_len: u64) -> Self {
        Self { estimation_len, epoch: 1, phase: Phase::Estimation, phase_clock: 0 }
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Slots already spent in the current phase.
    pub fn phase_clock(&self) -> u64 {
        self.phase_clock
    }

    pub fn estimation_len(&self) -> u64 {
        self.estimation_len
    }

    /// `2^epoch` slots.
    pub fn allocation_len(&self) -> u64 {
        1u64.checked_shl(self.epoch).unwrap_or(u64::MAX)
    }

    pub fn phase_len(&self) -> u64 {
        match self.phase {
            Phase::Estimation => self.estimation_len,
            Phase::Allocation => self.allocation_len(),
        }
    }

    /// Advances one slot; returns the phase that just ended, if any.
    pub fn tick(&mut self) -> Option<Phase> {
        self.phase_clock += 1;
        if self.phase_clock < self.phase_len() {
            return None;
        }
        let ended = self.phase;
        self.phase_clock = 0;
        match ended {
            Phase::Estimation => self.phase = Phase::Allocation,
            Phase::Allocation => {
                self.epoch += 1;
                self.phase = Phase::Estimation;
            }
        }
        Some(ended)
    }
}

#[derive(Debug, Clone, Copy)]
struct Duty {
    start: u64,
    end: u64,
    channel: usize,
    group_size: usize,
}

/// One user's policy state.
///
/// Drive it with [`Agent::act`] then [`Agent::observe`] once per slot.
/// Estimates pool across epochs and are never reset within a run.
#[derive(Debug, Clone)]
pub struct Agent {
    id: usize,
    users: usize,
    params: PolicyParams,
    duties: Vec<Duty>,
    est_sum: Vec<f64>,
    est_count: Vec<u64>,
    clock: EpochClock,
    cursor: usize,
    k_hat: Option<Configuration>,
    positions: Vec<usize>,
    last: Option<SampleLabel>,
    transmitted: bool,
}

impl Agent {
    /// `id` is the 0-based broadcast rank among `users` active users.
    pub fn new(id: usize, users: usize, params: PolicyParams) -> Result<Self, PolicyError> {
        params.validate()?;
        let schedule = EstimationSchedule::build(users, params.channels, params.max_occupancy, params.samples_per_cell)?;
        Self::with_schedule(id, &schedule, params)
    }

    /// Builds an agent from an already-constructed timetable (every agent of
    /// a population derives the same one).
    pub fn with_schedule(id: usize, schedule: &EstimationSchedule, params: PolicyParams) -> Result<Self, PolicyError> {
        params.validate()?;
        let users = schedule.users();
        if id >= users {
            return Err(PolicyError::BadId { id, users });
        }
        if schedule.channels() != params.channels
            || schedule.max_occupancy() != params.max_occupancy
            || schedule.samples_per_cell() != params.samples_per_cell
        {
            return Err(PolicyError::InvalidParams("schedule was built for different parameters".into()));
        }
        let duties = schedule
            .duties(id)
            .map(|s| Duty { start: s.start, end: s.end(), channel: s.channel, group_size: s.group_size })
            .collect();
        let cells = params.channels * params.max_occupancy;
        Ok(Self {
            id,
            users,
            params,
            duties,
            est_sum: vec![0.0; cells],
            est_count: vec![0; cells],
            clock: EpochClock::new(schedule.len()),
            cursor: 0,
            k_hat: None,
            positions: Vec::new(),
            last: None,
            transmitted: false,
        })
    }

    /// Fresh agent for a new super-epoch: new broadcast rank and population,
    /// same system constants. Estimates and counters start over.
    pub fn restart(&self, id: usize, users: usize) -> Result<Self, PolicyError> {
        Self::new(id, users, self.params)
    }

    /// Action for the current slot.
    #[inline]
    pub fn act(&mut self) -> Action {
        let now = self.clock.phase_clock();
        let action = match self.clock.phase() {
            Phase::Estimation => {
                while self.cursor < self.duties.len() && self.duties[self.cursor].end <= now {
                    self.cursor += 1;
                }
                match self.duties.get(self.cursor) {
                    Some(d) if d.start <= now => {
                        self.last = Some(SampleLabel { channel: d.channel, occupancy: d.group_size });
                        Action::Transmit(d.channel)
                    }
                    _ => {
                        self.last = None;
                        Action::Idle
                    }
                }
            }
            Phase::Allocation => {
                self.last = None;
                let pos = rotated_position(self.id, now, self.params.tx, self.users);
                Action::Transmit(self.positions[pos])
            }
        };
        self.transmitted = action != Action::Idle;
        action
    }

    /// Delivers this slot's own reward (`None` when idle) and advances the
    /// clock. Returns the estimation label the reward was recorded under.
    pub fn observe(&mut self, reward: Option<f64>) -> Result<Option<SampleLabel>, PolicyError> {
        if self.transmitted != reward.is_some() {
            return Err(PolicyError::ObservationMismatch { transmitted: self.transmitted, rewarded: reward.is_some() });
        }
        let mut recorded = None;
        if let Some(r) = reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(PolicyError::RewardOutOfRange(r));
            }
            if let Some(label) = self.last.take() {
                let cell = label.channel * self.params.max_occupancy + label.occupancy - 1;
                self.est_sum[cell] += r;
                self.est_count[cell] += 1;
                recorded = Some(label);
            }
        }
        self.transmitted = false;
        match self.clock.tick() {
            Some(Phase::Estimation) => {
                let (k_hat, _) = optimal_config(&self.estimates(), self.users)?;
                self.positions = k_hat.flatten();
                self.k_hat = Some(k_hat);
            }
            Some(Phase::Allocation) => self.cursor = 0,
            None => {}
        }
        Ok(recorded)
    }

    /// Current pooled estimates; unsampled cells read as zero.
    pub fn estimates(&self) -> MeansTable {
        let values = self
            .est_sum
            .iter()
            .zip(&self.est_count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        MeansTable::new(self.params.channels, self.params.max_occupancy, values)
            .expect("estimate table shape follows the params")
    }

    /// Samples recorded for (channel, occupancy).
    pub fn sample_count(&self, channel: usize, occupancy: usize) -> u64 {
        self.est_count[channel * self.params.max_occupancy + occupancy - 1]
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn clock(&self) -> &EpochClock {
        &self.clock
    }

    pub fn epoch(&self) -> u32 {
        self.clock.epoch()
    }

    pub fn phase(&self) -> Phase {
        self.clock.phase()
    }

    pub fn k_hat(&self) -> Option<&Configuration> {
        self.k_hat.as_ref()
    }
}
