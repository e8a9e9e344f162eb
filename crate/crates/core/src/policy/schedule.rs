use super::PolicyError;

/// One block of the estimation phase: a single group of `group_size` users
/// transmits on `channel` for `len` slots while everybody else stays idle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub group_size: usize,
    /// User ranks (0-based IDs) in the transmitting group.
    pub members: Vec<usize>,
    pub channel: usize,
    /// Offset from the start of the estimation phase.
    pub start: u64,
    pub len: u64,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }
}

/// Deterministic estimation-phase timetable shared by every agent.
///
/// For each group size `n = 1..=N`, users are split by ID into consecutive
/// groups of `n`; an incomplete last group is topped up with the lowest IDs
/// of the first group. Groups take turns: the active group plays channels
/// `0..M` for `T0` slots each. Group sizes larger than the population are
/// skipped, since no configuration of `K` users ever puts more than `K`
/// users on a channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimationSchedule {
    users: usize,
    channels: usize,
    max_occupancy: usize,
    samples_per_cell: u64,
    segments: Vec<Segment>,
}

impl EstimationSchedule {
    pub fn build(users: usize, channels: usize, max_occupancy: usize, samples_per_cell: u64) -> Result<Self, PolicyError> {
        if users == 0 {
            return Err(PolicyError::NoUsers);
        }
        if channels == 0 || max_occupancy == 0 || samples_per_cell == 0 {
            return Err(PolicyError::InvalidParams("channels, max occupancy and T0 must be positive".into()));
        }
        if users > channels * max_occupancy {
            return Err(PolicyError::Infeasible { users, capacity: channels * max_occupancy });
        }

        let mut segments = Vec::new();
        let mut clock = 0u64;
        for n in 1..=max_occupancy.min(users) {
            for g in 0..users.div_ceil(n) {
                let mut members: Vec<usize> = (g * n..((g + 1) * n).min(users)).collect();
                let missing = n - members.len();
                members.extend(0..missing);
                for channel in 0..channels {
                    segments.push(Segment {
                        group_size: n,
                        members: members.clone(),
                        channel,
                        start: clock,
                        len: samples_per_cell,
                    });
                    clock += samples_per_cell;
                }
            }
        }
        Ok(Self { users, channels, max_occupancy, samples_per_cell, segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total slots in one estimation phase.
    pub fn len(&self) -> u64 {
        self.segments.last().map_or(0, Segment::end)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn max_occupancy(&self) -> usize {
        self.max_occupancy
    }

    pub fn samples_per_cell(&self) -> u64 {
        self.samples_per_cell
    }

    /// Segments in which `user` transmits, in time order.
    pub fn duties(&self, user: usize) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.members.contains(&user))
    }
}

/// Estimation-phase length for a population without building the schedule.
pub fn estimation_len(users: usize, channels: usize, max_occupancy: usize, samples_per_cell: u64) -> u64 {
    (1..=max_occupancy.min(users))
        .map(|n| users.div_ceil(n) as u64 * channels as u64 * samples_per_cell)
        .sum()
}
