//! Decentralized per-user policy.
//!
//! Every agent runs the same epoch loop: an estimation phase that follows a
//! shared timetable ([`EstimationSchedule`]), a local computation of the
//! estimated optimal occupancy, and an allocation phase of `2^epoch` slots in
//! which users sit on channels by ID and rotate every `Tx` slots. Agents see
//! only their own rewards and the shared slot clock.

mod agent;
mod schedule;

pub use agent::{samples_per_cell, Agent, EpochClock, PolicyParams, SampleLabel};
pub use schedule::{estimation_len, EstimationSchedule, Segment};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::{Configuration, OptimizeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("population must contain at least one user")]
    NoUsers,
    #[error("{users} users exceed the system capacity {capacity}")]
    Infeasible { users: usize, capacity: usize },
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
    #[error("user id {id} out of range for {users} users")]
    BadId { id: usize, users: usize },
    #[error("configuration {config} holds {got} users, expected {expected}")]
    InvalidConfiguration { config: Configuration, got: usize, expected: usize },
    #[error("reward {0} outside [0, 1] violates the environment contract")]
    RewardOutOfRange(f64),
    #[error("observation does not match the last action (transmitted: {transmitted}, reward given: {rewarded})")]
    ObservationMismatch { transmitted: bool, rewarded: bool },
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Idle,
    Transmit(usize),
}

impl Action {
    pub fn channel(self) -> Option<usize> {
        match self {
            Action::Transmit(m) => Some(m),
            Action::Idle => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Estimation,
    Allocation,
}

/// Channel for user `rank` at allocation slot `alloc_slot`.
///
/// `k_hat` is flattened into positions (first `k(0)` positions on channel 0,
/// and so on). Every `tx` slots the whole population shifts by one position,
/// so user `rank` sits at position `(rank + alloc_slot / tx) mod K`. The
/// shift never changes how many users are on each channel.
pub fn assigned_channel(
    k_hat: &Configuration,
    rank: usize,
    alloc_slot: u64,
    tx: u64,
    users: usize,
) -> Result<usize, PolicyError> {
    if k_hat.users() != users {
        return Err(PolicyError::InvalidConfiguration { config: k_hat.clone(), got: k_hat.users(), expected: users });
    }
    if rank >= users {
        return Err(PolicyError::BadId { id: rank, users });
    }
    if tx == 0 {
        return Err(PolicyError::InvalidParams("Tx must be positive".into()));
    }
    Ok(k_hat.flatten()[rotated_position(rank, alloc_slot, tx, users)])
}

#[inline]
pub(crate) fn rotated_position(rank: usize, alloc_slot: u64, tx: u64, users: usize) -> usize {
    let shift = (alloc_slot / tx) % users as u64;
    (rank + shift as usize) % users
}
