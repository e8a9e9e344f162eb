//! Decentralized multi-user multi-armed bandits for uncoordinated spectrum
//! access.
//!
//! Users share `M` channels; the reward on a channel depends on how many
//! users picked it, and is zero once more than `N` users pile on. Each user
//! runs the same epoch-based policy ([`policy`]) without communicating: a
//! scheduled estimation phase, a local solve for the best occupancy vector
//! ([`optimizer`]), and an allocation phase that grows as `2^epoch`. The
//! [`engine`] runs populations slot by slot against a ground-truth
//! [`env::RewardModel`] and records pseudo-regret; [`dynamics`] adds user
//! arrivals and departures with super-epoch restarts; [`experiment`] wires
//! configs, batch runs and CSV output together.

pub mod dynamics;
pub mod engine;
pub mod env;
pub mod experiment;
pub mod optimizer;
pub mod policy;

pub use env::{MeansTable, ModelSpec, RewardDist, RewardModel};
pub use optimizer::{Configuration, GapParams};
pub use policy::{Action, Agent, Phase, PolicyParams};
