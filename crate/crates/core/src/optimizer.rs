//! Optimal occupancy solver.
//!
//! The system value of an occupancy vector `k` is `sum_m k(m) * mu(m, k(m))`.
//! [`optimal_config`] maximizes it over all `k` with `0 <= k(m) <= N` and
//! `sum k = K` by a bounded-knapsack DP over channels. [`top_two_values`]
//! carries the two best *distinct* values through the same DP, and
//! [`brute_force`] enumerates every composition as an independent check.
//!
//! Values closer than [`VALUE_TOLERANCE`] are treated as equal. Among tied
//! maximizers the lexicographically smallest vector wins, so every agent that
//! holds the same table picks the same configuration.

use std::fmt;

use thiserror::Error;

use crate::env::MeansTable;

/// Two system values within this distance are considered the same value.
pub const VALUE_TOLERANCE: f64 = 1e-9;

/// Default cap on the number of compositions the brute-force oracle will visit.
pub const DEFAULT_ORACLE_CAP: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("{users} users cannot be placed on {channels} channels with at most {max_occupancy} each")]
    Infeasible { users: usize, channels: usize, max_occupancy: usize },
    #[error("every feasible configuration for {users} users has the same system value {value}; the gap is undefined")]
    DegenerateGap { users: usize, value: f64 },
    #[error("brute-force oracle would visit {count} configurations (cap {cap})")]
    OracleTooLarge { count: u128, cap: u128 },
}

/// Occupancy vector: users per channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration(Vec<usize>);

impl Configuration {
    pub fn new(counts: Vec<usize>) -> Self {
        Self(counts)
    }

    pub fn zeros(channels: usize) -> Self {
        Self(vec![0; channels])
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn users(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }

    pub fn value(&self, table: &MeansTable) -> f64 {
        table.system_value(&self.0)
    }

    /// Position-to-channel map: the first `k(0)` positions map to channel 0,
    /// the next `k(1)` to channel 1, and so on.
    pub fn flatten(&self) -> Vec<usize> {
        self.0.iter().enumerate().flat_map(|(m, &k)| std::iter::repeat_n(m, k)).collect()
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}")?;
        }
        f.write_str(")")
    }
}

/// `J1`, `J2` and the gap parameter `delta = (J1 - J2) / (2 M N)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapParams {
    pub j1: f64,
    pub j2: f64,
    pub delta: f64,
}

fn check_feasible(table: &MeansTable, users: usize) -> Result<(), OptimizeError> {
    if users > table.channels() * table.max_occupancy() {
        return Err(OptimizeError::Infeasible {
            users,
            channels: table.channels(),
            max_occupancy: table.max_occupancy(),
        });
    }
    Ok(())
}

/// Best value reachable from each (channel suffix, users left) state.
/// `best[i][u]` covers channels `i..M`; `None` marks infeasible states.
fn suffix_table(table: &MeansTable, users: usize) -> Vec<Vec<Option<f64>>> {
    let (channels, cap) = (table.channels(), table.max_occupancy());
    let mut best = vec![vec![None; users + 1]; channels + 1];
    best[channels][0] = Some(0.0);
    for m in (0..channels).rev() {
        for u in 0..=users {
            let mut cell: Option<f64> = None;
            for k in 0..=cap.min(u) {
                if let Some(rest) = best[m + 1][u - k] {
                    let v = table.channel_value(m, k) + rest;
                    if cell.is_none_or(|c| v > c) {
                        cell = Some(v);
                    }
                }
            }
            best[m][u] = cell;
        }
    }
    best
}

/// Optimal occupancy `k*` and its value `J1`.
pub fn optimal_config(table: &MeansTable, users: usize) -> Result<(Configuration, f64), OptimizeError> {
    check_feasible(table, users)?;
    let best = suffix_table(table, users);
    let j1 = best[0][users].expect("feasible instance has a finite optimum");

    // Walk forward taking the smallest k(m) that still reaches J1; this yields
    // the lexicographically smallest maximizer.
    let mut counts = Vec::with_capacity(table.channels());
    let (mut left, mut acc) = (users, 0.0);
    for m in 0..table.channels() {
        let k = (0..=table.max_occupancy().min(left))
            .find(|&k| {
                best[m + 1][left - k]
                    .is_some_and(|rest| acc + table.channel_value(m, k) + rest >= j1 - VALUE_TOLERANCE)
            })
            .expect("some branch of the DP attains the optimum");
        acc += table.channel_value(m, k);
        counts.push(k);
        left -= k;
    }
    let config = Configuration(counts);
    let value = config.value(table);
    Ok((config, value))
}

/// Up to two best distinct values, descending.
#[derive(Debug, Clone, Copy, Default)]
struct TopTwo {
    first: Option<f64>,
    second: Option<f64>,
}

impl TopTwo {
    fn offer(&mut self, v: f64) {
        match self.first {
            None => self.first = Some(v),
            Some(f) if (v - f).abs() <= VALUE_TOLERANCE => self.first = Some(f.max(v)),
            Some(f) if v > f => {
                self.second = Some(f);
                self.first = Some(v);
            }
            Some(_) => match self.second {
                None => self.second = Some(v),
                Some(s) if (v - s).abs() <= VALUE_TOLERANCE => self.second = Some(s.max(v)),
                Some(s) if v > s => self.second = Some(v),
                Some(_) => {}
            },
        }
    }

    fn values(self) -> impl Iterator<Item = f64> {
        self.first.into_iter().chain(self.second)
    }
}

/// Largest value `J1` and largest value strictly below it, `J2`.
///
/// `J2` is the second distinct value, not the value of a second-best
/// configuration: several configurations may share `J1`.
pub fn top_two_values(table: &MeansTable, users: usize) -> Result<(f64, f64), OptimizeError> {
    check_feasible(table, users)?;
    let (channels, cap) = (table.channels(), table.max_occupancy());
    let mut cells = vec![vec![TopTwo::default(); users + 1]; channels + 1];
    cells[channels][0].first = Some(0.0);
    for m in (0..channels).rev() {
        for u in 0..=users {
            let mut cell = TopTwo::default();
            for k in 0..=cap.min(u) {
                let here = table.channel_value(m, k);
                for rest in cells[m + 1][u - k].values() {
                    cell.offer(here + rest);
                }
            }
            cells[m][u] = cell;
        }
    }
    let top = cells[0][users];
    let j1 = top.first.expect("feasible instance has a finite optimum");
    match top.second {
        Some(j2) => Ok((j1, j2)),
        None => Err(OptimizeError::DegenerateGap { users, value: j1 }),
    }
}

pub fn gap_params(table: &MeansTable, users: usize) -> Result<GapParams, OptimizeError> {
    let (j1, j2) = top_two_values(table, users)?;
    let denom = 2.0 * (table.channels() * table.max_occupancy()) as f64;
    Ok(GapParams { j1, j2, delta: (j1 - j2) / denom })
}

/// Smallest gap parameter over every user count `1..=M*N` whose gap is
/// defined. This is the conservative bound to give agents when the
/// population size can change. `None` if no user count has a defined gap.
pub fn min_gap_over_user_counts(table: &MeansTable) -> Option<f64> {
    (1..=table.channels() * table.max_occupancy())
        .filter_map(|k| gap_params(table, k).ok())
        .map(|g| g.delta)
        .min_by(f64::total_cmp)
}

/// Number of vectors in `{0..=N}^M` summing to `users`.
pub fn composition_count(channels: usize, max_occupancy: usize, users: usize) -> u128 {
    let mut ways = vec![0u128; users + 1];
    ways[0] = 1;
    for _ in 0..channels {
        let mut next = vec![0u128; users + 1];
        for (u, slot) in next.iter_mut().enumerate() {
            *slot = (0..=max_occupancy.min(u)).map(|k| ways[u - k]).sum();
        }
        ways = next;
    }
    ways[users]
}

/// Exhaustive enumeration result.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub best: Configuration,
    /// Distinct system values, descending.
    pub values: Vec<f64>,
    pub visited: u128,
}

impl OracleReport {
    pub fn j1(&self) -> f64 {
        self.values[0]
    }

    pub fn j2(&self) -> Option<f64> {
        self.values.get(1).copied()
    }
}

/// Enumerates every feasible configuration in lexicographic order.
pub fn brute_force(table: &MeansTable, users: usize, cap: u128) -> Result<OracleReport, OptimizeError> {
    check_feasible(table, users)?;
    let count = composition_count(table.channels(), table.max_occupancy(), users);
    if count > cap {
        return Err(OptimizeError::OracleTooLarge { count, cap });
    }

    let mut all: Vec<(Vec<usize>, f64)> = Vec::with_capacity(count as usize);
    let mut current = vec![0; table.channels()];
    enumerate(table, users, 0, &mut current, &mut all);

    let j1 = all.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let best = all
        .iter()
        .find(|(_, v)| *v >= j1 - VALUE_TOLERANCE)
        .map(|(k, _)| Configuration(k.clone()))
        .expect("at least one configuration exists");

    let mut sorted: Vec<f64> = all.iter().map(|(_, v)| *v).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut values: Vec<f64> = Vec::new();
    for v in sorted {
        if values.last().is_none_or(|&last| last - v > VALUE_TOLERANCE) {
            values.push(v);
        }
    }
    Ok(OracleReport { best, values, visited: count })
}

fn enumerate(
    table: &MeansTable,
    left: usize,
    channel: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<(Vec<usize>, f64)>,
) {
    let channels = table.channels();
    if channel == channels {
        if left == 0 {
            out.push((current.clone(), table.system_value(current)));
        }
        return;
    }
    let room = (channels - channel - 1) * table.max_occupancy();
    for k in 0..=table.max_occupancy().min(left) {
        if left - k > room {
            continue;
        }
        current[channel] = k;
        enumerate(table, left - k, channel + 1, current, out);
    }
    current[channel] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MeansTable {
        MeansTable::from_rows(&[vec![0.9, 0.3], vec![0.8, 0.2]]).unwrap()
    }

    #[test]
    fn tiny_model_optimum() {
        let (k, j1) = optimal_config(&tiny(), 2).unwrap();
        assert_eq!(k.counts(), &[1, 1]);
        assert!((j1 - 1.7).abs() < 1e-12);
    }

    #[test]
    fn tiny_model_top_two_and_gap() {
        // compositions: (2,0) -> 0.6, (1,1) -> 1.7, (0,2) -> 0.4
        let (j1, j2) = top_two_values(&tiny(), 2).unwrap();
        assert!((j1 - 1.7).abs() < 1e-12);
        assert!((j2 - 0.6).abs() < 1e-12);
        let gap = gap_params(&tiny(), 2).unwrap();
        assert!((gap.delta - 0.1375).abs() < 1e-12);
    }

    #[test]
    fn gap_identity() {
        let g = GapParams { j1: 9.0, j2: 1.0, delta: 0.0 };
        let m_n = 4.0;
        assert_eq!((g.j1 - g.j2) / (2.0 * m_n), 1.0);
    }

    #[test]
    fn single_user_takes_best_single_occupancy_arm() {
        let table = MeansTable::from_rows(&[vec![0.3, 0.9], vec![0.7, 0.1], vec![0.5, 0.5]]).unwrap();
        let (k, j1) = optimal_config(&table, 1).unwrap();
        assert_eq!(k.counts(), &[0, 1, 0]);
        assert_eq!(j1, 0.7);
    }

    #[test]
    fn saturated_system_has_one_feasible_point() {
        let table = MeansTable::from_rows(&[vec![0.3, 0.9], vec![0.7, 0.1]]).unwrap();
        let (k, _) = optimal_config(&table, 4).unwrap();
        assert_eq!(k.counts(), &[2, 2]);
        assert!(matches!(top_two_values(&table, 4), Err(OptimizeError::DegenerateGap { .. })));
    }

    #[test]
    fn constant_means_give_degenerate_gap() {
        let table = MeansTable::from_rows(&vec![vec![0.4; 3]; 3]).unwrap();
        assert!(matches!(top_two_values(&table, 4), Err(OptimizeError::DegenerateGap { .. })));
        assert!(matches!(gap_params(&table, 4), Err(OptimizeError::DegenerateGap { .. })));
    }

    #[test]
    fn single_channel_single_feasible_point_is_degenerate() {
        let table = MeansTable::from_rows(&[vec![0.9, 0.4, 0.1]]).unwrap();
        assert!(matches!(top_two_values(&table, 2), Err(OptimizeError::DegenerateGap { .. })));
    }

    #[test]
    fn infeasible_user_count() {
        assert!(matches!(optimal_config(&tiny(), 5), Err(OptimizeError::Infeasible { .. })));
        assert!(matches!(brute_force(&tiny(), 5, DEFAULT_ORACLE_CAP), Err(OptimizeError::Infeasible { .. })));
    }

    #[test]
    fn empty_system() {
        let (k, j1) = optimal_config(&tiny(), 0).unwrap();
        assert_eq!(k, Configuration::zeros(2));
        assert_eq!(j1, 0.0);
        let report = brute_force(&tiny(), 0, DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(report.best, Configuration::zeros(2));
        assert_eq!(report.values, vec![0.0]);
    }

    #[test]
    fn ties_break_to_lexicographically_smallest() {
        let table = MeansTable::from_rows(&vec![vec![0.5, 0.1]; 3]).unwrap();
        let (k, _) = optimal_config(&table, 2).unwrap();
        assert_eq!(k.counts(), &[0, 1, 1]);
        assert_eq!(brute_force(&table, 2, DEFAULT_ORACLE_CAP).unwrap().best, k);
    }

    #[test]
    fn oracle_matches_dp_on_tiny_model() {
        let report = brute_force(&tiny(), 2, DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(report.best.counts(), &[1, 1]);
        assert_eq!(report.values.len(), 3);
        assert!((report.j2().unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oracle_cap() {
        let table = MeansTable::from_rows(&vec![vec![0.5; 3]; 6]).unwrap();
        assert_eq!(composition_count(6, 3, 10), 546);
        assert!(matches!(brute_force(&table, 10, 100), Err(OptimizeError::OracleTooLarge { count: 546, .. })));
    }

    #[test]
    fn flatten_maps_positions_to_channels() {
        let k = Configuration::new(vec![2, 0, 1]);
        assert_eq!(k.flatten(), vec![0, 0, 2]);
        assert_eq!(k.to_string(), "(2,0,1)");
    }
}
