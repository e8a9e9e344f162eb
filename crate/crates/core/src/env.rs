//! Ground-truth reward environment.
//!
//! A [`RewardModel`] holds, for every channel `m` and every occupancy
//! `n in 1..=N`, a reward distribution with mean `mu(m, n)`. Occupancies above
//! `N` always pay exactly zero. Channels are 0-based indices; occupancies are
//! plain user counts.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Analytic mean must match the tabulated mean to this precision.
const MEAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model needs at least one channel and a positive max occupancy (got M={channels}, N={max_occupancy})")]
    EmptyModel { channels: usize, max_occupancy: usize },
    #[error("means table has {got} rows/entries where {expected} were expected")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("channel {channel} out of range (model has {channels} channels)")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error("occupancy must be at least 1")]
    ZeroOccupancy,
    #[error("mean {mean} at channel {channel}, occupancy {occupancy} is outside [0, 1]")]
    MeanOutOfRange { channel: usize, occupancy: usize, mean: f64 },
    #[error(
        "distribution at channel {channel}, occupancy {occupancy} has support [{lo}, {hi}] outside [0, 1]"
    )]
    SupportOutOfRange { channel: usize, occupancy: usize, lo: f64, hi: f64 },
    #[error("invalid variance {0}")]
    InvalidVariance(f64),
    #[error("variance {variance} leaves no admissible mean (half-width {half_width} > 0.5)")]
    VarianceTooLarge { variance: f64, half_width: f64 },
    #[error("distribution mean {analytic} does not match table mean {table} at channel {channel}, occupancy {occupancy}")]
    MeanMismatch { channel: usize, occupancy: usize, analytic: f64, table: f64 },
    #[error("model spec needs either `means` or `seed`")]
    MissingMeans,
    #[error("{family} family does not take a variance")]
    UnexpectedVariance { family: &'static str },
    #[error("failed to read model file {path}: {message}")]
    Io { path: String, message: String },
    #[error("failed to parse model document: {0}")]
    Parse(String),
}

/// Per-cell reward distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardDist {
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    Bernoulli { p: f64 },
    PointMass { value: f64 },
}

impl RewardDist {
    /// Uniform distribution with the given mean and variance. A zero variance
    /// collapses to a point mass.
    pub fn uniform_with_variance(mean: f64, variance: f64) -> Self {
        if variance == 0.0 {
            return RewardDist::PointMass { value: mean };
        }
        let half_width = (3.0 * variance).sqrt();
        RewardDist::Uniform { lo: mean - half_width, hi: mean + half_width }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            RewardDist::Uniform { lo, hi } => 0.5 * (lo + hi),
            RewardDist::Bernoulli { p } => p,
            RewardDist::PointMass { value } => value,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            RewardDist::Uniform { lo, hi } => (lo, hi),
            RewardDist::Bernoulli { p: 0.0 } => (0.0, 0.0),
            RewardDist::Bernoulli { p: 1.0 } => (1.0, 1.0),
            RewardDist::Bernoulli { .. } => (0.0, 1.0),
            RewardDist::PointMass { value } => (value, value),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            RewardDist::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            RewardDist::Bernoulli { p } => p * (1.0 - p),
            RewardDist::PointMass { .. } => 0.0,
        }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RewardDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            RewardDist::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            RewardDist::PointMass { value } => value,
        }
    }

    fn check(&self, channel: usize, occupancy: usize) -> Result<(), ModelError> {
        let (lo, hi) = self.support();
        let finite = lo.is_finite() && hi.is_finite() && lo <= hi;
        if !finite || lo < 0.0 || hi > 1.0 {
            return Err(ModelError::SupportOutOfRange { channel, occupancy, lo, hi });
        }
        Ok(())
    }
}

/// Dense `M x N` table of mean rewards, indexed by channel (0-based) and
/// occupancy (1-based). Used both for the ground truth and for an agent's
/// estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct MeansTable {
    channels: usize,
    max_occupancy: usize,
    values: Vec<f64>,
}

impl MeansTable {
    pub fn new(channels: usize, max_occupancy: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        if channels == 0 || max_occupancy == 0 {
            return Err(ModelError::EmptyModel { channels, max_occupancy });
        }
        let expected = channels * max_occupancy;
        if values.len() != expected {
            return Err(ModelError::ShapeMismatch { expected, got: values.len() });
        }
        Ok(Self { channels, max_occupancy, values })
    }

    /// Builds a table from one row per channel.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let channels = rows.len();
        let max_occupancy = rows.first().map_or(0, Vec::len);
        if channels == 0 || max_occupancy == 0 {
            return Err(ModelError::EmptyModel { channels, max_occupancy });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != max_occupancy) {
            return Err(ModelError::ShapeMismatch { expected: max_occupancy, got: bad.len() });
        }
        Self::new(channels, max_occupancy, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn max_occupancy(&self) -> usize {
        self.max_occupancy
    }

    /// `mu(m, n)`, zero for `n == 0` and for every `n > N`.
    #[inline]
    pub fn get(&self, channel: usize, occupancy: usize) -> f64 {
        if occupancy == 0 || occupancy > self.max_occupancy {
            0.0
        } else {
            self.values[channel * self.max_occupancy + occupancy - 1]
        }
    }

    /// Reward collected by all users on `channel` at the given occupancy.
    #[inline]
    pub fn channel_value(&self, channel: usize, occupancy: usize) -> f64 {
        occupancy as f64 * self.get(channel, occupancy)
    }

    /// System reward `sum_m k(m) * mu(m, k(m))`, summed in channel order.
    pub fn system_value(&self, occupancy: &[usize]) -> f64 {
        occupancy.iter().enumerate().map(|(m, &k)| self.channel_value(m, k)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.max_occupancy).map(<[f64]>::to_vec).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            channels: self.channels,
            max_occupancy: self.max_occupancy,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Ground-truth environment: means plus per-cell sampling distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    means: MeansTable,
    dists: Vec<RewardDist>,
}

impl RewardModel {
    /// Builds a model from one row of distributions per channel, validating
    /// every support eagerly. Sampling never clamps.
    pub fn new(rows: Vec<Vec<RewardDist>>) -> Result<Self, ModelError> {
        let channels = rows.len();
        let max_occupancy = rows.first().map_or(0, Vec::len);
        if channels == 0 || max_occupancy == 0 {
            return Err(ModelError::EmptyModel { channels, max_occupancy });
        }
        let mut dists = Vec::with_capacity(channels * max_occupancy);
        for row in rows {
            if row.len() != max_occupancy {
                return Err(ModelError::ShapeMismatch { expected: max_occupancy, got: row.len() });
            }
            dists.extend(row);
        }
        let mut means = Vec::with_capacity(dists.len());
        for (idx, dist) in dists.iter().enumerate() {
            let (channel, occupancy) = (idx / max_occupancy, idx % max_occupancy + 1);
            dist.check(channel, occupancy)?;
            let mean = dist.mean();
            if !(0.0..=1.0).contains(&mean) {
                return Err(ModelError::MeanOutOfRange { channel, occupancy, mean });
            }
            means.push(mean);
        }
        Ok(Self { means: MeansTable::new(channels, max_occupancy, means)?, dists })
    }

    /// Uniform-interval rewards of a common variance around the given means.
    pub fn uniform(means: &MeansTable, variance: f64) -> Result<Self, ModelError> {
        check_variance(variance)?;
        let rows = means
            .rows()
            .into_iter()
            .enumerate()
            .map(|(m, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(i, mean)| {
                        if !(0.0..=1.0).contains(&mean) {
                            return Err(ModelError::MeanOutOfRange { channel: m, occupancy: i + 1, mean });
                        }
                        Ok(RewardDist::uniform_with_variance(mean, variance))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model = Self::new(rows)?;
        model.check_means(means)?;
        Ok(model)
    }

    /// Uniform model with means drawn uniformly on `[0, 1]` from `seed`, then
    /// clamped so every support fits inside `[0, 1]`.
    pub fn uniform_seeded(
        channels: usize,
        max_occupancy: usize,
        variance: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        check_variance(variance)?;
        let half_width = (3.0 * variance).sqrt();
        if half_width > 0.5 {
            return Err(ModelError::VarianceTooLarge { variance, half_width });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..channels * max_occupancy)
            .map(|_| rng.random::<f64>().clamp(half_width, 1.0 - half_width))
            .collect();
        Self::uniform(&MeansTable::new(channels, max_occupancy, values)?, variance)
    }

    pub fn bernoulli(means: &MeansTable) -> Result<Self, ModelError> {
        Self::new(
            means
                .rows()
                .into_iter()
                .map(|row| row.into_iter().map(|p| RewardDist::Bernoulli { p }).collect())
                .collect(),
        )
    }

    pub fn point_mass(means: &MeansTable) -> Result<Self, ModelError> {
        Self::new(
            means
                .rows()
                .into_iter()
                .map(|row| row.into_iter().map(|value| RewardDist::PointMass { value }).collect())
                .collect(),
        )
    }

    fn check_means(&self, expected: &MeansTable) -> Result<(), ModelError> {
        for m in 0..self.channels() {
            for n in 1..=self.max_occupancy() {
                let (analytic, table) = (self.means.get(m, n), expected.get(m, n));
                if (analytic - table).abs() > MEAN_TOLERANCE {
                    return Err(ModelError::MeanMismatch { channel: m, occupancy: n, analytic, table });
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.means.channels()
    }

    pub fn max_occupancy(&self) -> usize {
        self.means.max_occupancy()
    }

    /// Largest user count any configuration can hold productively (`M * N`).
    pub fn capacity(&self) -> usize {
        self.channels() * self.max_occupancy()
    }

    pub fn means(&self) -> &MeansTable {
        &self.means
    }

    pub fn dist(&self, channel: usize, occupancy: usize) -> Option<&RewardDist> {
        if channel >= self.channels() || occupancy == 0 || occupancy > self.max_occupancy() {
            return None;
        }
        Some(&self.dists[channel * self.max_occupancy() + occupancy - 1])
    }

    /// Mean reward per user on `channel` when `occupancy` users share it.
    /// Zero for every occupancy above `N`.
    pub fn mean_reward(&self, channel: usize, occupancy: usize) -> Result<f64, ModelError> {
        self.check_channel(channel)?;
        if occupancy == 0 {
            return Err(ModelError::ZeroOccupancy);
        }
        Ok(self.means.get(channel, occupancy))
    }

    /// One reward draw for a user on `channel` shared by `occupancy` users.
    pub fn sample_reward<R: Rng + ?Sized>(
        &self,
        channel: usize,
        occupancy: usize,
        rng: &mut R,
    ) -> Result<f64, ModelError> {
        self.check_channel(channel)?;
        if occupancy == 0 {
            return Err(ModelError::ZeroOccupancy);
        }
        Ok(self.sample_unchecked(channel, occupancy, rng))
    }

    /// Hot-path sampler for the simulator; the caller guarantees
    /// `channel < M` and `occupancy >= 1`.
    #[inline]
    pub(crate) fn sample_unchecked<R: Rng + ?Sized>(&self, channel: usize, occupancy: usize, rng: &mut R) -> f64 {
        if occupancy > self.max_occupancy() {
            return 0.0;
        }
        self.dists[channel * self.max_occupancy() + occupancy - 1].sample(rng)
    }

    fn check_channel(&self, channel: usize) -> Result<(), ModelError> {
        if channel >= self.channels() {
            return Err(ModelError::ChannelOutOfRange { channel, channels: self.channels() });
        }
        Ok(())
    }
}

fn check_variance(variance: f64) -> Result<(), ModelError> {
    if !variance.is_finite() || variance < 0.0 {
        return Err(ModelError::InvalidVariance(variance));
    }
    Ok(())
}

/// Distribution family named in a model document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Uniform,
    Bernoulli,
    PointMass,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Uniform => "uniform",
            Family::Bernoulli => "bernoulli",
            Family::PointMass => "point-mass",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serializable model document.
///
/// ```toml
/// M = 2
/// N = 2
/// family = "uniform"
/// variance = 0.01
/// means = [[0.9, 0.3], [0.8, 0.2]]   # one row per channel
/// # seed = 7                         # instead of `means`, uniform family only
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(rename = "M")]
    pub channels: usize,
    #[serde(rename = "N")]
    pub max_occupancy: usize,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<RewardModel, ModelError> {
        let table = match (&self.means, self.seed) {
            (Some(rows), _) => {
                let table = MeansTable::from_rows(rows)?;
                if table.channels() != self.channels || table.max_occupancy() != self.max_occupancy {
                    return Err(ModelError::ShapeMismatch {
                        expected: self.channels * self.max_occupancy,
                        got: table.channels() * table.max_occupancy(),
                    });
                }
                Some(table)
            }
            (None, Some(_)) => None,
            (None, None) => return Err(ModelError::MissingMeans),
        };
        match self.family {
            Family::Uniform => {
                let variance = self.variance.unwrap_or(0.0);
                match table {
                    Some(t) => RewardModel::uniform(&t, variance),
                    None => RewardModel::uniform_seeded(
                        self.channels,
                        self.max_occupancy,
                        variance,
                        self.seed.unwrap_or_default(),
                    ),
                }
            }
            family @ (Family::Bernoulli | Family::PointMass) => {
                if self.variance.is_some() {
                    return Err(ModelError::UnexpectedVariance { family: family.name() });
                }
                let table = table.ok_or(ModelError::MissingMeans)?;
                if family == Family::Bernoulli {
                    RewardModel::bernoulli(&table)
                } else {
                    RewardModel::point_mass(&table)
                }
            }
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model spec is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MeansTable {
        MeansTable::from_rows(&[vec![0.9, 0.3], vec![0.8, 0.2]]).unwrap()
    }

    #[test]
    fn mean_lookup_and_closure_above_max_occupancy() {
        let model = RewardModel::point_mass(&tiny()).unwrap();
        assert_eq!(model.mean_reward(0, 1).unwrap(), 0.9);
        assert_eq!(model.mean_reward(1, 2).unwrap(), 0.2);
        assert_eq!(model.mean_reward(0, 3).unwrap(), 0.0);
        assert_eq!(model.mean_reward(0, 40).unwrap(), 0.0);
        assert!(matches!(model.mean_reward(2, 1), Err(ModelError::ChannelOutOfRange { .. })));
        assert_eq!(model.mean_reward(0, 0), Err(ModelError::ZeroOccupancy));
    }

    #[test]
    fn point_mass_sampling_is_constant() {
        let table = MeansTable::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let model = RewardModel::point_mass(&table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(model.sample_reward(0, 2, &mut rng).unwrap(), 0.5);
            assert_eq!(model.sample_reward(0, 3, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn uniform_half_width_matches_variance() {
        let table = MeansTable::from_rows(&vec![vec![0.5; 3]; 6]).unwrap();
        let model = RewardModel::uniform(&table, 0.01).unwrap();
        let (lo, hi) = model.dist(3, 2).unwrap().support();
        assert!((0.5 * (hi - lo) - 0.03f64.sqrt()).abs() < 1e-15);
        assert!((0.5 * (hi - lo) - 0.1732).abs() < 1e-4);
        assert!((model.dist(0, 1).unwrap().variance() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_collapses_to_point_mass() {
        let model = RewardModel::uniform(&tiny(), 0.0).unwrap();
        assert_eq!(model.dist(0, 1), Some(&RewardDist::PointMass { value: 0.9 }));
    }

    #[test]
    fn mean_too_close_to_boundary_is_rejected_with_location() {
        let table = MeansTable::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.05]]).unwrap();
        match RewardModel::uniform(&table, 0.01) {
            Err(ModelError::SupportOutOfRange { channel, occupancy, lo, .. }) => {
                assert_eq!((channel, occupancy), (1, 2));
                assert!(lo < 0.0);
            }
            other => panic!("expected support error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(RewardModel::new(vec![vec![RewardDist::Bernoulli { p: 1.2 }]]).is_err());
        assert!(RewardModel::new(vec![vec![RewardDist::PointMass { value: -0.1 }]]).is_err());
        assert!(RewardModel::new(vec![vec![RewardDist::Uniform { lo: 0.2, hi: 1.01 }]]).is_err());
        assert!(RewardModel::new(vec![]).is_err());
        assert!(RewardModel::uniform(&tiny(), -1.0).is_err());
    }

    #[test]
    fn uniform_sample_mean_is_within_standard_error_bound() {
        let table = MeansTable::from_rows(&[vec![0.6]]).unwrap();
        let model = RewardModel::uniform(&table, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let r = model.sample_reward(0, 1, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&r));
            sum += r;
        }
        // 3 sigma / sqrt(S) with sigma = 0.1
        assert!((sum / draws as f64 - 0.6).abs() < 3e-4);
    }

    #[test]
    fn seeded_means_are_clamped_into_admissible_range() {
        let model = RewardModel::uniform_seeded(6, 3, 0.01, 42).unwrap();
        let hw = 0.03f64.sqrt();
        for m in 0..6 {
            for n in 1..=3 {
                let mu = model.means().get(m, n);
                assert!(mu >= hw && mu <= 1.0 - hw);
            }
        }
        assert_eq!(model, RewardModel::uniform_seeded(6, 3, 0.01, 42).unwrap());
        assert!(RewardModel::uniform_seeded(2, 2, 0.1, 1).is_err());
    }

    #[test]
    fn spec_document_roundtrip_and_build() {
        let text = r#"
            M = 2
            N = 2
            family = "uniform"
            variance = 0.0
            means = [[0.9, 0.3], [0.8, 0.2]]
        "#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.build().unwrap().means(), &tiny());
        let again = ModelSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(again, spec);

        let bad = ModelSpec { variance: Some(0.1), family: Family::Bernoulli, ..spec.clone() };
        assert!(bad.build().is_err());
        let seeded = ModelSpec { means: None, seed: Some(9), variance: Some(0.01), ..spec };
        assert_eq!(seeded.build().unwrap().channels(), 2);
    }
}
