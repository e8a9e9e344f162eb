use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::engine::LogPoints;
use crate::env::ModelSpec;

use super::ExperimentError;

/// Which policy every user runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// The epoch-based estimation/allocation policy.
    Epoch,
    /// Uniformly random channel every slot.
    Random,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Epoch => "epoch",
            PolicyKind::Random => "random",
        })
    }
}

/// Lower bound on the gap handed to agents.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DeltaLb {
    /// Use the ground-truth gap of the model.
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for DeltaLb {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DeltaLb::Auto => s.serialize_str("auto"),
            DeltaLb::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for DeltaLb {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = DeltaLb;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"auto\" or a positive number")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<DeltaLb, E> {
                if v == "auto" {
                    Ok(DeltaLb::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<DeltaLb, E> {
                Ok(DeltaLb::Value(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<DeltaLb, E> {
                Ok(DeltaLb::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<DeltaLb, E> {
                Ok(DeltaLb::Value(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

/// Model given inline or by path (relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    File { file: PathBuf },
    Inline(ModelSpec),
}

/// Churn process for the dynamic setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnConfig {
    pub zeta: f64,
    pub c: f64,
    /// Base super-epoch length.
    pub tau: u64,
    pub initial_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_log")]
    pub log: LogPoints,
    /// Also write every slot's outcome (large).
    #[serde(default)]
    pub full_log: bool,
}

fn default_log() -> LogPoints {
    LogPoints::Every(1000)
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, log: default_log(), full_log: false }
    }
}

/// One experiment: a model, a population, a policy and a batch of seeded runs.
///
/// ```toml
/// policy = "epoch"
/// horizon = 100000
/// tx = 64
/// delta_lb = "auto"
/// runs = 10
/// seed = 1
/// users = 10
///
/// [model]
/// file = "benchmark_model.toml"
///
/// [output]
/// log = { every = 1000 }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicyKind,
    pub horizon: u64,
    pub tx: u64,
    #[serde(default)]
    pub delta_lb: DeltaLb,
    pub runs: usize,
    pub seed: u64,
    /// Fixed population size; mutually exclusive with `churn`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    pub model: ModelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub churn: Option<ChurnConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Model spec, reading the referenced file relative to `base_dir`.
    pub fn model_spec(&self, base_dir: &Path) -> Result<ModelSpec, ExperimentError> {
        match &self.model {
            ModelSource::Inline(spec) => Ok(spec.clone()),
            ModelSource::File { file } => Ok(ModelSpec::load(&base_dir.join(file))?),
        }
    }

    /// Population size at the start of the run.
    pub fn initial_users(&self) -> Option<usize> {
        self.users.or(self.churn.map(|c| c.initial_users))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Family;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            policy: PolicyKind::Epoch,
            horizon: 5000,
            tx: 8,
            delta_lb: DeltaLb::Value(0.05),
            runs: 3,
            seed: 42,
            users: None,
            model: ModelSource::Inline(ModelSpec {
                channels: 2,
                max_occupancy: 2,
                family: Family::Uniform,
                variance: Some(0.01),
                means: Some(vec![vec![0.9, 0.3], vec![0.8, 0.2]]),
                seed: None,
            }),
            churn: Some(ChurnConfig { zeta: 0.3, c: 1.0, tau: 2000, initial_users: 2 }),
            output: OutputConfig { dir: Some("out".into()), log: LogPoints::PowersOfTwo, full_log: true },
        }
    }

    #[test]
    fn roundtrip() {
        let cfg = sample();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);

        let file_cfg = ExperimentConfig {
            model: ModelSource::File { file: "m.toml".into() },
            delta_lb: DeltaLb::Auto,
            users: Some(2),
            churn: None,
            output: OutputConfig::default(),
            ..cfg
        };
        let text = file_cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), file_cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ExperimentConfig::from_toml_str("policy = \"epoch\"\nhorizon = \"ten\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn delta_lb_forms() {
        #[derive(Deserialize)]
        struct W {
            d: DeltaLb,
        }
        assert_eq!(toml::from_str::<W>("d = \"auto\"").unwrap().d, DeltaLb::Auto);
        assert_eq!(toml::from_str::<W>("d = 0.25").unwrap().d, DeltaLb::Value(0.25));
        assert!(toml::from_str::<W>("d = \"sometimes\"").is_err());
    }
}
