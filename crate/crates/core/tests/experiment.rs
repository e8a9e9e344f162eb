use std::path::Path;

use musa::engine::LogPoints;
use musa::env::Family;
use musa::experiment::{
    execute, ChurnConfig, DeltaLb, ExperimentConfig, ModelSource, OutputConfig, Plan, PolicyKind,
};
use musa::ModelSpec;
use proptest::prelude::*;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        channels: 2,
        max_occupancy: 2,
        family: Family::Uniform,
        variance: Some(0.002),
        means: Some(vec![vec![0.9, 0.3], vec![0.8, 0.2]]),
        seed: None,
    }
}

fn config(policy: PolicyKind) -> ExperimentConfig {
    ExperimentConfig {
        policy,
        horizon: 3000,
        tx: 4,
        delta_lb: DeltaLb::Auto,
        runs: 3,
        seed: 11,
        users: Some(2),
        model: ModelSource::Inline(tiny_spec()),
        churn: None,
        output: OutputConfig { dir: None, log: LogPoints::Every(250), full_log: false },
    }
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn batch_writes_traces_aggregate_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let plan = Plan::prepare(config(PolicyKind::Epoch), Path::new("."), None).unwrap();
    let report = execute(&plan, dir.path()).unwrap();

    for i in 0..3 {
        let path = dir.path().join(format!("run_{i:03}.csv"));
        assert_eq!(header(&path), "t,cumulative_regret,epoch,phase");
        let rows: Vec<u64> = csv::Reader::from_path(&path)
            .unwrap()
            .records()
            .map(|r| r.unwrap()[0].parse().unwrap())
            .collect();
        assert_eq!(rows, (1..=12).map(|k| k * 250).collect::<Vec<_>>());
    }
    let agg = dir.path().join("aggregate.csv");
    assert_eq!(header(&agg), "t,mean,std");
    let means: Vec<f64> = csv::Reader::from_path(&agg).unwrap().records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(means.len(), 12);
    assert!(means.windows(2).all(|w| w[1] >= w[0] - 1e-9));

    let text = std::fs::read_to_string(dir.path().join("summary.toml")).unwrap();
    let doc: toml::Table = text.parse().unwrap();
    assert_eq!(doc["policy"].as_str(), Some("epoch"));
    assert_eq!(doc["horizon"].as_integer(), Some(3000));
    assert_eq!(doc["runs"].as_integer(), Some(3));
    let mean = doc["final_regret_mean"].as_float().unwrap();
    assert!((mean - report.summary.final_regret_mean).abs() <= 1e-12);
    assert!((mean - means[11]).abs() <= 1e-9);
    assert!(!dir.path().join("run_000_slots.csv").exists());
}

#[test]
fn full_log_has_one_row_per_slot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(PolicyKind::Random);
    cfg.runs = 1;
    cfg.horizon = 500;
    cfg.output.full_log = true;
    let plan = Plan::prepare(cfg, Path::new("."), None).unwrap();
    execute(&plan, dir.path()).unwrap();
    let path = dir.path().join("run_000_slots.csv");
    assert_eq!(
        header(&path),
        "t,users,super_epoch,epoch,phase,occupancy,actions,rewards,expected_system_reward,regret,samples"
    );
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 500);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
        let occupied: usize = row[5].split(';').map(|x| x.parse::<usize>().unwrap()).sum();
        assert_eq!(occupied, 2);
    }
}

#[test]
fn churn_runs_write_their_event_lists() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(PolicyKind::Epoch);
    cfg.users = None;
    cfg.horizon = 20_000;
    cfg.delta_lb = DeltaLb::Value(0.1375);
    cfg.churn = Some(ChurnConfig { zeta: 0.45, c: 2.0, tau: 1000, initial_users: 2 });
    let plan = Plan::prepare(cfg, Path::new("."), None).unwrap();
    let report = execute(&plan, dir.path()).unwrap();
    for (i, run) in report.runs.iter().enumerate() {
        let path = dir.path().join(format!("run_{i:03}_churn.csv"));
        let rows = csv::Reader::from_path(&path).unwrap().records().count();
        assert_eq!(rows, run.churn.as_ref().unwrap().events.len());
    }
    assert_eq!(report.summary.rate.len(), 2);
}

#[test]
fn invalid_configs_report_every_problem() {
    let mut cfg = config(PolicyKind::Epoch);
    cfg.runs = 0;
    cfg.horizon = 0;
    cfg.users = Some(9);
    let err = Plan::prepare(cfg, Path::new("."), None).unwrap_err();
    assert!(err.is_validation());
    let text = err.to_string();
    for key in ["runs", "horizon", "users"] {
        assert!(text.contains(key), "{text}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_roundtrip_through_toml(
        epoch in any::<bool>(),
        horizon in 1u64..10_000_000,
        tx in 1u64..1000,
        delta in prop::option::of(0.001f64..0.5),
        runs in 1usize..200,
        seed: u64,
        churn in any::<bool>(),
        every in prop::option::of(1u64..100_000),
        full_log in any::<bool>(),
    ) {
        let mut cfg = config(if epoch { PolicyKind::Epoch } else { PolicyKind::Random });
        cfg.horizon = horizon;
        cfg.tx = tx;
        cfg.delta_lb = delta.map_or(DeltaLb::Auto, DeltaLb::Value);
        cfg.runs = runs;
        cfg.seed = seed;
        if churn {
            cfg.users = None;
            cfg.churn = Some(ChurnConfig { zeta: 0.3, c: 1.5, tau: 5000, initial_users: 3 });
        }
        cfg.output = OutputConfig {
            dir: Some("out/x".into()),
            log: every.map_or(LogPoints::PowersOfTwo, LogPoints::Every),
            full_log,
        };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
