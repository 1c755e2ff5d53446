use kfaclab::harness::{factors_json, initial_factors, run_invariance, run_training, ExperimentConfig, Verdict};
use kfaclab::par;

const CONFIG: &str = r#"{
    "architecture": {"layers": [
        {"kind": "conv2d", "dims": [2, 3, 1, 3, 3], "activation": "logistic"},
        {"kind": "dense", "dims": [27, 4], "activation": "logistic"}
    ]},
    "output_model": {"kind": "categorical", "num_classes": 4},
    "optimizer": "kfac",
    "steps": 3,
    "learning_rate": 0.05,
    "seed": 4,
    "init_gain": 3.0,
    "dataset": {"num_samples": 48, "distribution": "uniform"},
    "reparam": {"kind": "random", "seed": 2, "cap": 20}
}"#;

#[test]
fn json_config_runs_to_a_passing_report() {
    let config = ExperimentConfig::from_json(CONFIG).unwrap();
    let report = run_invariance(&config).unwrap();
    assert_eq!(report.verdict, Verdict::Pass, "{:?}", report.records);
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.config, config);
}

#[test]
fn parallel_and_sequential_runs_agree_bitwise() {
    let config = ExperimentConfig::from_json(CONFIG).unwrap();
    let parallel = serde_json::to_string(&run_invariance(&config).unwrap()).unwrap();
    let sequential = par::with_sequential(|| serde_json::to_string(&run_invariance(&config).unwrap()).unwrap());
    assert_eq!(parallel, sequential);

    let curve = run_training(&config).unwrap();
    assert_eq!(curve, par::with_sequential(|| run_training(&config).unwrap()));

    let dump = factors_json(&initial_factors(&config).unwrap());
    assert_eq!(dump, par::with_sequential(|| factors_json(&initial_factors(&config).unwrap())));
}

#[test]
fn sequential_mode_is_scoped() {
    assert_eq!(par::is_parallel(), cfg!(feature = "parallel"));
    par::with_sequential(|| assert!(!par::is_parallel()));
    assert_eq!(par::is_parallel(), cfg!(feature = "parallel"));
}
