use super::*;
use crate::kfac::DampingMode;
use crate::linalg::{solve, Matrix};
use crate::metrics::{objective, OutputModel, Target};
use crate::nets::{ActivationKind, LayerSpec, ParamSet};
use crate::reparam::{transform_params, AffineMap, NetworkReparam};

fn mlp_config(optimizer: Optimizer, reparam: ReparamSource) -> ExperimentConfig {
    let act = ActivationKind::Logistic;
    ExperimentConfig {
        architecture: Architecture {
            layers: vec![
                LayerSpec::dense(8, 12, act.clone()),
                LayerSpec::dense(12, 10, act.clone()),
                LayerSpec::dense(10, 6, act),
            ],
        },
        output_model: OutputModel::Categorical { num_classes: 6 },
        metric: MetricChoice::Fisher,
        optimizer,
        steps: 5,
        learning_rate: 0.05,
        damping: 0.0,
        damping_mode: DampingMode::None,
        seed: 0,
        init_gain: 3.0,
        dataset: DatasetSpec {
            num_samples: 64,
            distribution: InputDistribution::StandardNormal,
        },
        reparam,
        tolerances: ToleranceOverrides::default(),
        probes: 32,
    }
}

/// 26 parameters, gaussian output: small enough for the dense Fisher.
fn tiny_gaussian_config(optimizer: Optimizer, reparam: ReparamSource) -> ExperimentConfig {
    let mut c = mlp_config(optimizer, reparam);
    c.architecture.layers = vec![
        LayerSpec::dense(3, 4, ActivationKind::Tanh),
        LayerSpec::dense(4, 2, ActivationKind::Identity),
    ];
    c.output_model = OutputModel::Gaussian { dim: 2, variance: 1.0 };
    c.init_gain = 1.0;
    c.steps = 3;
    c.dataset.num_samples = 256;
    c
}

/// One dense identity layer with a gaussian output: a linear least squares
/// problem.
fn linear_gaussian_config(optimizer: Optimizer, learning_rate: f64) -> ExperimentConfig {
    let mut c = mlp_config(optimizer, ReparamSource::Identity);
    c.architecture.layers = vec![LayerSpec::dense(4, 3, ActivationKind::Identity)];
    c.output_model = OutputModel::Gaussian { dim: 3, variance: 1.0 };
    c.learning_rate = learning_rate;
    c.init_gain = 1.0;
    c.dataset.num_samples = 40;
    c
}

fn random(seed: u64) -> ReparamSource {
    ReparamSource::Random { seed, cap: 100.0 }
}

#[test]
fn identity_reparam_gives_zero_discrepancy() {
    for config in [
        mlp_config(Optimizer::Kfac, ReparamSource::Identity),
        mlp_config(Optimizer::Sgd, ReparamSource::Identity),
        tiny_gaussian_config(Optimizer::Ngd, ReparamSource::Identity),
    ] {
        let report = run_invariance(&config).unwrap();
        assert_eq!(report.verdict, Verdict::Pass);
        assert_eq!(report.records.len(), config.steps + 1);
        for r in &report.records {
            assert_eq!(r.forward_discrepancy, 0.0);
            assert_eq!(r.parameter_discrepancy, 0.0);
            assert_eq!(r.objective, r.objective_transformed);
        }
    }
}

#[test]
fn kfac_mlp_run_is_invariant() {
    for seed in 0..3 {
        let report = run_invariance(&mlp_config(Optimizer::Kfac, random(seed))).unwrap();
        assert_eq!(report.verdict, Verdict::Pass, "{:?}", report.records);
        assert!(report.records[0].forward_discrepancy <= 1e-10);
        // The training actually moved: the objective changed noticeably.
        let first = report.records[0].objective;
        let last = report.records.last().unwrap().objective;
        assert!((first - last).abs() > 1e-2, "{first} -> {last}");
        for r in &report.records {
            assert!((r.objective - r.objective_transformed).abs() <= 1e-8);
        }
    }
}

#[test]
fn kfac_conv_and_rnn_runs_are_invariant() {
    let act = ActivationKind::Logistic;
    let mut conv = mlp_config(Optimizer::Kfac, random(1));
    conv.architecture.layers = vec![
        LayerSpec::conv2d(2, 3, 1, 4, 4, act.clone()),
        LayerSpec::conv2d(3, 2, 1, 4, 4, act.clone()),
        LayerSpec::dense(32, 6, act.clone()),
    ];
    conv.steps = 3;
    let mut rnn = mlp_config(Optimizer::Kfac, random(2));
    rnn.architecture.layers = vec![LayerSpec::recurrent(3, 6, 4, act.clone()), LayerSpec::dense(6, 6, act)];
    rnn.dataset.num_samples = 32;
    for config in [conv, rnn] {
        let report = run_invariance(&config).unwrap();
        assert_eq!(report.verdict, Verdict::Pass, "{:?}", report.records);
    }
}

#[test]
fn non_fisher_metrics_are_invariant_with_fixed_output_space() {
    for metric in [MetricChoice::GaussNewton, MetricChoice::Ggn] {
        let mut config = mlp_config(Optimizer::Kfac, random(4));
        config.metric = metric;
        config.steps = 3;
        let spec = config.network().unwrap();
        assert!(resolve_reparam(&config, &spec).unwrap().activation_maps.last().unwrap().is_identity());
        let report = run_invariance(&config).unwrap();
        assert_eq!(report.verdict, Verdict::Pass, "{metric:?}: {:?}", report.records);
    }
}

#[test]
fn ngd_run_is_invariant() {
    for seed in 0..3 {
        let report = run_ngd_invariance(&tiny_gaussian_config(Optimizer::Kfac, random(seed))).unwrap();
        assert_eq!(report.config.optimizer, Optimizer::Ngd);
        assert_eq!(report.tolerances.update, NGD_TOLERANCE);
        assert_eq!(report.verdict, Verdict::Pass, "{:?}", report.records);
    }
}

#[test]
fn ngd_on_redundant_softmax_is_degenerate() {
    // Shifting every logit by the same amount leaves the softmax unchanged,
    // so the Fisher of a dense output layer over all classes is singular.
    let mut config = mlp_config(Optimizer::Ngd, ReparamSource::Identity);
    config.architecture.layers = vec![LayerSpec::dense(3, 4, ActivationKind::Identity)];
    config.output_model = OutputModel::Categorical { num_classes: 4 };
    let report = run_invariance(&config).unwrap();
    assert_eq!(report.verdict, Verdict::Degenerate);
    assert_eq!(report.records.len(), 1);
    assert!(report.diagnostic.unwrap().contains("singular"));
}

#[test]
fn sgd_control_is_not_invariant() {
    let mut config = mlp_config(Optimizer::Sgd, random(0));
    config.steps = 1;
    let report = run_invariance(&config).unwrap();
    assert_eq!(report.verdict, Verdict::Fail);
    assert!(report.records[0].forward_discrepancy <= 1e-10);
    assert!(report.records[1].forward_discrepancy > 1e-3);
}

#[test]
fn damped_runs_report_without_verdict() {
    for mode in [DampingMode::DenseTikhonov, DampingMode::Factored] {
        let mut config = mlp_config(Optimizer::Kfac, random(0));
        config.damping = 0.1;
        config.damping_mode = mode;
        let report = run_invariance(&config).unwrap();
        assert_eq!(report.verdict, Verdict::ReportOnly);
        assert!(report.max_forward_discrepancy() > 1e-6, "{mode:?}");
    }
    // Damping with mode `none` is ignored, so the run is judged.
    let mut config = mlp_config(Optimizer::Kfac, random(0));
    config.damping = 0.1;
    assert_eq!(run_invariance(&config).unwrap().verdict, Verdict::Pass);
}

#[test]
fn tolerance_overrides_drive_the_verdict() {
    let mut config = mlp_config(Optimizer::Kfac, random(0));
    config.steps = 2;
    config.tolerances.update = Some(1e-30);
    let report = run_invariance(&config).unwrap();
    assert_eq!(report.tolerances.update, 1e-30);
    assert_eq!(report.verdict, Verdict::Fail);
    config.tolerances = ToleranceOverrides::default();
    let t = tolerances_for(&config);
    assert_eq!((t.step0, t.update), (STEP0_TOLERANCE, KFAC_TOLERANCE));
}

#[test]
fn reports_are_deterministic() {
    let config = mlp_config(Optimizer::Kfac, random(5));
    let a = serde_json::to_string(&run_invariance(&config).unwrap()).unwrap();
    let b = serde_json::to_string(&run_invariance(&config).unwrap()).unwrap();
    assert_eq!(a, b);
    let back: InvarianceReport = serde_json::from_str(&a).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), a);
}

#[test]
fn logistic_to_tanh_preset_is_invariant() {
    let config = mlp_config(
        Optimizer::Kfac,
        ReparamSource::Preset {
            name: "logistic-to-tanh".into(),
        },
    );
    let report = run_invariance(&config).unwrap();
    assert_eq!(report.verdict, Verdict::Pass, "{:?}", report.records);
    let mut bad = config.clone();
    bad.reparam = ReparamSource::Preset { name: "nope".into() };
    assert!(matches!(run_invariance(&bad), Err(crate::Error::InvalidConfig(_))));
}

#[test]
fn file_reparam_output_rule_depends_on_metric() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mlp_config(Optimizer::Kfac, ReparamSource::Identity);
    config.steps = 1;
    let spec = config.network().unwrap();
    let mut r = NetworkReparam::identity(&spec);
    *r.activation_maps.last_mut().unwrap() = AffineMap::scalar(6, 2.0, 0.5);
    let path = dir.path().join("r.json");
    std::fs::write(&path, serde_json::to_string(&r).unwrap()).unwrap();
    config.reparam = ReparamSource::File { path };
    assert_eq!(resolve_reparam(&config, &spec).unwrap(), r);
    assert_eq!(run_invariance(&config).unwrap().verdict, Verdict::Pass);
    config.metric = MetricChoice::GaussNewton;
    assert!(matches!(resolve_reparam(&config, &spec), Err(crate::Error::InvalidConfig(_))));
}

#[test]
fn compare_params_through_reparam_cases() {
    let config = mlp_config(Optimizer::Kfac, random(6));
    let spec = config.network().unwrap();
    let r = resolve_reparam(&config, &spec).unwrap();
    let w = initial_params(&spec, 1, 1.0);
    let w_t = transform_params(&spec, &w, &r).unwrap();
    assert!(compare_params_through_reparam(&spec, &w, &w_t, &r).unwrap() <= 1e-12);
    let unrelated = initial_params(&spec, 2, 1.0);
    assert!(compare_params_through_reparam(&spec, &w, &unrelated, &r).unwrap() > 0.0);
}

#[test]
fn initial_params_scale_only_weights() {
    let config = mlp_config(Optimizer::Kfac, ReparamSource::Identity);
    let spec = config.network().unwrap();
    let base = initial_params(&spec, 3, 1.0);
    let scaled = initial_params(&spec, 3, 2.5);
    for (a, b) in base.layers.iter().zip(&scaled.layers) {
        let last = a.weights.cols() - 1;
        for i in 0..a.weights.rows() {
            for j in 0..a.weights.cols() {
                let expected = if j == last { a.weights[(i, j)] } else { 2.5 * a.weights[(i, j)] };
                assert_eq!(b.weights[(i, j)], expected);
            }
        }
    }
}

#[test]
fn dataset_and_probes_are_seeded_and_disjoint() {
    let config = mlp_config(Optimizer::Kfac, ReparamSource::Identity);
    let spec = config.network().unwrap();
    let a = synthetic_dataset(&spec, &config.dataset, 9).unwrap();
    assert_eq!(a, synthetic_dataset(&spec, &config.dataset, 9).unwrap());
    assert_ne!(a, synthetic_dataset(&spec, &config.dataset, 10).unwrap());
    assert_eq!(a.len(), 64);
    let probes = probe_inputs(&spec, 32, InputDistribution::StandardNormal, 9);
    assert!(probes.iter().all(|p| a.iter().all(|s| &s.x != p)));
    let uniform = probe_inputs(&spec, 32, InputDistribution::Uniform, 9);
    assert!(uniform.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn config_validation() {
    let good = mlp_config(Optimizer::Kfac, random(0));
    let text = serde_json::to_string(&good).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), good);
    let mut bad = good.clone();
    bad.dataset.num_samples = 0;
    assert!(bad.validate().is_err());
    let mut bad = good.clone();
    bad.init_gain = -1.0;
    assert!(bad.validate().is_err());
    let mut bad = good.clone();
    bad.reparam = ReparamSource::Random { seed: 0, cap: 0.5 };
    assert!(bad.validate().is_err());
    let mut bad = good.clone();
    bad.probes = 0;
    assert!(bad.validate().is_err());
    let mut bad = good;
    bad.learning_rate = f64::NAN;
    assert!(bad.validate().is_err());
    assert!(ExperimentConfig::from_json("{").is_err());
}

#[test]
fn minimal_json_config_uses_defaults() {
    let text = r#"{
        "architecture": {"layers": [{"kind": "dense", "dims": [3, 2], "activation": "tanh"}]},
        "output_model": {"kind": "gaussian", "dim": 2, "variance": 1.0},
        "optimizer": "kfac",
        "steps": 2,
        "learning_rate": 0.1,
        "dataset": {"num_samples": 8}
    }"#;
    let config = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(config.metric, MetricChoice::Fisher);
    assert_eq!(config.reparam, ReparamSource::Identity);
    assert_eq!(config.probes, 32);
    assert_eq!(config.init_gain, 1.0);
    assert_eq!(config.damping_mode, DampingMode::None);
}

#[test]
fn training_with_zero_steps_is_one_row() {
    let mut config = mlp_config(Optimizer::Kfac, ReparamSource::Identity);
    config.steps = 0;
    let rows = run_training(&config).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, 0);
}

#[test]
fn sgd_decreases_a_least_squares_loss() {
    let rows = run_training(&linear_gaussian_config(Optimizer::Sgd, 0.05)).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[1].1 < w[0].1), "{rows:?}");
}

#[test]
fn kfac_solves_least_squares_in_one_step() {
    // With a gaussian output G is constant, so the Kronecker block is the
    // exact Hessian and a unit step is a Newton step.
    let mut config = linear_gaussian_config(Optimizer::Kfac, 1.0);
    config.steps = 3;
    let rows = run_training(&config).unwrap();

    // Oracle: normal equations W* (Σ ā āᵀ) = Σ y āᵀ.
    let spec = config.network().unwrap();
    let data = synthetic_dataset(&spec, &config.dataset, config.seed).unwrap();
    let mut aa = Matrix::zeros(5, 5);
    let mut ya = Matrix::zeros(3, 5);
    for s in &data {
        let mut abar = s.x.clone();
        abar.push(1.0);
        let Target::Value(y) = &s.y else { unreachable!() };
        aa.add_outer(&abar, &abar);
        ya.add_outer(y, &abar);
    }
    let w_star = solve(&aa, &ya.transpose()).unwrap().transpose();
    let mut optimum = ParamSet::zeros(&spec);
    optimum.layers[0].weights = w_star;
    let h_star = objective(&spec, &optimum, &data).unwrap();
    assert!(rows[0].1 - h_star > 1e-2);
    for (_, h) in &rows[1..] {
        assert!((h - h_star).abs() <= 1e-8, "{h} vs {h_star}");
    }
}

#[test]
fn training_csv_format() {
    let mut out = Vec::new();
    write_training_csv(&[(0, 1.5), (1, 0.25)], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,objective");
    assert_eq!(lines.len(), 3);
    let (step, value) = lines[2].split_once(',').unwrap();
    assert_eq!(step, "1");
    assert_eq!(value.parse::<f64>().unwrap(), 0.25);
}

#[test]
fn factor_dump_round_trips_exactly() {
    let mut config = mlp_config(Optimizer::Kfac, ReparamSource::Identity);
    config.architecture.layers = vec![
        LayerSpec::recurrent(3, 4, 3, ActivationKind::Tanh),
        LayerSpec::dense(4, 6, ActivationKind::Logistic),
    ];
    let metric = initial_factors(&config).unwrap();
    let json: serde_json::Value = serde_json::from_str(&factors_json(&metric)).unwrap();
    let entries = json.as_array().unwrap();
    assert_eq!(entries.len(), metric.factors.len());
    assert_eq!(entries[1]["block"], "input_weights");
    for (e, f) in entries.iter().zip(&metric.factors) {
        assert_eq!(e["layer_index"].as_u64().unwrap() as usize, f.layer_index);
        assert_eq!(e["scale"].as_f64().unwrap(), f.scale);
        for (key, m) in [("A", &f.a), ("G", &f.g)] {
            let rows = e[key].as_array().unwrap();
            assert_eq!(rows.len(), m.rows());
            for (r, row) in rows.iter().enumerate() {
                for (c, v) in row.as_array().unwrap().iter().enumerate() {
                    assert_eq!(v.as_f64().unwrap(), m[(r, c)]);
                }
            }
        }
    }
}
