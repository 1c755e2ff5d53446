use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, MetricChoice, Optimizer, ReparamSource};
use crate::harness::data::{initial_params, probe_inputs, synthetic_dataset};
use crate::kfac::{kfac_step, ngd_step, sgd_step};
use crate::linalg::max_abs_diff;
use crate::metrics::{objective, Sample};
use crate::nets::{evaluate, NetworkSpec, ParamSet};
use crate::reparam::{restore_params, transform_input, transform_network, NetworkReparam, RandomReparamOptions};

/// Default threshold for the untrained comparison.
pub const STEP0_TOLERANCE: f64 = 1e-10;
pub const KFAC_TOLERANCE: f64 = 1e-8;
pub const NGD_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Max over probe inputs of `‖f(x) − f‡(x‡)‖_∞`, both read through the
    /// output model's coordinates.
    pub forward_discrepancy: f64,
    pub objective: f64,
    pub objective_transformed: f64,
    /// `max |w − restore(w‡)| / max(1, max |w|)`: the update moves weights
    /// far from unit scale, so the parameter check is relative.
    pub parameter_discrepancy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Damped runs are recorded but never judged.
    ReportOnly,
    /// The run hit a singular factor or metric.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub step0: f64,
    pub update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub records: Vec<StepRecord>,
    pub verdict: Verdict,
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub config: ExperimentConfig,
}

impl InvarianceReport {
    pub fn max_forward_discrepancy(&self) -> f64 {
        self.records.iter().map(|r| r.forward_discrepancy).fold(0.0, f64::max)
    }

    pub fn max_parameter_discrepancy(&self) -> f64 {
        self.records.iter().map(|r| r.parameter_discrepancy).fold(0.0, f64::max)
    }
}

pub fn tolerances_for(config: &ExperimentConfig) -> Tolerances {
    let update = match config.optimizer {
        Optimizer::Ngd => NGD_TOLERANCE,
        Optimizer::Kfac | Optimizer::Sgd => KFAC_TOLERANCE,
    };
    Tolerances {
        step0: config.tolerances.step0.unwrap_or(STEP0_TOLERANCE),
        update: config.tolerances.update.unwrap_or(update),
    }
}

/// Resolves the configured reparameterization. Metrics other than the
/// Fisher are only invariant when the output space keeps its basis, so
/// random draws leave it fixed and explicit maps must not move it.
pub fn resolve_reparam(config: &ExperimentConfig, spec: &NetworkSpec) -> Result<NetworkReparam> {
    let fix_output = config.metric != MetricChoice::Fisher;
    let r = match &config.reparam {
        ReparamSource::Identity => NetworkReparam::identity(spec),
        ReparamSource::Random { seed, cap } => NetworkReparam::random(
            spec,
            *seed,
            *cap,
            RandomReparamOptions {
                fix_output,
                fix_input: false,
            },
        )?,
        ReparamSource::File { path } => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        ReparamSource::Preset { name } => match name.as_str() {
            "logistic-to-tanh" => NetworkReparam::logistic_to_tanh(spec),
            "identity" => NetworkReparam::identity(spec),
            other => return Err(Error::InvalidConfig(format!("unknown reparam preset {other:?}"))),
        },
    };
    r.check(spec)?;
    if fix_output && !r.activation_maps.last().expect("at least one layer").is_identity() {
        return Err(Error::InvalidConfig(
            "the output space must keep its basis unless the metric is the Fisher".into(),
        ));
    }
    Ok(r)
}

/// One optimizer step as configured.
pub fn optimizer_step(config: &ExperimentConfig, spec: &NetworkSpec, params: &ParamSet, data: &[Sample]) -> Result<ParamSet> {
    let update = config.update_config();
    match config.optimizer {
        Optimizer::Kfac => kfac_step(spec, params, data, config.output_metric(), &update),
        Optimizer::Ngd => ngd_step(spec, params, data, config.output_metric(), &update),
        Optimizer::Sgd => sgd_step(spec, params, data, &update),
    }
}

/// `max |w − restore(w‡)|`: maps the transformed parameters back through the
/// inverse transform and compares with the originals.
pub fn compare_params_through_reparam(
    spec: &NetworkSpec,
    w: &ParamSet,
    w_transformed: &ParamSet,
    r: &NetworkReparam,
) -> Result<f64> {
    Ok(restore_params(spec, w_transformed, r)?.max_abs_diff(w))
}

struct Sides {
    spec: NetworkSpec,
    spec_t: NetworkSpec,
    r: NetworkReparam,
    data: Vec<Sample>,
    data_t: Vec<Sample>,
    probes: Vec<Vec<f64>>,
    probes_t: Vec<Vec<f64>>,
}

impl Sides {
    fn record(&self, step: usize, w: &ParamSet, w_t: &ParamSet) -> Result<StepRecord> {
        let mut forward_discrepancy: f64 = 0.0;
        for (x, x_t) in self.probes.iter().zip(&self.probes_t) {
            let y = evaluate(&self.spec, w, x)?;
            let y_t = evaluate(&self.spec_t, w_t, x_t)?;
            forward_discrepancy = forward_discrepancy.max(max_abs_diff(&y, &y_t));
        }
        Ok(StepRecord {
            step,
            forward_discrepancy,
            objective: objective(&self.spec, w, &self.data)?,
            objective_transformed: objective(&self.spec_t, w_t, &self.data_t)?,
            parameter_discrepancy: compare_params_through_reparam(&self.spec, w, w_t, &self.r)?
                / w.max_abs().max(1.0),
        })
    }
}

fn judge(config: &ExperimentConfig, tolerances: Tolerances, records: &[StepRecord]) -> Verdict {
    if config.update_config().effective_damping() > 0.0 {
        return Verdict::ReportOnly;
    }
    let ok = records.iter().all(|r| {
        let tol = if r.step == 0 { tolerances.step0 } else { tolerances.update };
        r.forward_discrepancy <= tol && r.parameter_discrepancy <= tol
    });
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Trains the network and its transform side by side with the configured
/// optimizer and records how far apart they drift. Singular factors or
/// metrics end the run with a [`Verdict::Degenerate`] report; configuration
/// problems are returned as errors.
pub fn run_invariance(config: &ExperimentConfig) -> Result<InvarianceReport> {
    config.validate()?;
    let spec = config.network()?;
    let r = resolve_reparam(config, &spec)?;
    let w0 = initial_params(&spec, config.seed, config.init_gain);
    let (spec_t, w0_t) = transform_network(&spec, &w0, &r)?;
    let data = synthetic_dataset(&spec, &config.dataset, config.seed)?;
    let data_t = data
        .iter()
        .map(|s| {
            Ok(Sample {
                x: transform_input(&spec, &r, &s.x)?,
                y: s.y.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let probes = probe_inputs(&spec, config.probes, config.dataset.distribution, config.seed);
    let probes_t = probes.iter().map(|x| transform_input(&spec, &r, x)).collect::<Result<Vec<_>>>()?;
    let sides = Sides {
        spec,
        spec_t,
        r,
        data,
        data_t,
        probes,
        probes_t,
    };
    let tolerances = tolerances_for(config);
    let mut records = vec![sides.record(0, &w0, &w0_t)?];
    let (mut w, mut w_t) = (w0, w0_t);
    let mut diagnostic = None;
    for step in 1..=config.steps {
        let next = optimizer_step(config, &sides.spec, &w, &sides.data)
            .and_then(|n| Ok((n, optimizer_step(config, &sides.spec_t, &w_t, &sides.data_t)?)));
        match next {
            Ok((n, n_t)) => {
                w = n;
                w_t = n_t;
                records.push(sides.record(step, &w, &w_t)?);
            }
            Err(e) if e.is_degenerate() => {
                diagnostic = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let verdict = if diagnostic.is_some() {
        Verdict::Degenerate
    } else {
        judge(config, tolerances, &records)
    };
    Ok(InvarianceReport {
        records,
        verdict,
        tolerances,
        diagnostic,
        config: config.clone(),
    })
}

/// [`run_invariance`] with exact natural gradient steps.
pub fn run_ngd_invariance(config: &ExperimentConfig) -> Result<InvarianceReport> {
    let mut c = config.clone();
    c.optimizer = Optimizer::Ngd;
    run_invariance(&c)
}
