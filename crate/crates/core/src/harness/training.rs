use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{initial_params, synthetic_dataset};
use crate::harness::invariance::optimizer_step;
use crate::kfac::{estimate_factors, BlockKind, KFacMetric};
use crate::linalg::Matrix;
use crate::metrics::objective;

/// `(step, h(w))` rows for `steps + 1` evaluations, starting at the
/// initial parameters.
pub fn run_training(config: &ExperimentConfig) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    let spec = config.network()?;
    let data = synthetic_dataset(&spec, &config.dataset, config.seed)?;
    let mut w = initial_params(&spec, config.seed, config.init_gain);
    let mut rows = vec![(0, objective(&spec, &w, &data)?)];
    for step in 1..=config.steps {
        w = optimizer_step(config, &spec, &w, &data)?;
        rows.push((step, objective(&spec, &w, &data)?));
    }
    Ok(rows)
}

pub fn write_training_csv(rows: &[(usize, f64)], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,objective")?;
    for (step, h) in rows {
        writeln!(out, "{step},{h:.17e}")?;
    }
    Ok(())
}

/// Factors at the initial parameters of the configured experiment.
pub fn initial_factors(config: &ExperimentConfig) -> Result<KFacMetric> {
    config.validate()?;
    let spec = config.network()?;
    let data = synthetic_dataset(&spec, &config.dataset, config.seed)?;
    estimate_factors(&spec, &initial_params(&spec, config.seed, config.init_gain), &data, config.output_metric())
}

fn write_matrix(out: &mut String, m: &Matrix) {
    out.push('[');
    for r in 0..m.rows() {
        if r > 0 {
            out.push_str(", ");
        }
        out.push('[');
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push_str(", ");
            }
            write!(out, "{v:.16e}").expect("writing to a string");
        }
        out.push(']');
    }
    out.push(']');
}

/// JSON array with one object per factor pair; every float carries 17
/// significant digits.
pub fn factors_json(metric: &KFacMetric) -> String {
    let mut out = String::from("[\n");
    for (i, f) in metric.factors.iter().enumerate() {
        let block = match f.block {
            BlockKind::Weights => "weights",
            BlockKind::InputWeights => "input_weights",
        };
        write!(
            out,
            "  {{\"layer_index\": {}, \"block\": \"{block}\", \"scale\": {:.16e}, \"A\": ",
            f.layer_index, f.scale
        )
        .expect("writing to a string");
        write_matrix(&mut out, &f.a);
        out.push_str(", \"G\": ");
        write_matrix(&mut out, &f.g);
        out.push('}');
        out.push_str(if i + 1 < metric.factors.len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n");
    out
}
