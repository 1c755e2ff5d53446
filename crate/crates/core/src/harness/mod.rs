//! Experiment runner: synthetic data, side-by-side training of a network and
//! its reparameterization, training curves and factor dumps.

mod config;
mod data;
mod invariance;
mod training;

pub use config::{
    Architecture, DatasetSpec, ExperimentConfig, InputDistribution, MetricChoice, Optimizer, ReparamSource,
    ToleranceOverrides,
};
pub use data::{draw_inputs, initial_params, probe_inputs, stream, synthetic_dataset};
pub use invariance::{
    compare_params_through_reparam, optimizer_step, resolve_reparam, run_invariance, run_ngd_invariance,
    tolerances_for, InvarianceReport, StepRecord, Tolerances, Verdict, KFAC_TOLERANCE, NGD_TOLERANCE,
    STEP0_TOLERANCE,
};
pub use training::{factors_json, initial_factors, run_training, write_training_csv};

#[cfg(test)]
mod tests;
