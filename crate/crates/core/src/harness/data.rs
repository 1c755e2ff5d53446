//! Seeded synthetic data. Every consumer draws from its own stream of one
//! ChaCha8 generator, so adding draws in one place never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::harness::config::{DatasetSpec, InputDistribution};
use crate::linalg::Matrix;
use crate::metrics::Sample;
use crate::nets::{evaluate, NetworkSpec, ParamSet};

/// Stream identifiers.
pub const INPUT_STREAM: u64 = 1;
pub const TEACHER_STREAM: u64 = 2;
pub const TARGET_STREAM: u64 = 3;
pub const PARAM_STREAM: u64 = 4;
pub const PROBE_STREAM: u64 = 5;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn draw_inputs(len: usize, count: usize, distribution: InputDistribution, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..len)
                .map(|_| match distribution {
                    InputDistribution::StandardNormal => rng.sample(StandardNormal),
                    InputDistribution::Uniform => rng.random_range(-1.0..=1.0),
                })
                .collect()
        })
        .collect()
}

/// Inputs from the configured distribution, targets drawn from the
/// predictive distribution of a random teacher with the same architecture.
pub fn synthetic_dataset(spec: &NetworkSpec, dataset: &DatasetSpec, seed: u64) -> Result<Vec<Sample>> {
    let inputs = draw_inputs(
        spec.input_len(),
        dataset.num_samples,
        dataset.distribution,
        &mut stream(seed, INPUT_STREAM),
    );
    let teacher = ParamSet::random(spec, &mut stream(seed, TEACHER_STREAM));
    let mut targets = stream(seed, TARGET_STREAM);
    inputs
        .into_iter()
        .map(|x| {
            let z = evaluate(spec, &teacher, &x)?;
            let y = spec.output_model.sample(&z, &mut targets);
            Ok(Sample { x, y })
        })
        .collect()
}

/// Starting parameters of the student, with every non-bias weight scaled
/// by `gain`.
pub fn initial_params(spec: &NetworkSpec, seed: u64, gain: f64) -> ParamSet {
    let mut params = ParamSet::random(spec, &mut stream(seed, PARAM_STREAM));
    for layer in &mut params.layers {
        let w = &mut layer.weights;
        let bias = w.cols() - 1;
        *w = Matrix::from_fn(w.rows(), w.cols(), |i, j| if j == bias { w[(i, j)] } else { gain * w[(i, j)] });
        if let Some(v) = &mut layer.input_weights {
            *v = v.scale(gain);
        }
    }
    params
}

/// Fresh inputs, disjoint from the training draw, for function comparisons.
pub fn probe_inputs(spec: &NetworkSpec, count: usize, distribution: InputDistribution, seed: u64) -> Vec<Vec<f64>> {
    draw_inputs(spec.input_len(), count, distribution, &mut stream(seed, PROBE_STREAM))
}
