//! Fixtures shared by the unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::metrics::{OutputModel, Sample, Target};
use crate::nets::{evaluate, ActivationKind, LayerSpec, NetworkSpec, ParamSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn mlp(dims: &[usize], act: ActivationKind, model: OutputModel) -> NetworkSpec {
    let layers = dims
        .windows(2)
        .map(|w| LayerSpec::dense(w[0], w[1], act.clone()))
        .collect();
    NetworkSpec::new(layers, model).unwrap()
}

/// Two convolutions on a small grid followed by a dense head.
pub fn conv_net(act: ActivationKind, classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::conv2d(2, 3, 1, 3, 4, act.clone()),
            LayerSpec::conv2d(3, 2, 1, 3, 4, act.clone()),
            LayerSpec::dense(24, classes, act),
        ],
        OutputModel::Categorical { num_classes: classes },
    )
    .unwrap()
}

/// A recurrent cell followed by a dense head.
pub fn rnn_net(act: ActivationKind, steps: usize, classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::recurrent(3, 4, steps, act.clone()),
            LayerSpec::dense(4, classes, act),
        ],
        OutputModel::Categorical { num_classes: classes },
    )
    .unwrap()
}

pub fn params(spec: &NetworkSpec, seed: u64) -> ParamSet {
    ParamSet::random(spec, &mut rng(seed))
}

/// Gaussian inputs with targets drawn from the network itself.
pub fn samples(spec: &NetworkSpec, params: &ParamSet, n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x = gaussian_vec(spec.input_len(), &mut r);
            let z = evaluate(spec, params, &x).unwrap();
            let y = spec.output_model.sample(&z, &mut r);
            Sample { x, y }
        })
        .collect()
}

pub fn dummy_target(model: &OutputModel) -> Target {
    match model {
        OutputModel::Categorical { .. } => Target::Class(0),
        OutputModel::Gaussian { dim, .. } => Target::Value(vec![0.0; *dim]),
    }
}

/// Central differences of a scalar function of the flat parameters.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    let mut probe = w.to_vec();
    (0..w.len())
        .map(|i| {
            probe[i] = w[i] + h;
            let plus = f(&probe);
            probe[i] = w[i] - h;
            let minus = f(&probe);
            probe[i] = w[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn rel_frobenius(a: &crate::Matrix, b: &crate::Matrix) -> f64 {
    a.sub(b).frobenius() / b.frobenius().max(f64::MIN_POSITIVE)
}
