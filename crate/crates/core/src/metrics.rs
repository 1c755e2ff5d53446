//! Output models, output-space metrics and their pullbacks to weight space.
//!
//! Every output metric used here can be written as a finite sum of outer
//! products `G(z) = Σ_k c_k c_kᵀ`. Pulling a metric back through the network
//! then takes one reverse pass per column `c_k`, which is how both the dense
//! oracles here and the Kronecker factors in [`crate::kfac`] are built.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nets::{backward, forward, jvp, NetworkSpec, ParamSet};
use crate::par;

/// Cap on the parameter count for dense `P x P` matrices.
pub const DENSE_PARAM_CAP: usize = 5000;

/// Predictive distribution `r(y | z)` on top of the network output `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputModel {
    /// Softmax over `num_classes` logits.
    Categorical { num_classes: usize },
    /// `N(z, variance · I)`.
    Gaussian { dim: usize, variance: f64 },
}

/// A target value for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(Vec<f64>),
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `diag(p) − p pᵀ`.
fn softmax_covariance(p: &[f64]) -> Matrix {
    Matrix::from_fn(p.len(), p.len(), |i, j| if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] })
}

/// Columns `√p_k (e_k − p)`, whose outer products sum to `diag(p) − p pᵀ`.
fn softmax_covariance_factor(p: &[f64]) -> Vec<Vec<f64>> {
    (0..p.len())
        .map(|k| {
            let s = p[k].sqrt();
            (0..p.len())
                .map(|j| s * (if j == k { 1.0 } else { 0.0 } - p[j]))
                .collect()
        })
        .collect()
}

fn unit_columns(n: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| (0..n).map(|j| if j == k { scale } else { 0.0 }).collect())
        .collect()
}

impl OutputModel {
    pub fn dim(&self) -> usize {
        match self {
            OutputModel::Categorical { num_classes } => *num_classes,
            OutputModel::Gaussian { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OutputModel::Categorical { num_classes } if *num_classes < 2 => {
                Err(Error::InvalidConfig("categorical output needs at least two classes".into()))
            }
            OutputModel::Gaussian { variance, .. } if !(*variance > 0.0 && variance.is_finite()) => {
                Err(Error::InvalidConfig(format!("gaussian variance {variance} must be positive")))
            }
            _ => Ok(()),
        }
    }

    fn check_target(&self, y: &Target) -> Result<()> {
        match (self, y) {
            (OutputModel::Categorical { num_classes }, Target::Class(k)) if k < num_classes => Ok(()),
            (OutputModel::Gaussian { dim, .. }, Target::Value(v)) if v.len() == *dim => Ok(()),
            _ => shape_err(format!("target {y:?} does not fit the output model")),
        }
    }

    /// Negative log-likelihood `L(y, z) = −log r(y | z)`.
    pub fn loss(&self, y: &Target, z: &[f64]) -> Result<f64> {
        self.check_target(y)?;
        Ok(match (self, y) {
            (OutputModel::Categorical { .. }, Target::Class(k)) => log_sum_exp(z) - z[*k],

            (OutputModel::Gaussian { variance, .. }, Target::Value(v)) => {
                let sq: f64 = z.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                0.5 * sq / variance + 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI * variance).ln()
            }
            _ => unreachable!(),
        })
    }

    /// `∂L/∂z`.
    pub fn loss_gradient(&self, y: &Target, z: &[f64]) -> Result<Vec<f64>> {
        self.check_target(y)?;
        Ok(match (self, y) {
            (OutputModel::Categorical { .. }, Target::Class(k)) => {
                let mut g = softmax(z);
                g[*k] -= 1.0;
                g
            }
            (OutputModel::Gaussian { variance, .. }, Target::Value(v)) => {
                z.iter().zip(v).map(|(a, b)| (a - b) / variance).collect()
            }
            _ => unreachable!(),
        })
    }

    /// Closed-form `E_y[(∂L/∂z)(∂L/∂z)ᵀ]`.
    pub fn output_fisher(&self, z: &[f64]) -> Matrix {
        match self {
            OutputModel::Categorical { .. } => softmax_covariance(&softmax(z)),
            OutputModel::Gaussian { dim, variance } => Matrix::identity(*dim).scale(1.0 / variance),
        }
    }

    /// Columns `c_k` with `Σ_k c_k c_kᵀ = output_fisher(z)`.
    pub fn fisher_factor(&self, z: &[f64]) -> Vec<Vec<f64>> {
        match self {
            OutputModel::Categorical { .. } => softmax_covariance_factor(&softmax(z)),
            OutputModel::Gaussian { dim, variance } => unit_columns(*dim, 1.0 / variance.sqrt()),
        }
    }

    pub fn sample(&self, z: &[f64], rng: &mut impl Rng) -> Target {
        match self {
            OutputModel::Categorical { .. } => {
                let p = softmax(z);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        return Target::Class(k);
                    }
                }
                Target::Class(p.len() - 1)
            }
            OutputModel::Gaussian { variance, .. } => {
                let s = variance.sqrt();
                Target::Value(z.iter().map(|m| m + s * rng.sample::<f64, _>(StandardNormal)).collect())
            }
        }
    }

    /// `KL(r(·|z1) ‖ r(·|z2))` in closed form.
    pub fn kl(&self, z1: &[f64], z2: &[f64]) -> f64 {
        match self {
            OutputModel::Categorical { .. } => {
                let (l1, l2) = (log_sum_exp(z1), log_sum_exp(z2));
                z1.iter()
                    .zip(z2)
                    .map(|(a, b)| {
                        let lp1 = a - l1;
                        lp1.exp() * (lp1 - (b - l2))
                    })
                    .sum()
            }
            OutputModel::Gaussian { variance, .. } => {
                0.5 * z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / variance
            }
        }
    }
}

/// Convex generators for Bregman divergences on the output space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BregmanGenerator {
    /// `F(y) = ½‖y‖²`.
    HalfSquaredNorm,
    /// `F(y) = log Σ exp(y_k)`.
    LogSumExp,
}

impl BregmanGenerator {
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            BregmanGenerator::HalfSquaredNorm => 0.5 * dot(y, y),
            BregmanGenerator::LogSumExp => log_sum_exp(y),
        }
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        match self {
            BregmanGenerator::HalfSquaredNorm => y.to_vec(),
            BregmanGenerator::LogSumExp => softmax(y),
        }
    }

    pub fn hessian(&self, y: &[f64]) -> Matrix {
        match self {
            BregmanGenerator::HalfSquaredNorm => Matrix::identity(y.len()),
            BregmanGenerator::LogSumExp => softmax_covariance(&softmax(y)),
        }
    }

    /// Columns whose outer products sum to the Hessian.
    pub fn hessian_factor(&self, y: &[f64]) -> Vec<Vec<f64>> {
        match self {
            BregmanGenerator::HalfSquaredNorm => unit_columns(y.len(), 1.0),
            BregmanGenerator::LogSumExp => softmax_covariance_factor(&softmax(y)),
        }
    }

    /// `D_F(y1, y2) = F(y1) − F(y2) − ⟨∇F(y2), y1 − y2⟩`.
    pub fn divergence(&self, y1: &[f64], y2: &[f64]) -> f64 {
        let diff: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| a - b).collect();
        self.value(y1) - self.value(y2) - dot(&self.gradient(y2), &diff)
    }
}

/// Metric on the output space whose pullback defines the curvature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMetric {
    /// Fisher metric of the output model.
    Fisher,
    /// Identity; the pullback is the Gauss-Newton matrix.
    Euclidean,
    /// Hessian of a Bregman generator; the pullback is a generalized
    /// Gauss-Newton matrix.
    Bregman(BregmanGenerator),
}

impl OutputMetric {
    pub fn matrix(&self, model: &OutputModel, z: &[f64]) -> Matrix {
        match self {
            OutputMetric::Fisher => model.output_fisher(z),
            OutputMetric::Euclidean => Matrix::identity(z.len()),
            OutputMetric::Bregman(g) => g.hessian(z),
        }
    }

    /// Columns `c_k` with `Σ_k c_k c_kᵀ = matrix(model, z)`.
    pub fn factor(&self, model: &OutputModel, z: &[f64]) -> Vec<Vec<f64>> {
        match self {
            OutputMetric::Fisher => model.fisher_factor(z),
            OutputMetric::Euclidean => unit_columns(z.len(), 1.0),
            OutputMetric::Bregman(g) => g.hessian_factor(z),
        }
    }
}

/// A random covector `φ` with `E[φ φᵀ] = G(z)`: the factor columns mixed by
/// independent standard normal weights.
pub fn sample_output_covector(metric: OutputMetric, model: &OutputModel, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut phi = vec![0.0; z.len()];
    for c in metric.factor(model, z) {
        let xi: f64 = rng.sample(StandardNormal);
        for (p, v) in phi.iter_mut().zip(&c) {
            *p += xi * v;
        }
    }
    phi
}

/// How a [`DenseFisher`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FisherConstruction {
    ExactPullback,
    MonteCarlo { num_samples: usize },
}

/// A dense `P x P` curvature matrix over the flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFisher {
    pub matrix: Matrix,
    pub construction: FisherConstruction,
}

impl DenseFisher {
    /// Shape header (`rows`, `cols` as little-endian u64) followed by the
    /// entries row-major as little-endian f64.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.matrix.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.matrix.cols() as u64).to_le_bytes())?;
        for v in self.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Matrix> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Matrix::new(rows, cols, data)
    }
}

fn check_dense_size(params: &ParamSet) -> Result<usize> {
    let p = params.num_params();
    if p > DENSE_PARAM_CAP {
        return Err(Error::TooLarge {
            size: p,
            cap: DENSE_PARAM_CAP,
        });
    }
    Ok(p)
}

fn check_nonempty(data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    Ok(())
}

/// `Σ_k (Jᵀ c_k)` for the metric factor columns at one input.
fn pulled_back_columns(spec: &NetworkSpec, params: &ParamSet, x: &[f64], metric: OutputMetric) -> Result<Vec<Vec<f64>>> {
    let trace = forward(spec, params, x)?;
    metric
        .factor(&spec.output_model, &trace.readout)
        .iter()
        .map(|c| Ok(backward(spec, params, &trace, c)?.flat_grad()))
        .collect()
}

fn gram(p: usize, columns: impl IntoIterator<Item = Vec<f64>>, divisor: f64) -> Matrix {
    let mut m = Matrix::zeros(p, p);
    for g in columns {
        m.add_outer(&g, &g);
    }
    Matrix::from_fn(p, p, |i, j| m[(i, j)] / divisor)
}

/// `J_Ψᵀ G(f(x, w)) J_Ψ` at one input.
pub fn pullback_metric(spec: &NetworkSpec, params: &ParamSet, x: &[f64], metric: OutputMetric) -> Result<Matrix> {
    let p = check_dense_size(params)?;
    Ok(gram(p, pulled_back_columns(spec, params, x, metric)?, 1.0))
}

/// Dataset average of the pullback metric.
pub fn exact_pullback(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], metric: OutputMetric) -> Result<DenseFisher> {
    check_nonempty(data)?;
    let p = check_dense_size(params)?;
    let per_sample = par::try_map(data, |s| pulled_back_columns(spec, params, &s.x, metric))?;
    Ok(DenseFisher {
        matrix: gram(p, per_sample.into_iter().flatten(), data.len() as f64),
        construction: FisherConstruction::ExactPullback,
    })
}

/// `F = (1/N) Σ_x J_Ψᵀ F_out J_Ψ` with the expectation over targets taken in
/// closed form.
pub fn exact_fisher(spec: &NetworkSpec, params: &ParamSet, data: &[Sample]) -> Result<DenseFisher> {
    exact_pullback(spec, params, data, OutputMetric::Fisher)
}

/// Monte Carlo Fisher: averages `Dw Dwᵀ` over `num_samples` targets drawn
/// from the model per input. Input `i` draws from stream `i` of the seeded
/// generator, so the result does not depend on scheduling.
pub fn mc_fisher(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], num_samples: usize, seed: u64) -> Result<DenseFisher> {
    check_nonempty(data)?;
    if num_samples == 0 {
        return Err(Error::InvalidConfig("Monte Carlo Fisher needs at least one sample".into()));
    }
    let p = check_dense_size(params)?;
    let model = &spec.output_model;
    let per_input = par::try_map_range(data.len(), |i| -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let trace = forward(spec, params, &data[i].x)?;
        let mut m = Matrix::zeros(p, p);
        for _ in 0..num_samples {
            let y = model.sample(&trace.readout, &mut rng);
            let g = backward(spec, params, &trace, &model.loss_gradient(&y, &trace.readout)?)?.flat_grad();
            m.add_outer(&g, &g);
        }
        Ok(m)
    })?;
    let mut total = Matrix::zeros(p, p);
    for m in &per_input {
        total.add_assign(m);
    }
    let n = (data.len() * num_samples) as f64;
    Ok(DenseFisher {
        matrix: Matrix::from_fn(p, p, |i, j| total[(i, j)] / n),
        construction: FisherConstruction::MonteCarlo { num_samples },
    })
}

/// Empirical risk `h(w) = (1/N) Σ L(y, f(x, w))`.
pub fn objective(spec: &NetworkSpec, params: &ParamSet, data: &[Sample]) -> Result<f64> {
    check_nonempty(data)?;
    let losses = par::try_map(data, |s| {
        let out = forward(spec, params, &s.x)?;
        spec.output_model.loss(&s.y, &out.readout)
    })?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// `h(w)` and `∇h(w)`.
pub fn objective_and_gradient(spec: &NetworkSpec, params: &ParamSet, data: &[Sample]) -> Result<(f64, ParamSet)> {
    check_nonempty(data)?;
    let model = &spec.output_model;
    let per_sample = par::try_map(data, |s| -> Result<(f64, ParamSet)> {
        let trace = forward(spec, params, &s.x)?;
        let loss = model.loss(&s.y, &trace.readout)?;
        let g = backward(spec, params, &trace, &model.loss_gradient(&s.y, &trace.readout)?)?;
        Ok((loss, g.grads))
    })?;
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = ParamSet::zeros(spec);
    for (l, g) in &per_sample {
        loss += l;
        for (acc, b) in grad.blocks_mut().into_iter().zip(g.blocks()) {
            acc.add_assign(b);
        }
    }
    for b in grad.blocks_mut() {
        *b = Matrix::from_fn(b.rows(), b.cols(), |i, j| b[(i, j)] / n);
    }
    Ok((loss / n, grad))
}

/// Second-order check of the KL divergence: returns the dataset-averaged
/// `KL(P_w ‖ P_{w+δ})` and `½ δᵀ F δ`, the latter evaluated as
/// `½ (Jδ)ᵀ F_out (Jδ)` without forming `F`.
pub fn kl_quadratic_check(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], delta: &ParamSet) -> Result<(f64, f64)> {
    check_nonempty(data)?;
    delta.check_matches(spec)?;
    let moved = params.add(delta);
    let model = &spec.output_model;
    let terms = par::try_map(data, |s| -> Result<(f64, f64)> {
        let trace = forward(spec, params, &s.x)?;
        let z2 = forward(spec, &moved, &s.x)?.readout;
        let kl = model.kl(&trace.readout, &z2);
        let jd = jvp(spec, params, &trace, delta)?;
        let quad = 0.5 * dot(&jd, &model.output_fisher(&trace.readout).matvec(&jd));
        Ok((kl, quad))
    })?;
    let n = data.len() as f64;
    let (lhs, rhs) = terms.iter().fold((0.0, 0.0), |(a, b), (k, q)| (a + k, b + q));
    Ok((lhs / n, rhs / n))
}
