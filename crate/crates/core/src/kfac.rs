//! Kronecker-factored curvature: per-block factors `scale · (A ⊗ G)`, their
//! block-diagonal assembly, inverse application and the update rules.
//!
//! `A` is the second moment of the homogeneous layer inputs and `G` the
//! second moment of the pre-activation cotangents under the chosen output
//! metric, with the expectation over targets taken exactly through the
//! metric's factor columns. Convolution and recurrent layers average both
//! moments over locations or steps and carry the count as `scale`.
//!
//! A recurrent cell contributes two blocks: the homogeneous recurrent
//! weights `[W b]` with inputs `ā_{t−1}`, and the input matrix `V` with
//! inputs `x_t`. Both share the same `Dz_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, solve, solve_vec, sym_eig_min, unvec, vec, Matrix};
use crate::metrics::{exact_pullback, objective_and_gradient, OutputMetric, Sample, DENSE_PARAM_CAP};
use crate::nets::{backward, forward, LayerKind, NetworkSpec, ParamSet};
use crate::par;

/// Which parameter matrix of a layer a factor pair covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// The homogeneous weights `W̄ = [W b]`.
    Weights,
    /// The input matrix `V` of a recurrent cell.
    InputWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerFactor {
    pub layer_index: usize,
    pub block: BlockKind,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "G")]
    pub g: Matrix,
    pub scale: f64,
}

impl KroneckerFactor {
    pub fn dim(&self) -> usize {
        self.a.rows() * self.g.rows()
    }

    /// `scale · (A ⊗ G)`.
    pub fn dense(&self) -> Matrix {
        kron(&self.a, &self.g).scale(self.scale)
    }
}

/// Factor pairs in parameter flatten order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFacMetric {
    pub factors: Vec<KroneckerFactor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingMode {
    /// Ignore `damping`.
    #[default]
    None,
    /// Solve `(scale · A ⊗ G + λI) vec(X) = vec(∇)` densely per block.
    DenseTikhonov,
    /// Replace the factors by `A + √λ I` and `G + √λ I`.
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub damping_mode: DampingMode,
}

impl UpdateConfig {
    pub fn undamped(learning_rate: f64) -> Self {
        UpdateConfig {
            learning_rate,
            damping: 0.0,
            damping_mode: DampingMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidConfig(format!("damping {} must be finite and non-negative", self.damping)));
        }
        Ok(())
    }

    /// Damping actually applied.
    pub fn effective_damping(&self) -> f64 {
        match self.damping_mode {
            DampingMode::None => 0.0,
            _ => self.damping,
        }
    }
}

/// `(Σ v vᵀ) / divisor`.
fn second_moment<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a Vec<f64>>, divisor: usize) -> Matrix {
    let mut m = Matrix::zeros(dim, dim);
    for v in vectors {
        m.add_outer(v, v);
    }
    let d = divisor as f64;
    Matrix::from_fn(dim, dim, |i, j| m[(i, j)] / d)
}

/// Per-sample factor contributions, one `(A, G)` pair per block.
fn sample_factors(spec: &NetworkSpec, params: &ParamSet, x: &[f64], metric: OutputMetric) -> Result<Vec<(Matrix, Matrix)>> {
    let trace = forward(spec, params, x)?;
    let columns = metric.factor(&spec.output_model, &trace.readout);
    let dz: Vec<Vec<Vec<Vec<f64>>>> = columns
        .iter()
        .map(|c| Ok(backward(spec, params, &trace, c)?.dz))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let lt = &trace.layers[i];
        let positions = lt.positions();
        let out_dim = layer.output_channels();
        let g = second_moment(out_dim, dz.iter().flat_map(|per_col| per_col[i].iter()), positions);
        let a = second_moment(lt.inputs[0].len(), lt.inputs.iter(), positions);
        out.push((a, g.clone()));
        if let Some(xs) = &lt.step_inputs {
            out.push((second_moment(xs[0].len(), xs.iter(), positions), g));
        }
    }
    Ok(out)
}

fn block_layout(spec: &NetworkSpec) -> Vec<(usize, BlockKind, f64)> {
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let scale = match &layer.kind {
            LayerKind::Dense { .. } => 1.0,
            LayerKind::Conv2d { grid, .. } => grid.locations() as f64,
            LayerKind::Recurrent { steps, .. } => *steps as f64,
        };
        out.push((i, BlockKind::Weights, scale));
        if matches!(layer.kind, LayerKind::Recurrent { .. }) {
            out.push((i, BlockKind::InputWeights, scale));
        }
    }
    out
}

/// Factors for any supported mix of layers; each layer uses the estimator
/// for its kind and the blocks are listed in layer order.
pub fn estimate_factors(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], metric: OutputMetric) -> Result<KFacMetric> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    params.check_matches(spec)?;
    let per_sample = par::try_map(data, |s| sample_factors(spec, params, &s.x, metric))?;
    let layout = block_layout(spec);
    let n = data.len() as f64;
    let factors = layout
        .into_iter()
        .enumerate()
        .map(|(b, (layer_index, block, scale))| {
            let (a0, g0) = &per_sample[0][b];
            let mut a = Matrix::zeros(a0.rows(), a0.cols());
            let mut g = Matrix::zeros(g0.rows(), g0.cols());
            for s in &per_sample {
                a.add_assign(&s[b].0);
                g.add_assign(&s[b].1);
            }
            KroneckerFactor {
                layer_index,
                block,
                a: Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] / n),
                g: Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] / n),
                scale,
            }
        })
        .collect();
    Ok(KFacMetric { factors })
}

fn require_only(spec: &NetworkSpec, allowed: &[&str], required: &str) -> Result<()> {
    for (index, layer) in spec.layers.iter().enumerate() {
        if !allowed.contains(&layer.kind_name()) {
            return Err(Error::UnsupportedLayer {
                index,
                reason: format!("{} layer given to the {required} estimator", layer.kind_name()),
            });
        }
    }
    if !spec.layers.iter().any(|l| l.kind_name() == required) {
        return Err(Error::UnsupportedLayer {
            index: 0,
            reason: format!("network has no {required} layer"),
        });
    }
    Ok(())
}

/// Dense-only networks.
pub fn estimate_factors_dense(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], metric: OutputMetric) -> Result<KFacMetric> {
    require_only(spec, &["dense"], "dense")?;
    estimate_factors(spec, params, data, metric)
}

/// Convolution stacks, optionally followed by dense layers.
pub fn estimate_factors_conv(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], metric: OutputMetric) -> Result<KFacMetric> {
    require_only(spec, &["conv2d", "dense"], "conv2d")?;
    estimate_factors(spec, params, data, metric)
}

/// A recurrent cell, optionally followed by dense layers.
pub fn estimate_factors_rnn(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], metric: OutputMetric) -> Result<KFacMetric> {
    require_only(spec, &["recurrent", "dense"], "recurrent")?;
    estimate_factors(spec, params, data, metric)
}

/// Block-diagonal dense form of the metric.
pub fn assemble_dense(metric: &KFacMetric) -> Result<Matrix> {
    let total: usize = metric.factors.iter().map(KroneckerFactor::dim).sum();
    if total > DENSE_PARAM_CAP {
        return Err(Error::TooLarge {
            size: total,
            cap: DENSE_PARAM_CAP,
        });
    }
    let mut out = Matrix::zeros(total, total);
    let mut offset = 0;
    for f in &metric.factors {
        out.set_block(offset, offset, &f.dense());
        offset += f.dim();
    }
    Ok(out)
}

fn factor_solve(m: &Matrix, rhs: &Matrix, block: usize, factor: &'static str) -> Result<Matrix> {
    solve(m, rhs).map_err(|e| match e {
        Error::SingularMatrix { .. } => Error::SingularFactor { block, factor },
        other => other,
    })
}

/// `(1/scale) G⁻¹ X A⁻¹`.
fn kronecker_solve(a: &Matrix, g: &Matrix, scale: f64, x: &Matrix, block: usize) -> Result<Matrix> {
    let left = factor_solve(g, x, block, "G")?;
    // A is symmetric, so X A⁻¹ = (A⁻¹ Xᵀ)ᵀ.
    let both = factor_solve(a, &left.transpose(), block, "A")?.transpose();
    Ok(both.scale(1.0 / scale))
}

/// `F̂⁻¹ ∇`, block by block.
pub fn apply_inverse(metric: &KFacMetric, grad: &ParamSet, config: &UpdateConfig) -> Result<ParamSet> {
    config.validate()?;
    let blocks = grad.blocks();
    if blocks.len() != metric.factors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient blocks for {} factor pairs",
            blocks.len(),
            metric.factors.len()
        )));
    }
    let lambda = config.effective_damping();
    let mut out = grad.clone();
    for (b, ((f, x), dst)) in metric.factors.iter().zip(blocks).zip(out.blocks_mut()).enumerate() {
        if x.shape() != (f.g.rows(), f.a.rows()) {
            return Err(Error::ShapeMismatch(format!(
                "block {b}: gradient {:?} against factors {}x{}",
                x.shape(),
                f.g.rows(),
                f.a.rows()
            )));
        }
        *dst = if lambda == 0.0 {
            kronecker_solve(&f.a, &f.g, f.scale, x, b)?
        } else {
            match config.damping_mode {
                DampingMode::DenseTikhonov => {
                    let damped = f.dense().add_diag(lambda);
                    unvec(&solve_vec(&damped, &vec(x))?, x.rows(), x.cols())?
                }
                DampingMode::Factored => {
                    let s = lambda.sqrt();
                    kronecker_solve(&f.a.add_diag(s), &f.g.add_diag(s), f.scale, x, b)?
                }
                DampingMode::None => unreachable!("no damping in this mode"),
            }
        };
    }
    Ok(out)
}

/// `w − ε F̂⁻¹ ∇h(w)` with freshly estimated factors.
pub fn kfac_step(
    spec: &NetworkSpec,
    params: &ParamSet,
    data: &[Sample],
    metric: OutputMetric,
    config: &UpdateConfig,
) -> Result<ParamSet> {
    config.validate()?;
    let factors = estimate_factors(spec, params, data, metric)?;
    let (_, grad) = objective_and_gradient(spec, params, data)?;
    let direction = apply_inverse(&factors, &grad, config)?;
    Ok(params.step(config.learning_rate, &direction))
}

/// Relative eigenvalue floor below which the exact metric counts as singular.
pub const SINGULAR_FISHER_THRESHOLD: f64 = 1e-12;

/// `w − ε (F + λI)⁻¹ ∇h(w)` with the dense pullback metric. Any damping mode
/// other than `none` adds `λI`.
pub fn ngd_step(
    spec: &NetworkSpec,
    params: &ParamSet,
    data: &[Sample],
    metric: OutputMetric,
    config: &UpdateConfig,
) -> Result<ParamSet> {
    config.validate()?;
    let fisher = exact_pullback(spec, params, data, metric)?.matrix.add_diag(config.effective_damping());
    let min_eigenvalue = sym_eig_min(&fisher)?;
    if !(min_eigenvalue > SINGULAR_FISHER_THRESHOLD * fisher.max_abs()) {
        return Err(Error::SingularFisher { min_eigenvalue });
    }
    let (_, grad) = objective_and_gradient(spec, params, data)?;
    let direction = solve_vec(&fisher, &grad.flatten()).map_err(|e| match e {
        Error::SingularMatrix { .. } => Error::SingularFisher { min_eigenvalue },
        other => other,
    })?;
    Ok(params.step(config.learning_rate, &params.unflatten_like(&direction)?))
}

/// Plain gradient descent, the non-invariant control.
pub fn sgd_step(spec: &NetworkSpec, params: &ParamSet, data: &[Sample], config: &UpdateConfig) -> Result<ParamSet> {
    config.validate()?;
    let (_, grad) = objective_and_gradient(spec, params, data)?;
    Ok(params.step(config.learning_rate, &grad))
}
