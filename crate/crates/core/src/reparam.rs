//! Affine changes of basis on activation and pre-activation spaces, and the
//! induced transformation of network parameters.
//!
//! Conventions follow the usual change-of-basis bookkeeping:
//!
//! * activation maps `(Ω_i, γ_i)` go from the original coordinates to the new
//!   ones, `a‡ = Ω a + γ`;
//! * pre-activation maps `(Φ_i, τ_i)` go from the new coordinates back to the
//!   original ones, `z = Φ z‡ + τ`.
//!
//! With that choice the original parameters are recovered from the
//! transformed ones by multiplication only (`W = Φ W‡ Ω`,
//! `b = Φ W‡ γ + Φ b‡ + τ`); the forward transform solves that relation.
//!
//! Activation maps act on one channel vector. Layers whose activations are
//! made of several such vectors (convolution locations, patch offsets) use the
//! block-diagonal lift `I ⊗ Ω` with the offset repeated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{inverse, kron, orthonormalize, solve, Matrix};
use crate::nets::{ActivationKind, LayerKind, NetworkSpec, ParamSet};

/// `x ↦ B x + c` with `B` square and invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    #[serde(rename = "B")]
    pub b: Matrix,
    pub c: Vec<f64>,
}

impl AffineMap {
    pub fn new(b: Matrix, c: Vec<f64>) -> Result<Self> {
        if b.rows() != c.len() {
            return shape_err(format!("affine map: {}x{} matrix with {}-vector offset", b.rows(), b.cols(), c.len()));
        }
        Ok(AffineMap { b, c })
    }

    pub fn identity(n: usize) -> Self {
        AffineMap {
            b: Matrix::identity(n),
            c: vec![0.0; n],
        }
    }

    /// `x ↦ scale * x + offset` on every coordinate.
    pub fn scalar(n: usize, scale: f64, offset: f64) -> Self {
        AffineMap {
            b: Matrix::identity(n).scale(scale),
            c: vec![offset; n],
        }
    }

    /// Output dimension.
    pub fn dim(&self) -> usize {
        self.b.rows()
    }

    pub fn is_square(&self) -> bool {
        self.b.is_square()
    }

    pub fn is_identity(&self) -> bool {
        self.b == Matrix::identity(self.b.rows()) && self.c.iter().all(|&x| x == 0.0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.matvec(x);
        for (v, c) in y.iter_mut().zip(&self.c) {
            *v += c;
        }
        y
    }

    /// Applies the map to each consecutive block of `dim` entries.
    pub fn apply_blocks(&self, x: &[f64]) -> Vec<f64> {
        let n = self.b.cols();
        if n == 0 {
            return Vec::new();
        }
        x.chunks(n).flat_map(|chunk| self.apply(chunk)).collect()
    }

    /// `(B⁻¹, -B⁻¹ c)`.
    pub fn inverse(&self) -> Result<AffineMap> {
        let b = inverse(&self.b)?;
        let c = b.matvec(&self.c).into_iter().map(|v| -v).collect();
        Ok(AffineMap { b, c })
    }

    /// The composition that applies `self` first and `next` second.
    pub fn then(&self, next: &AffineMap) -> AffineMap {
        let b = next.b.matmul(&self.b);
        let mut c = next.b.matvec(&self.c);
        for (v, o) in c.iter_mut().zip(&next.c) {
            *v += o;
        }
        AffineMap { b, c }
    }

    /// Homogeneous form `[[B, c], [0, 1]]`.
    pub fn homogeneous(&self) -> Matrix {
        let n = self.b.rows();
        let m = self.b.cols();
        Matrix::from_fn(n + 1, m + 1, |r, col| match (r < n, col < m) {
            (true, true) => self.b[(r, col)],
            (true, false) => self.c[r],
            (false, true) => 0.0,
            (false, false) => 1.0,
        })
    }

    /// `(I_k ⊗ B, 1_k ⊗ c)`: the same map on each of `k` stacked blocks.
    pub fn lift(&self, k: usize) -> AffineMap {
        if k == 1 {
            return self.clone();
        }
        AffineMap {
            b: kron(&Matrix::identity(k), &self.b),
            c: (0..k).flat_map(|_| self.c.iter().copied()).collect(),
        }
    }

    /// `‖x − inv(fwd(x))‖_∞`.
    pub fn round_trip_error(&self, x: &[f64]) -> Result<f64> {
        let back = self.inverse()?.apply(&self.apply(x));
        Ok(crate::linalg::max_abs_diff(x, &back))
    }

    fn random(n: usize, cap: f64, rng: &mut ChaCha8Rng) -> Result<AffineMap> {
        let mut gaussian = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
        let left = orthonormalize(&gaussian(n, n))?;
        let right = orthonormalize(&gaussian(n, n))?;
        let half_log = 0.5 * cap.ln();
        let singular: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                (u * half_log).exp()
            })
            .collect();
        let b = left.matmul(&Matrix::from_diag(&singular)).matmul(&right.transpose());
        let c = (0..n)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(AffineMap { b, c })
    }
}

/// One affine map per activation space `A_0..A_L` and per pre-activation
/// space `Z_1..Z_L`. Layer `i` (0-based) reads `activation_maps[i]`, writes
/// `activation_maps[i + 1]` and produces pre-activations in
/// `preactivation_maps[i]`. A recurrent cell in position 0 reads its
/// sequence inputs from `activation_maps[0]` and its state from
/// `activation_maps[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkReparam {
    pub activation_maps: Vec<AffineMap>,
    pub preactivation_maps: Vec<AffineMap>,
}

/// Constraints for [`NetworkReparam::random`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RandomReparamOptions {
    /// Leave the output activation space untouched.
    pub fix_output: bool,
    /// Leave the input space untouched.
    pub fix_input: bool,
}

/// Channel dimension of each activation space.
fn activation_dims(spec: &NetworkSpec) -> Vec<usize> {
    let mut dims = vec![spec.layers[0].input_channels()];
    dims.extend(spec.layers.iter().map(|l| l.output_channels()));
    dims
}

fn preactivation_dims(spec: &NetworkSpec) -> Vec<usize> {
    spec.layers.iter().map(|l| l.output_channels()).collect()
}

impl NetworkReparam {
    pub fn identity(spec: &NetworkSpec) -> Self {
        NetworkReparam {
            activation_maps: activation_dims(spec).into_iter().map(AffineMap::identity).collect(),
            preactivation_maps: preactivation_dims(spec).into_iter().map(AffineMap::identity).collect(),
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let act = activation_dims(spec);
        let pre = preactivation_dims(spec);
        if self.activation_maps.len() != act.len() || self.preactivation_maps.len() != pre.len() {
            return shape_err(format!(
                "reparam has {}/{} maps, network needs {}/{}",
                self.activation_maps.len(),
                self.preactivation_maps.len(),
                act.len(),
                pre.len()
            ));
        }
        for (map, &d) in self.activation_maps.iter().chain(&self.preactivation_maps).zip(act.iter().chain(&pre)) {
            if !map.is_square() || map.dim() != d || map.c.len() != d {
                return shape_err(format!("affine map of dimension {} where {d} is needed", map.dim()));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.activation_maps.iter().chain(&self.preactivation_maps).all(AffineMap::is_identity)
    }

    /// The reparam that undoes `self`.
    pub fn inverse(&self) -> Result<NetworkReparam> {
        Ok(NetworkReparam {
            activation_maps: self.activation_maps.iter().map(AffineMap::inverse).collect::<Result<_>>()?,
            preactivation_maps: self.preactivation_maps.iter().map(AffineMap::inverse).collect::<Result<_>>()?,
        })
    }

    /// The single reparam equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &NetworkReparam) -> NetworkReparam {
        NetworkReparam {
            activation_maps: self
                .activation_maps
                .iter()
                .zip(&next.activation_maps)
                .map(|(a, b)| a.then(b))
                .collect(),
            // pre-activation maps point back towards the original basis
            preactivation_maps: self
                .preactivation_maps
                .iter()
                .zip(&next.preactivation_maps)
                .map(|(a, b)| b.then(a))
                .collect(),
        }
    }

    /// Random well-conditioned maps `B = U diag(s) Vᵀ` with `U`, `V` Haar
    /// orthogonal and `s` log-uniform in `[1/√cap, √cap]`, so `cond(B) ≤ cap`.
    /// The sequence inputs of a recurrent cell are always left untouched.
    pub fn random(spec: &NetworkSpec, seed: u64, cap: f64, options: RandomReparamOptions) -> Result<Self> {
        use rand::SeedableRng;
        if !(cap >= 1.0) {
            return Err(Error::InvalidConfig(format!("conditioning cap {cap} must be at least 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = activation_dims(spec);
        let last = act.len() - 1;
        let recurrent_input = matches!(spec.layers[0].kind, LayerKind::Recurrent { .. });
        let mut activation_maps = Vec::with_capacity(act.len());
        for (i, &d) in act.iter().enumerate() {
            let fixed = (i == 0 && (options.fix_input || recurrent_input)) || (i == last && options.fix_output);
            // draw regardless so the stream does not depend on the options
            let map = AffineMap::random(d, cap, &mut rng)?;
            activation_maps.push(if fixed { AffineMap::identity(d) } else { map });
        }
        let preactivation_maps = preactivation_dims(spec)
            .into_iter()
            .map(|d| AffineMap::random(d, cap, &mut rng))
            .collect::<Result<_>>()?;
        Ok(NetworkReparam {
            activation_maps,
            preactivation_maps,
        })
    }

    /// The logistic-to-tanh identification. Every logistic layer gets the
    /// activation map `a ↦ 2a − 1` and the pre-activation map `z = 2 z‡`, so
    /// its transformed activation `2σ(2z‡) − 1` is exactly `tanh(z‡)`. The
    /// offset lives on the activation side; downstream layers absorb it into
    /// their biases.
    pub fn logistic_to_tanh(spec: &NetworkSpec) -> Self {
        let mut r = NetworkReparam::identity(spec);
        for (i, layer) in spec.layers.iter().enumerate() {
            if layer.activation == ActivationKind::Logistic {
                let n = layer.output_channels();
                r.activation_maps[i + 1] = AffineMap::scalar(n, 2.0, -1.0);
                r.preactivation_maps[i] = AffineMap::scalar(n, 2.0, 0.0);
            }
        }
        r
    }

    /// Map on the homogeneous inputs `ā` of layer `i`, before lifting to
    /// homogeneous form.
    fn layer_input_map(&self, spec: &NetworkSpec, i: usize) -> AffineMap {
        let layer = &spec.layers[i];
        match &layer.kind {
            LayerKind::Dense { .. } => {
                let k = if i == 0 { 1 } else { spec.layers[i - 1].output_multiplicity() };
                self.activation_maps[i].lift(k)
            }
            LayerKind::Conv2d { .. } => self.activation_maps[i].lift(layer.offsets()),
            LayerKind::Recurrent { .. } => self.activation_maps[i + 1].clone(),
        }
    }

    /// Map on the network's flat output.
    fn output_map(&self, spec: &NetworkSpec) -> AffineMap {
        let last = spec.layers.len();
        self.activation_maps[last].lift(spec.layers[last - 1].output_multiplicity())
    }
}

/// `φ‡(z‡) = Ω φ(Φ z‡ + τ) + γ`. Wrapping an already wrapped activation
/// folds both affine pairs into one.
pub fn transform_activation(act: &ActivationKind, omega: &AffineMap, phi: &AffineMap) -> ActivationKind {
    if omega.is_identity() && phi.is_identity() {
        return act.clone();
    }
    match act {
        ActivationKind::AffineWrapped {
            base,
            omega: inner_omega,
            gamma: inner_gamma,
            phi: inner_phi,
            tau: inner_tau,
        } => {
            let outer = AffineMap {
                b: inner_omega.clone(),
                c: inner_gamma.clone(),
            }
            .then(omega);
            let inner = phi.then(&AffineMap {
                b: inner_phi.clone(),
                c: inner_tau.clone(),
            });
            ActivationKind::AffineWrapped {
                base: base.clone(),
                omega: outer.b,
                gamma: outer.c,
                phi: inner.b,
                tau: inner.c,
            }
        }
        _ => ActivationKind::AffineWrapped {
            base: Box::new(act.clone()),
            omega: omega.b.clone(),
            gamma: omega.c.clone(),
            phi: phi.b.clone(),
            tau: phi.c.clone(),
        },
    }
}

/// `W̄‡ = Φ⁻¹ (W̄ M⁻¹ − τ e_lastᵀ)` where `M` is the homogeneous input map.
fn transform_weights(wbar: &Matrix, input: &AffineMap, pre: &AffineMap) -> Result<Matrix> {
    let mut m = wbar.matmul(&input.inverse()?.homogeneous());
    let last = m.cols() - 1;
    for r in 0..m.rows() {
        m[(r, last)] -= pre.c[r];
    }
    solve(&pre.b, &m)
}

/// `W̄ = Φ W̄‡ M + τ e_lastᵀ`.
fn restore_weights(wbar: &Matrix, input: &AffineMap, pre: &AffineMap) -> Matrix {
    let mut m = pre.b.matmul(wbar).matmul(&input.homogeneous());
    let last = m.cols() - 1;
    for r in 0..m.rows() {
        m[(r, last)] += pre.c[r];
    }
    m
}

fn layer_is_identity(r: &NetworkReparam, spec: &NetworkSpec, i: usize) -> bool {
    let recurrent = matches!(spec.layers[i].kind, LayerKind::Recurrent { .. });
    r.activation_maps[i].is_identity()
        && r.preactivation_maps[i].is_identity()
        && (!recurrent || r.activation_maps[i + 1].is_identity())
}

/// Parameters of the transformed network that computes the same function.
pub fn transform_params(spec: &NetworkSpec, params: &ParamSet, r: &NetworkReparam) -> Result<ParamSet> {
    params.check_matches(spec)?;
    r.check(spec)?;
    let mut out = params.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer_is_identity(r, spec, i) {
            continue;
        }
        let pre = &r.preactivation_maps[i];
        let input = r.layer_input_map(spec, i);
        let p = &params.layers[i];
        let mut weights = transform_weights(&p.weights, &input, pre)?;
        if let LayerKind::Recurrent { .. } = layer.kind {
            // V x = V Ψ⁻¹ x‡ − V Ψ⁻¹ ψ; the constant joins the bias.
            let v = p.input_weights.as_ref().expect("checked");
            let seq_inv = r.activation_maps[i].inverse()?;
            let v_new = solve(&pre.b, &v.matmul(&seq_inv.b))?;
            let shift = v_new.matvec(&r.activation_maps[i].c);
            let last = weights.cols() - 1;
            for (row, s) in shift.iter().enumerate() {
                weights[(row, last)] -= s;
            }
            out.layers[i].input_weights = Some(v_new);
        }
        out.layers[i].weights = weights;
    }
    Ok(out)
}

/// Inverse of [`transform_params`] written directly from the relations
/// `W = Φ W‡ Ω`, `b = Φ W‡ γ + Φ b‡ + τ` (multiplications only).
pub fn restore_params(spec: &NetworkSpec, transformed: &ParamSet, r: &NetworkReparam) -> Result<ParamSet> {
    transformed.check_matches(spec)?;
    r.check(spec)?;
    let mut out = transformed.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer_is_identity(r, spec, i) {
            continue;
        }
        let pre = &r.preactivation_maps[i];
        let input = r.layer_input_map(spec, i);
        let p = &transformed.layers[i];
        let mut weights = restore_weights(&p.weights, &input, pre);
        if let LayerKind::Recurrent { .. } = layer.kind {
            let v_t = p.input_weights.as_ref().expect("checked");
            let seq = &r.activation_maps[i];
            let pv = pre.b.matmul(v_t);
            let shift = pv.matvec(&seq.c);
            let last = weights.cols() - 1;
            for (row, s) in shift.iter().enumerate() {
                weights[(row, last)] += s;
            }
            out.layers[i].input_weights = Some(pv.matmul(&seq.b));
        }
        out.layers[i].weights = weights;
    }
    Ok(out)
}

fn check_kinds(spec: &NetworkSpec, allowed: &[&str], required: Option<&str>) -> Result<()> {
    for (index, layer) in spec.layers.iter().enumerate() {
        if !allowed.contains(&layer.kind_name()) {
            return Err(Error::UnsupportedLayer {
                index,
                reason: format!("{} layer not handled here", layer.kind_name()),
            });
        }
    }
    if let Some(req) = required {
        if !spec.layers.iter().any(|l| l.kind_name() == req) {
            return Err(Error::UnsupportedLayer {
                index: 0,
                reason: format!("network has no {req} layer"),
            });
        }
    }
    Ok(())
}

/// [`transform_params`] restricted to all-dense networks.
pub fn transform_params_dense(spec: &NetworkSpec, params: &ParamSet, r: &NetworkReparam) -> Result<ParamSet> {
    check_kinds(spec, &["dense"], None)?;
    transform_params(spec, params, r)
}

/// [`transform_params`] for convolution stacks with optional dense heads:
/// `[W̄‡]_H = [Φ]_H⁻¹ [W̄]_H (I ⊗ [Ω]_H)⁻¹` per convolution.
pub fn transform_params_conv(spec: &NetworkSpec, params: &ParamSet, r: &NetworkReparam) -> Result<ParamSet> {
    check_kinds(spec, &["conv2d", "dense"], Some("conv2d"))?;
    transform_params(spec, params, r)
}

/// [`transform_params`] for a recurrent cell with optional dense head.
pub fn transform_params_rnn(spec: &NetworkSpec, params: &ParamSet, r: &NetworkReparam) -> Result<ParamSet> {
    check_kinds(spec, &["recurrent", "dense"], Some("recurrent"))?;
    transform_params(spec, params, r)
}

/// The transformed network description: wrapped activations, padding and
/// initial states expressed in the new bases, and a readout that maps the new
/// output coordinates back to what the output model expects.
pub fn transform_spec(spec: &NetworkSpec, r: &NetworkReparam) -> Result<NetworkSpec> {
    r.check(spec)?;
    let mut out = spec.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        layer.activation = transform_activation(&layer.activation, &r.activation_maps[i + 1], &r.preactivation_maps[i]);
        match &mut layer.kind {
            LayerKind::Conv2d { padding, .. } => *padding = r.activation_maps[i].apply(padding),
            LayerKind::Recurrent { initial_state, .. } => *initial_state = r.activation_maps[i + 1].apply(initial_state),
            LayerKind::Dense { .. } => {}
        }
    }
    let output_map = r.output_map(spec);
    if !output_map.is_identity() {
        let back = output_map.inverse()?;
        out.readout = Some(match &spec.readout {
            Some(existing) => back.then(existing),
            None => back,
        });
    }
    out.validate()?;
    Ok(out)
}

/// Transformed network and parameters in one call.
pub fn transform_network(spec: &NetworkSpec, params: &ParamSet, r: &NetworkReparam) -> Result<(NetworkSpec, ParamSet)> {
    Ok((transform_spec(spec, r)?, transform_params(spec, params, r)?))
}

/// Input coordinates in the new basis of the input space.
pub fn transform_input(spec: &NetworkSpec, r: &NetworkReparam, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_len() {
        return shape_err(format!("input has {} values, network expects {}", x.len(), spec.input_len()));
    }
    let map = &r.activation_maps[0];
    if map.is_identity() {
        return Ok(x.to_vec());
    }
    Ok(map.apply_blocks(x))
}
