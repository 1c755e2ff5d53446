//! Coordinate representations of networks: dense, convolution and recurrent
//! layers in homogeneous form `z = W̄ ā`, with forward evaluation, reverse-mode
//! gradients and forward-mode directional derivatives.

mod activation;
mod conv;
mod params;
mod spec;

pub use activation::{logistic, ActivationKind};
pub use conv::{extract_patches, extract_patches_padded};
pub use params::{LayerParams, ParamSet};
pub use spec::{Grid, LayerKind, LayerSpec, NetworkSpec};

use crate::error::{shape_err, Result};
use crate::linalg::Matrix;

/// What one layer saw during the forward pass, per position (one position
/// for dense layers, one per location for convolutions, one per step for
/// recurrent cells).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Homogeneous inputs `ā` (patches for convolutions, `ā_{t-1}` for cells).
    pub inputs: Vec<Vec<f64>>,
    /// Arguments of the activation: `z`, or `z_t + V x_t` for cells.
    pub pre: Vec<Vec<f64>>,
    /// Per-step sequence inputs `x_t` of a recurrent cell.
    pub step_inputs: Option<Vec<Vec<f64>>>,
}

impl LayerTrace {
    pub fn positions(&self) -> usize {
        self.inputs.len()
    }

    /// `[A^exp]_H`: homogeneous inputs as columns.
    pub fn input_matrix(&self) -> Matrix {
        let rows = self.inputs.first().map_or(0, Vec::len);
        Matrix::from_fn(rows, self.inputs.len(), |r, c| self.inputs[c][r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Flat output of the last layer.
    pub output: Vec<f64>,
    /// Output after the readout map; what the output model consumes.
    pub readout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTrace {
    /// `Dz` per layer and position, for the pre-activations the weights feed.
    pub dz: Vec<Vec<Vec<f64>>>,
    pub grads: ParamSet,
}

impl BackwardTrace {
    pub fn flat_grad(&self) -> Vec<f64> {
        self.grads.flatten()
    }
}

fn homogeneous(a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + 1);
    v.extend_from_slice(a);
    v.push(1.0);
    v
}

/// `W a` for the non-bias columns of `W̄`.
fn weights_times(wbar: &Matrix, a: &[f64]) -> Vec<f64> {
    let cols = wbar.cols() - 1;
    (0..wbar.rows())
        .map(|r| crate::linalg::dot(&wbar.row(r)[..cols], a))
        .collect()
}

/// `Wᵀ d` for the non-bias columns of `W̄`.
fn weights_t_times(wbar: &Matrix, d: &[f64]) -> Vec<f64> {
    let mut out = wbar.matvec_t(d);
    out.pop();
    out
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Evaluates the network on one flat input.
pub fn forward(spec: &NetworkSpec, params: &ParamSet, x: &[f64]) -> Result<ForwardTrace> {
    params.check_matches(spec)?;
    if x.len() != spec.input_len() {
        return shape_err(format!("input has {} values, network expects {}", x.len(), spec.input_len()));
    }
    let mut current = x.to_vec();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        let wbar = &p.weights;
        let act = &layer.activation;
        let trace = match &layer.kind {
            LayerKind::Dense { .. } => {
                let abar = homogeneous(&current);
                let z = wbar.matvec(&abar);
                current = act.eval(&z);
                LayerTrace {
                    inputs: vec![abar],
                    pre: vec![z],
                    step_inputs: None,
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                radius,
                grid,
                padding,
            } => {
                let locations = grid.locations();
                let mut inputs = Vec::with_capacity(locations);
                let mut pre = Vec::with_capacity(locations);
                let mut out = Vec::with_capacity(out_channels * locations);
                for t in 0..locations {
                    let abar = conv::patch(&current, *in_channels, *radius, *grid, padding, t, true);
                    let z = wbar.matvec(&abar);
                    out.extend(act.eval(&z));
                    inputs.push(abar);
                    pre.push(z);
                }
                current = out;
                LayerTrace {
                    inputs,
                    pre,
                    step_inputs: None,
                }
            }
            LayerKind::Recurrent {
                input_dim,
                steps,
                initial_state,
                ..
            } => {
                let v = p.input_weights.as_ref().expect("checked by check_matches");
                let mut state = initial_state.clone();
                let mut inputs = Vec::with_capacity(*steps);
                let mut pre = Vec::with_capacity(*steps);
                let mut xs = Vec::with_capacity(*steps);
                for t in 0..*steps {
                    let xt = current[t * input_dim..(t + 1) * input_dim].to_vec();
                    let abar = homogeneous(&state);
                    let mut z = wbar.matvec(&abar);
                    add_into(&mut z, &v.matvec(&xt));
                    state = act.eval(&z);
                    inputs.push(abar);
                    pre.push(z);
                    xs.push(xt);
                }
                current = state;
                LayerTrace {
                    inputs,
                    pre,
                    step_inputs: Some(xs),
                }
            }
        };
        layers.push(trace);
    }
    let readout = match &spec.readout {
        Some(r) => r.apply(&current),
        None => current.clone(),
    };
    Ok(ForwardTrace {
        layers,
        output: current,
        readout,
    })
}

/// The readout output for one input.
pub fn evaluate(spec: &NetworkSpec, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(spec, params, x)?.readout)
}

/// Reverse-mode pass: pulls a cotangent on the readout output back to every
/// layer's pre-activations and parameters.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    trace: &ForwardTrace,
    output_cotangent: &[f64],
) -> Result<BackwardTrace> {
    if output_cotangent.len() != trace.readout.len() {
        return shape_err(format!(
            "cotangent has {} values, output has {}",
            output_cotangent.len(),
            trace.readout.len()
        ));
    }
    let mut da = match &spec.readout {
        Some(r) => r.b.matvec_t(output_cotangent),
        None => output_cotangent.to_vec(),
    };
    let mut grads = ParamSet::zeros(spec);
    let mut dz_all = vec![Vec::new(); spec.layers.len()];
    for i in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[i];
        let lt = &trace.layers[i];
        let wbar = &params.layers[i].weights;
        let act = &layer.activation;
        let g = &mut grads.layers[i];
        match &layer.kind {
            LayerKind::Dense { .. } => {
                let dz = act.vjp(&lt.pre[0], &da);
                g.weights.add_outer(&dz, &lt.inputs[0]);
                da = weights_t_times(wbar, &dz);
                dz_all[i] = vec![dz];
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                radius,
                grid,
                ..
            } => {
                let locations = grid.locations();
                let mut da_in = vec![0.0; in_channels * locations];
                let mut dzs = Vec::with_capacity(locations);
                for t in 0..locations {
                    let dz = act.vjp(&lt.pre[t], &da[t * out_channels..(t + 1) * out_channels]);
                    g.weights.add_outer(&dz, &lt.inputs[t]);
                    let dp = weights_t_times(wbar, &dz);
                    conv::scatter_patch(&mut da_in, &dp, *in_channels, *radius, *grid, t);
                    dzs.push(dz);
                }
                da = da_in;
                dz_all[i] = dzs;
            }
            LayerKind::Recurrent { steps, .. } => {
                let xs = lt.step_inputs.as_ref().expect("recurrent trace keeps its inputs");
                let mut dzs = vec![Vec::new(); *steps];
                let mut da_t = da.clone();
                for t in (0..*steps).rev() {
                    let dz = act.vjp(&lt.pre[t], &da_t);
                    da_t = weights_t_times(wbar, &dz);
                    dzs[t] = dz;
                }
                let dv = g.input_weights.as_mut().expect("recurrent grads carry V");
                for t in 0..*steps {
                    g.weights.add_outer(&dzs[t], &lt.inputs[t]);
                    dv.add_outer(&dzs[t], &xs[t]);
                }
                // The sequence input is data, not a layer output.
                da = Vec::new();
                dz_all[i] = dzs;
            }
        }
    }
    Ok(BackwardTrace { dz: dz_all, grads })
}

/// Forward-mode pass: derivative of the readout output along a parameter
/// tangent, `J_Ψ v`.
pub fn jvp(spec: &NetworkSpec, params: &ParamSet, trace: &ForwardTrace, tangent: &ParamSet) -> Result<Vec<f64>> {
    tangent.check_matches(spec)?;
    let mut da = vec![0.0; spec.input_len()];
    for (i, layer) in spec.layers.iter().enumerate() {
        let lt = &trace.layers[i];
        let wbar = &params.layers[i].weights;
        let dw = &tangent.layers[i].weights;
        let act = &layer.activation;
        match &layer.kind {
            LayerKind::Dense { .. } => {
                let mut dz = dw.matvec(&lt.inputs[0]);
                add_into(&mut dz, &weights_times(wbar, &da));
                da = act.jvp(&lt.pre[0], &dz);
            }
            LayerKind::Conv2d {
                in_channels,
                radius,
                grid,
                ..
            } => {
                let zero = vec![0.0; *in_channels];
                let mut out = Vec::new();
                for t in 0..grid.locations() {
                    let dp = conv::patch(&da, *in_channels, *radius, *grid, &zero, t, false);
                    let mut dz = dw.matvec(&lt.inputs[t]);
                    add_into(&mut dz, &weights_times(wbar, &dp));
                    out.extend(act.jvp(&lt.pre[t], &dz));
                }
                da = out;
            }
            LayerKind::Recurrent { hidden_dim, steps, .. } => {
                let xs = lt.step_inputs.as_ref().expect("recurrent trace keeps its inputs");
                let dv = tangent.layers[i].input_weights.as_ref().expect("checked");
                let mut ds = vec![0.0; *hidden_dim];
                for t in 0..*steps {
                    let mut dz = dw.matvec(&lt.inputs[t]);
                    add_into(&mut dz, &weights_times(wbar, &ds));
                    add_into(&mut dz, &dv.matvec(&xs[t]));
                    ds = act.jvp(&lt.pre[t], &dz);
                }
                da = ds;
            }
        }
    }
    Ok(match &spec.readout {
        Some(r) => r.b.matvec(&da),
        None => da,
    })
}

/// Dense Jacobian `J_Ψ` of the readout output with respect to the flat
/// parameters, one forward-mode pass per column.
pub fn jacobian(spec: &NetworkSpec, params: &ParamSet, trace: &ForwardTrace) -> Result<Matrix> {
    let n = params.num_params();
    let zero = vec![0.0; n];
    let cols = crate::par::try_map_range(n, |j| {
        let mut e = zero.clone();
        e[j] = 1.0;
        jvp(spec, params, trace, &params.unflatten_like(&e)?)
    })?;
    let rows = trace.readout.len();
    Ok(Matrix::from_fn(rows, n, |r, c| cols[c][r]))
}
