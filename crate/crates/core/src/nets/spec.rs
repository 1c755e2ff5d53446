use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::OutputModel;
use crate::nets::ActivationKind;
use crate::reparam::AffineMap;

/// Spatial grid of a convolution layer. Locations are ordered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `z = W a + b`.
    Dense { in_dim: usize, out_dim: usize },
    /// Stride-1 convolution padded by its radius so input and output share
    /// the grid. `padding` holds the channel coordinates used for locations
    /// outside the grid (zero in the standard basis).
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        radius: usize,
        grid: Grid,
        padding: Vec<f64>,
    },
    /// `z_t = W a_{t-1} + b`, `a_t = φ(z_t + V x_t)` over a fixed number of
    /// steps starting from `initial_state`. The layer emits the final state.
    Recurrent {
        input_dim: usize,
        hidden_dim: usize,
        steps: usize,
        initial_state: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: ActivationKind) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { in_dim, out_dim },
            activation,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        radius: usize,
        height: usize,
        width: usize,
        activation: ActivationKind,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                radius,
                grid: Grid { height, width },
                padding: vec![0.0; in_channels],
            },
            activation,
        }
    }

    pub fn recurrent(input_dim: usize, hidden_dim: usize, steps: usize, activation: ActivationKind) -> Self {
        LayerSpec {
            kind: LayerKind::Recurrent {
                input_dim,
                hidden_dim,
                steps,
                initial_state: vec![0.0; hidden_dim],
            },
            activation,
        }
    }

    /// Dimension of one input activation vector (per location or per step).
    pub fn input_channels(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { in_dim, .. } => *in_dim,
            LayerKind::Conv2d { in_channels, .. } => *in_channels,
            LayerKind::Recurrent { input_dim, .. } => *input_dim,
        }
    }

    /// Dimension of one pre-activation / output activation vector.
    pub fn output_channels(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { out_dim, .. } => *out_dim,
            LayerKind::Conv2d { out_channels, .. } => *out_channels,
            LayerKind::Recurrent { hidden_dim, .. } => *hidden_dim,
        }
    }

    /// How many input vectors make up one flat input.
    pub fn input_multiplicity(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv2d { grid, .. } => grid.locations(),
            LayerKind::Recurrent { steps, .. } => *steps,
        }
    }

    /// How many output vectors make up one flat output.
    pub fn output_multiplicity(&self) -> usize {
        match &self.kind {
            LayerKind::Conv2d { grid, .. } => grid.locations(),
            _ => 1,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels() * self.input_multiplicity()
    }

    pub fn output_len(&self) -> usize {
        self.output_channels() * self.output_multiplicity()
    }

    /// Number of spatial offsets `|Δ| = (2R+1)²` for convolutions, 1 otherwise.
    pub fn offsets(&self) -> usize {
        match &self.kind {
            LayerKind::Conv2d { radius, .. } => (2 * radius + 1).pow(2),
            _ => 1,
        }
    }

    /// Shape of the homogeneous weight matrix `W̄ = [W b]`.
    pub fn weight_shape(&self) -> (usize, usize) {
        match &self.kind {
            LayerKind::Dense { in_dim, out_dim } => (*out_dim, in_dim + 1),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => (*out_channels, in_channels * self.offsets() + 1),
            LayerKind::Recurrent { hidden_dim, .. } => (*hidden_dim, hidden_dim + 1),
        }
    }

    /// Shape of the recurrent input matrix `V`, if the layer has one.
    pub fn input_weight_shape(&self) -> Option<(usize, usize)> {
        match &self.kind {
            LayerKind::Recurrent {
                input_dim,
                hidden_dim,
                ..
            } => Some((*hidden_dim, *input_dim)),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Recurrent { .. } => "recurrent",
        }
    }
}

/// A feed-forward stack of layers with an optional affine readout in front of
/// the output model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub output_model: OutputModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<AffineMap>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, output_model: OutputModel) -> Result<Self> {
        let spec = NetworkSpec {
            layers,
            output_model,
            readout: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::input_len)
    }

    /// Length of the last layer's flat output.
    pub fn network_output_len(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output_len)
    }

    /// Length of the vector handed to the output model.
    pub fn output_len(&self) -> usize {
        match &self.readout {
            Some(r) => r.dim(),
            None => self.network_output_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |index: usize, reason: String| Err(Error::UnsupportedLayer { index, reason });
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(d) = layer.activation.dim() {
                if d != layer.output_channels() {
                    return invalid(i, format!("activation acts on {d} channels, layer has {}", layer.output_channels()));
                }
            }
            match &layer.kind {
                LayerKind::Dense { in_dim, .. } => {
                    if i > 0 && self.layers[i - 1].output_len() != *in_dim {
                        return invalid(
                            i,
                            format!("expects {in_dim} inputs, previous layer emits {}", self.layers[i - 1].output_len()),
                        );
                    }
                }
                LayerKind::Conv2d {
                    in_channels,
                    grid,
                    padding,
                    ..
                } => {
                    if grid.locations() == 0 {
                        return invalid(i, "empty grid".into());
                    }
                    if padding.len() != *in_channels {
                        return invalid(i, "padding length differs from input channels".into());
                    }
                    if i > 0 {
                        match &self.layers[i - 1].kind {
                            LayerKind::Conv2d {
                                out_channels,
                                grid: prev,
                                ..
                            } if out_channels == in_channels && prev == grid => {}
                            _ => return invalid(i, "convolution must follow a convolution on the same grid".into()),
                        }
                    }
                }
                LayerKind::Recurrent {
                    steps,
                    hidden_dim,
                    initial_state,
                    ..
                } => {
                    if i > 0 {
                        return invalid(i, "a recurrent cell must be the first layer".into());
                    }
                    if *steps == 0 {
                        return invalid(i, "recurrent cell needs at least one step".into());
                    }
                    if initial_state.len() != *hidden_dim {
                        return invalid(i, "initial state length differs from hidden size".into());
                    }
                }
            }
        }
        if let Some(r) = &self.readout {
            if r.b.cols() != self.network_output_len() {
                return Err(Error::ShapeMismatch(format!(
                    "readout reads {} values, network emits {}",
                    r.b.cols(),
                    self.network_output_len()
                )));
            }
        }
        if self.output_model.dim() != self.output_len() {
            return Err(Error::ShapeMismatch(format!(
                "output model expects {} values, network emits {}",
                self.output_model.dim(),
                self.output_len()
            )));
        }
        Ok(())
    }

    /// Layer kinds present, for estimator dispatch checks.
    pub fn has_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> bool {
        self.layers.iter().any(|l| pred(&l.kind))
    }
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    kind: String,
    dims: Vec<usize>,
    activation: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_state: Option<Vec<f64>>,
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = String;

    fn try_from(raw: RawLayer) -> std::result::Result<Self, String> {
        let d = &raw.dims;
        let kind = match (raw.kind.as_str(), d.len()) {
            ("dense", 2) => LayerKind::Dense {
                in_dim: d[0],
                out_dim: d[1],
            },
            ("conv2d", 5) => LayerKind::Conv2d {
                in_channels: d[0],
                out_channels: d[1],
                radius: d[2],
                grid: Grid {
                    height: d[3],
                    width: d[4],
                },
                padding: raw.padding.unwrap_or_else(|| vec![0.0; d[0]]),
            },
            ("recurrent", 3) => LayerKind::Recurrent {
                input_dim: d[0],
                hidden_dim: d[1],
                steps: d[2],
                initial_state: raw.initial_state.unwrap_or_else(|| vec![0.0; d[1]]),
            },
            (k @ ("dense" | "conv2d" | "recurrent"), n) => {
                return Err(format!("layer kind {k} does not take {n} dims"))
            }
            (k, _) => return Err(format!("unknown layer kind {k}")),
        };
        Ok(LayerSpec {
            kind,
            activation: raw.activation,
        })
    }
}

impl From<LayerSpec> for RawLayer {
    fn from(l: LayerSpec) -> Self {
        let (kind, dims, padding, initial_state) = match l.kind {
            LayerKind::Dense { in_dim, out_dim } => ("dense", vec![in_dim, out_dim], None, None),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                radius,
                grid,
                padding,
            } => {
                let padding = padding.iter().any(|&p| p != 0.0).then_some(padding);
                (
                    "conv2d",
                    vec![in_channels, out_channels, radius, grid.height, grid.width],
                    padding,
                    None,
                )
            }
            LayerKind::Recurrent {
                input_dim,
                hidden_dim,
                steps,
                initial_state,
            } => {
                let initial_state = initial_state.iter().any(|&p| p != 0.0).then_some(initial_state);
                ("recurrent", vec![input_dim, hidden_dim, steps], None, initial_state)
            }
        };
        RawLayer {
            kind: kind.to_string(),
            dims,
            activation: l.activation,
            padding,
            initial_state,
        }
    }
}
