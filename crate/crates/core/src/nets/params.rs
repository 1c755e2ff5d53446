use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{unvec, vec, Matrix};
use crate::nets::NetworkSpec;

/// Parameters of one layer: the homogeneous weights `W̄ = [W b]` and, for
/// recurrent cells, the input matrix `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_weights: Option<Matrix>,
}

/// Ordered parameter blocks of a network. The flat vector is
/// `[vec(W̄_1); vec(V_1)?; vec(W̄_2); ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"KFLP";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamSet {
    pub fn zeros(spec: &NetworkSpec) -> ParamSet {
        ParamSet {
            layers: spec
                .layers
                .iter()
                .map(|l| {
                    let (r, c) = l.weight_shape();
                    LayerParams {
                        weights: Matrix::zeros(r, c),
                        input_weights: l.input_weight_shape().map(|(r, c)| Matrix::zeros(r, c)),
                    }
                })
                .collect(),
        }
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, small gaussian biases.
    pub fn random(spec: &NetworkSpec, rng: &mut impl Rng) -> ParamSet {
        let mut gaussian = |rows: usize, cols: usize, scale: f64, bias_scale: Option<f64>| {
            Matrix::from_fn(rows, cols, |_, c| {
                let z: f64 = rng.sample(StandardNormal);
                match bias_scale {
                    Some(b) if c + 1 == cols => b * z,
                    _ => scale * z,
                }
            })
        };
        ParamSet {
            layers: spec
                .layers
                .iter()
                .map(|l| {
                    let (r, c) = l.weight_shape();
                    let fan_in = (c - 1).max(1) as f64;
                    let weights = gaussian(r, c, fan_in.sqrt().recip(), Some(0.1));
                    let input_weights = l
                        .input_weight_shape()
                        .map(|(r, c)| gaussian(r, c, (c.max(1) as f64).sqrt().recip(), None));
                    LayerParams { weights, input_weights }
                })
                .collect(),
        }
    }

    /// All matrices in flatten order.
    pub fn blocks(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weights);
            if let Some(v) = &l.input_weights {
                out.push(v);
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weights);
            if let Some(v) = &mut l.input_weights {
                out.push(v);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in self.blocks() {
            out.extend(vec(b));
        }
        out
    }

    /// Rebuilds a parameter set shaped like `self` from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_params() {
            return shape_err(format!("{} values for {} parameters", flat.len(), self.num_params()));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for b in out.blocks_mut() {
            let n = b.rows() * b.cols();
            *b = unvec(&flat[offset..offset + n], b.rows(), b.cols())?;
            offset += n;
        }
        Ok(out)
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return shape_err(format!("{} parameter layers for {} network layers", self.layers.len(), spec.layers.len()));
        }
        for (i, (p, l)) in self.layers.iter().zip(&spec.layers).enumerate() {
            if p.weights.shape() != l.weight_shape() {
                return shape_err(format!("layer {i}: weights {:?}, expected {:?}", p.weights.shape(), l.weight_shape()));
            }
            if p.input_weights.as_ref().map(Matrix::shape) != l.input_weight_shape() {
                return shape_err(format!("layer {i}: input weights do not match the recurrent cell"));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        let a = self.blocks();
        let b = other.blocks();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    fn zip_with(&self, other: &ParamSet, f: impl Fn(&Matrix, &Matrix) -> Matrix) -> ParamSet {
        assert!(self.same_shape(other), "parameter sets differ in shape");
        let mut out = self.clone();
        for (o, (a, b)) in out.blocks_mut().into_iter().zip(self.blocks().into_iter().zip(other.blocks())) {
            *o = f(a, b);
        }
        out
    }

    pub fn add(&self, other: &ParamSet) -> ParamSet {
        self.zip_with(other, Matrix::add)
    }

    pub fn sub(&self, other: &ParamSet) -> ParamSet {
        self.zip_with(other, Matrix::sub)
    }

    pub fn scale(&self, alpha: f64) -> ParamSet {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            *b = b.scale(alpha);
        }
        out
    }

    /// `self - alpha * direction`.
    pub fn step(&self, alpha: f64, direction: &ParamSet) -> ParamSet {
        self.zip_with(direction, |a, d| {
            let mut m = a.clone();
            m.axpy(-alpha, d);
            m
        })
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        crate::linalg::dot(&self.flatten(), &other.flatten())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        crate::linalg::max_abs_diff(&self.flatten(), &other.flatten())
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks().iter().map(|b| b.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    /// Binary checkpoint: magic, version, block count, `(rows, cols)` per
    /// block as little-endian u64, then the flat vector as little-endian f64.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let blocks = self.blocks();
        w.write_all(&(blocks.len() as u64).to_le_bytes())?;
        for b in &blocks {
            w.write_all(&(b.rows() as u64).to_le_bytes())?;
            w.write_all(&(b.cols() as u64).to_le_bytes())?;
        }
        for x in self.flatten() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint and checks it against the network layout.
    pub fn read_checkpoint(spec: &NetworkSpec, mut r: impl Read) -> Result<ParamSet> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::InvalidConfig("not a parameter checkpoint".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig("unsupported checkpoint version".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let template = ParamSet::zeros(spec);
        let n = read_u64(&mut r)? as usize;
        let expected: Vec<(usize, usize)> = template.blocks().iter().map(|b| b.shape()).collect();
        if n != expected.len() {
            return shape_err(format!("checkpoint has {n} blocks, network needs {}", expected.len()));
        }
        for &(rows, cols) in &expected {
            let (cr, cc) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
            if (cr, cc) != (rows, cols) {
                return shape_err(format!("checkpoint block {cr}x{cc}, network needs {rows}x{cols}"));
            }
        }
        let mut flat = vec![0.0; template.num_params()];
        let mut f64buf = [0u8; 8];
        for x in &mut flat {
            r.read_exact(&mut f64buf)?;
            *x = f64::from_le_bytes(f64buf);
        }
        template.unflatten_like(&flat)
    }
}
