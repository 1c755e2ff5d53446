use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Smooth activation maps. Elementwise kinds act coordinate by coordinate;
/// `AffineWrapped` evaluates `omega * base(phi * z + tau) + gamma` on the
/// whole vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Logistic,
    Tanh,
    Softplus,
    AffineWrapped {
        base: Box<ActivationKind>,
        omega: Matrix,
        gamma: Vec<f64>,
        phi: Matrix,
        tau: Vec<f64>,
    },
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl ActivationKind {
    pub fn is_elementwise(&self) -> bool {
        !matches!(self, ActivationKind::AffineWrapped { .. })
    }

    /// The innermost elementwise map.
    pub fn base(&self) -> &ActivationKind {
        match self {
            ActivationKind::AffineWrapped { base, .. } => base.base(),
            other => other,
        }
    }

    fn scalar(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::Logistic => logistic(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Softplus => softplus(x),
            ActivationKind::AffineWrapped { .. } => unreachable!("wrapped activation is not elementwise"),
        }
    }

    fn scalar_derivative(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => 1.0,
            ActivationKind::Logistic => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Softplus => logistic(x),
            ActivationKind::AffineWrapped { .. } => unreachable!("wrapped activation is not elementwise"),
        }
    }

    /// Checks the dimension an activation acts on; elementwise maps accept any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ActivationKind::AffineWrapped { omega, .. } => Some(omega.rows()),
            _ => None,
        }
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::AffineWrapped {
                base,
                omega,
                gamma,
                phi,
                tau,
            } => {
                let mut inner = phi.matvec(z);
                for (u, t) in inner.iter_mut().zip(tau) {
                    *u += t;
                }
                let mut out = omega.matvec(&base.eval(&inner));
                for (o, g) in out.iter_mut().zip(gamma) {
                    *o += g;
                }
                out
            }
            _ => z.iter().map(|&x| self.scalar(x)).collect(),
        }
    }

    /// Directional derivative at `z` along `dz`.
    pub fn jvp(&self, z: &[f64], dz: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::AffineWrapped {
                base,
                omega,
                phi,
                tau,
                ..
            } => {
                let mut inner = phi.matvec(z);
                for (u, t) in inner.iter_mut().zip(tau) {
                    *u += t;
                }
                omega.matvec(&base.jvp(&inner, &phi.matvec(dz)))
            }
            _ => z
                .iter()
                .zip(dz)
                .map(|(&x, &d)| self.scalar_derivative(x) * d)
                .collect(),
        }
    }

    /// Transposed Jacobian at `z` applied to the cotangent `da`.
    pub fn vjp(&self, z: &[f64], da: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::AffineWrapped {
                base,
                omega,
                phi,
                tau,
                ..
            } => {
                let mut inner = phi.matvec(z);
                for (u, t) in inner.iter_mut().zip(tau) {
                    *u += t;
                }
                phi.matvec_t(&base.vjp(&inner, &omega.matvec_t(da)))
            }
            _ => z
                .iter()
                .zip(da)
                .map(|(&x, &d)| self.scalar_derivative(x) * d)
                .collect(),
        }
    }
}
