//! Named scalar fields for payoffs, with closed-form derivatives.
//!
//! The problem format only admits fields whose first and second derivatives
//! are available exactly; derivative estimators and the quasiderivative
//! accumulators rely on them.

use crate::linalg::{dot, Mat};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ScalarField {
    Zero,
    One,
    /// c0 + linear . x + x^T quad x
    Quadratic {
        c0: f64,
        linear: Vec<f64>,
        quad: Vec<Vec<f64>>,
    },
}

impl ScalarField {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarField::Zero => 0.0,
            ScalarField::One => 1.0,
            ScalarField::Quadratic { c0, linear, quad } => {
                let mut v = *c0 + dot(linear, x);
                for (i, row) in quad.iter().enumerate() {
                    for (j, q) in row.iter().enumerate() {
                        v += q * x[i] * x[j];
                    }
                }
                v
            }
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ScalarField::Zero | ScalarField::One => vec![0.0; x.len()],
            ScalarField::Quadratic { linear, quad, .. } => {
                let mut g = linear.clone();
                for (i, row) in quad.iter().enumerate() {
                    for (j, q) in row.iter().enumerate() {
                        g[i] += q * x[j];
                        g[j] += q * x[i];
                    }
                }
                g
            }
        }
    }

    pub fn hess(&self, x: &[f64]) -> Mat {
        let d = x.len();
        match self {
            ScalarField::Zero | ScalarField::One => Mat::zeros(d, d),
            ScalarField::Quadratic { quad, .. } => {
                let mut h = Mat::zeros(d, d);
                for (i, row) in quad.iter().enumerate() {
                    for (j, q) in row.iter().enumerate() {
                        h.set(i, j, h.get(i, j) + q);
                        h.set(j, i, h.get(j, i) + q);
                    }
                }
                h
            }
        }
    }

    /// Directional derivative f_(xi).
    pub fn dir1(&self, x: &[f64], xi: &[f64]) -> f64 {
        dot(&self.grad(x), xi)
    }

    /// Second directional derivative f_(xi)(xi).
    pub fn dir2(&self, x: &[f64], xi: &[f64]) -> f64 {
        let h = self.hess(x);
        dot(&h.matvec(xi), xi)
    }

    /// Sup of |f| over a box, exact for these field kinds up to corner sampling.
    pub fn sup_abs_on_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match self {
            ScalarField::Zero => 0.0,
            ScalarField::One => 1.0,
            ScalarField::Quadratic { .. } => {
                // quadratic attains its max over a box at a corner or at the
                // unconstrained stationary point clamped to the box; corner
                // sweep plus a midpoint sample is enough for a bound here
                let d = lo.len();
                let mut best: f64 = 0.0;
                let corners = 1usize << d;
                for c in 0..corners {
                    let x: Vec<f64> =
                        (0..d).map(|i| if c >> i & 1 == 1 { hi[i] } else { lo[i] }).collect();
                    best = best.max(self.eval(&x).abs());
                }
                let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
                best.max(self.eval(&mid).abs())
            }
        }
    }

    /// Lipschitz bound over a box (used for bias budgets).
    pub fn lipschitz_on_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match self {
            ScalarField::Zero | ScalarField::One => 0.0,
            ScalarField::Quadratic { .. } => {
                let d = lo.len();
                let mut best: f64 = 0.0;
                let corners = 1usize << d;
                for c in 0..corners {
                    let x: Vec<f64> =
                        (0..d).map(|i| if c >> i & 1 == 1 { hi[i] } else { lo[i] }).collect();
                    best = best.max(crate::linalg::norm(&self.grad(&x)));
                }
                best
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivatives() {
        // f = 1 + 2 x0 + x0^2 + 3 x0 x1
        let f = ScalarField::Quadratic {
            c0: 1.0,
            linear: vec![2.0, 0.0],
            quad: vec![vec![1.0, 3.0], vec![0.0, 0.0]],
        };
        let x = [0.5, -1.0];
        assert!((f.eval(&x) - (1.0 + 1.0 + 0.25 - 1.5)).abs() < 1e-14);
        let g = f.grad(&x);
        assert!((g[0] - (2.0 + 1.0 - 3.0)).abs() < 1e-14);
        assert!((g[1] - 1.5).abs() < 1e-14);
        let xi = [1.0, 1.0];
        assert!((f.dir2(&x, &xi) - (2.0 + 2.0 * 3.0)).abs() < 1e-14);
    }
}
