//! Chebyshev collocation grids with barycentric Lagrange weights and the
//! associated differentiation matrix.
//!
//! The grid stores its nodes in ascending time order. Weights and the
//! differentiation matrix are computed directly on the time-domain nodes, so
//! `D * samples` is the derivative with respect to time with no extra
//! chain-rule factor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Above this size the weight products are rescaled per factor to stay
/// inside the floating point range.
const RESCALE_THRESHOLD: usize = 64;

/// Relative tolerance under which `t` is treated as sitting on a node.
const NODE_COINCIDENCE_RTOL: f64 = 1e-14;

/// Chebyshev points of the second kind, `cos(i*pi/(n-1))`, in descending
/// order (1 down to -1).
pub fn chebyshev_nodes(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "chebyshev grid needs at least 2 nodes, got {n}"
        )));
    }
    let m = (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            // exact endpoints and midpoint; cos() leaves ~1e-17 residue there
            if i == 0 {
                1.0
            } else if i == n - 1 {
                -1.0
            } else if 2 * i == n - 1 {
                0.0
            } else {
                (i as f64 * PI / m).cos()
            }
        })
        .collect())
}

fn check_distinct(nodes: &[f64]) -> Result<()> {
    if nodes.len() < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 2 nodes, got {}",
            nodes.len()
        )));
    }
    for (i, a) in nodes.iter().enumerate() {
        if !a.is_finite() {
            return Err(Error::DegenerateGrid(format!("node {i} is not finite")));
        }
        for (k, b) in nodes.iter().enumerate().skip(i + 1) {
            if a == b {
                return Err(Error::DegenerateGrid(format!(
                    "nodes {i} and {k} coincide at {a}"
                )));
            }
        }
    }
    Ok(())
}

/// Barycentric weights `w_i = 1 / prod_{k != i} (x_i - x_k)`.
///
/// For more than 64 nodes every factor is divided by the half-width of the
/// node span, which changes the weights by a common factor only.
pub fn barycentric_weights(nodes: &[f64]) -> Result<Vec<f64>> {
    check_distinct(nodes)?;
    let n = nodes.len();
    let scale = if n > RESCALE_THRESHOLD {
        let (lo, hi) = nodes
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        0.5 * (hi - lo)
    } else {
        1.0
    };
    Ok((0..n)
        .map(|i| {
            let prod = (0..n)
                .filter(|&k| k != i)
                .fold(1.0, |acc, k| acc * ((nodes[i] - nodes[k]) / scale));
            1.0 / prod
        })
        .collect())
}

/// Differentiation matrix `D_ij = l_j'(x_i)` from the barycentric formula:
/// off-diagonal `(w_j / w_i) / (x_i - x_j)`, diagonal equal to minus the sum
/// of the off-diagonal entries of its row.
pub fn differentiation_matrix(nodes: &[f64], weights: &[f64]) -> Result<DMatrix<f64>> {
    check_distinct(nodes)?;
    let n = nodes.len();
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| *w == 0.0 || !w.is_finite()) {
        return Err(Error::DegenerateGrid(
            "barycentric weights must be finite and nonzero".into(),
        ));
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if i != j {
                let v = (weights[j] / weights[i]) / (nodes[i] - nodes[j]);
                d[(i, j)] = v;
                row_sum += v;
            }
        }
        d[(i, i)] = -row_sum;
    }
    Ok(d)
}

/// Collocation grid on `[t0, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationGrid {
    /// Reference nodes in `[-1, 1]`, ascending.
    pub nodes_ref: Vec<f64>,
    /// Time-domain nodes, ascending from `t0` to `t_end`.
    pub nodes_time: Vec<f64>,
    pub bary_weights: Vec<f64>,
    pub diff_matrix: DMatrix<f64>,
    pub t0: f64,
    pub t_end: f64,
}

/// Result of evaluating the interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub values: DVector<f64>,
    /// `t` lies outside `[t0, t_end]`.
    pub extrapolated: bool,
}

impl CollocationGrid {
    /// Chebyshev grid with `n` nodes mapped affinely onto `[t0, t_end]`.
    pub fn build(n: usize, t0: f64, t_end: f64) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::InvalidInterval { t0, t_end });
        }
        let mut nodes_ref = chebyshev_nodes(n)?;
        nodes_ref.reverse();
        let half = 0.5 * (t_end - t0);
        let mid = 0.5 * (t0 + t_end);
        let mut nodes_time: Vec<f64> = nodes_ref.iter().map(|x| mid + half * x).collect();
        nodes_time[0] = t0;
        nodes_time[n - 1] = t_end;
        let bary_weights = barycentric_weights(&nodes_time)?;
        let diff_matrix = differentiation_matrix(&nodes_time, &bary_weights)?;
        Ok(Self {
            nodes_ref,
            nodes_time,
            bary_weights,
            diff_matrix,
            t0,
            t_end,
        })
    }

    pub fn n(&self) -> usize {
        self.nodes_time.len()
    }

    /// Evaluates the interpolant through the rows of `coeffs` (one row per
    /// node) at time `t` with the second barycentric form.
    pub fn interp_eval(&self, coeffs: &DMatrix<f64>, t: f64) -> Result<Interpolated> {
        let n = self.n();
        if coeffs.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: coeffs.nrows(),
            });
        }
        let extrapolated = t < self.t0 || t > self.t_end;
        for (i, &x) in self.nodes_time.iter().enumerate() {
            if (t - x).abs() <= NODE_COINCIDENCE_RTOL * x.abs().max(t.abs()) || t == x {
                return Ok(Interpolated {
                    values: coeffs.row(i).transpose(),
                    extrapolated,
                });
            }
        }
        let mut num = DVector::zeros(coeffs.ncols());
        let mut den = 0.0;
        for (i, (&x, &w)) in self.nodes_time.iter().zip(&self.bary_weights).enumerate() {
            let c = w / (t - x);
            den += c;
            for k in 0..coeffs.ncols() {
                num[k] += c * coeffs[(i, k)];
            }
        }
        Ok(Interpolated {
            values: num / den,
            extrapolated,
        })
    }
}
