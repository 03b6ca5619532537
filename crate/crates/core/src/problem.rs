//! The simultaneous training problem: states at the collocation nodes and the
//! network parameters are decision variables, the collocation equations are
//! equality constraints, and the objective is the regularised MSE to the
//! observations.
//!
//! Decision vector layout: `z = [vec(Y*) row-major, theta]`, so the state of
//! dimension `k` at node `i` sits at `z[i * d + k]` and the parameters start
//! at `z[n_nodes * d]`.

use nalgebra::{DMatrix, DVector};

use crate::colloc::CollocationGrid;
use crate::error::{Error, Result};
use crate::neuralnet::Mlp;
use crate::nlp::Nlp;

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_THETA_BOUND: f64 = 100.0;
/// State bounds extend this many data ranges beyond the observed extremes.
pub const STATE_BOUND_RANGES: f64 = 3.0;

/// Elementwise box on the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((v, lo), hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, lo), hi)| *lo <= *v && *v <= *hi)
    }
}

/// State bounds `[min - 3 range, max + 3 range]` per state dimension (or
/// `c +- 1` for constant data) followed by `+-100` on every parameter.
pub fn default_bounds(y_obs: &DMatrix<f64>, n_nodes: usize, n_params: usize) -> Result<Bounds> {
    if y_obs.nrows() == 0 || y_obs.ncols() == 0 {
        return Err(Error::InvalidArgument("observations are empty".into()));
    }
    let d = y_obs.ncols();
    let per_dim: Vec<(f64, f64)> = (0..d)
        .map(|k| {
            let col = y_obs.column(k);
            let (lo, hi) = (col.min(), col.max());
            let range = hi - lo;
            if range > 0.0 {
                (lo - STATE_BOUND_RANGES * range, hi + STATE_BOUND_RANGES * range)
            } else {
                (lo - 1.0, hi + 1.0)
            }
        })
        .collect();
    let mut lower = Vec::with_capacity(n_nodes * d + n_params);
    let mut upper = Vec::with_capacity(n_nodes * d + n_params);
    for _ in 0..n_nodes {
        for &(lo, hi) in &per_dim {
            lower.push(lo);
            upper.push(hi);
        }
    }
    lower.extend(std::iter::repeat_n(-DEFAULT_THETA_BOUND, n_params));
    upper.extend(std::iter::repeat_n(DEFAULT_THETA_BOUND, n_params));
    Ok(Bounds { lower, upper })
}

/// Quadratic pull `(rho/2) ||theta - target||^2` added to the objective; ADMM
/// uses it with `target = consensus - dual / rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct Proximal {
    pub target: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub grid: CollocationGrid,
    /// Architecture only; the parameters live in the decision vector.
    pub net: Mlp,
    /// `n_nodes x d` observations aligned with the grid nodes.
    pub y_obs: DMatrix<f64>,
    pub lambda_reg: f64,
    /// When false only weights are penalised by the ridge term.
    pub regularize_biases: bool,
    pub bounds: Bounds,
    pub proximal: Option<Proximal>,
    reg_mask: Vec<f64>,
}

fn bias_mask(net: &Mlp, regularize_biases: bool) -> Vec<f64> {
    let mut mask = Vec::with_capacity(net.n_params());
    for w in net.layer_sizes.windows(2) {
        mask.extend(std::iter::repeat_n(1.0, w[0] * w[1]));
        mask.extend(std::iter::repeat_n(if regularize_biases { 1.0 } else { 0.0 }, w[1]));
    }
    mask
}

impl NlpProblem {
    /// Problem with default bounds derived from `y_obs`.
    pub fn new(grid: CollocationGrid, net: Mlp, y_obs: DMatrix<f64>, lambda_reg: f64) -> Result<Self> {
        if y_obs.nrows() != grid.n() {
            return Err(Error::DimensionMismatch {
                expected: grid.n(),
                got: y_obs.nrows(),
            });
        }
        if y_obs.ncols() != net.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: net.state_dim(),
                got: y_obs.ncols(),
            });
        }
        if !(lambda_reg >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda_reg}")));
        }
        let bounds = default_bounds(&y_obs, grid.n(), net.n_params())?;
        let reg_mask = bias_mask(&net, true);
        Ok(Self {
            grid,
            net,
            y_obs,
            lambda_reg,
            regularize_biases: true,
            bounds,
            proximal: None,
            reg_mask,
        })
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Result<Self> {
        if bounds.len() != self.n_vars() {
            return Err(Error::DimensionMismatch {
                expected: self.n_vars(),
                got: bounds.len(),
            });
        }
        if bounds.lower.iter().zip(&bounds.upper).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidArgument("lower bound exceeds upper bound".into()));
        }
        self.bounds = bounds;
        Ok(self)
    }

    pub fn with_bias_regularization(mut self, on: bool) -> Self {
        self.regularize_biases = on;
        self.reg_mask = bias_mask(&self.net, on);
        self
    }

    pub fn with_proximal(mut self, proximal: Option<Proximal>) -> Result<Self> {
        if let Some(p) = &proximal {
            if p.target.len() != self.net.n_params() {
                return Err(Error::DimensionMismatch {
                    expected: self.net.n_params(),
                    got: p.target.len(),
                });
            }
        }
        self.proximal = proximal;
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n()
    }

    pub fn dim(&self) -> usize {
        self.net.state_dim()
    }

    pub fn n_states(&self) -> usize {
        self.n_nodes() * self.dim()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn pack(&self, states: &DMatrix<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        if states.shape() != (self.n_nodes(), self.dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.n_states(),
                got: states.len(),
            });
        }
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        let mut z = Vec::with_capacity(self.n_states() + theta.len());
        for i in 0..self.n_nodes() {
            z.extend(states.row(i).iter());
        }
        z.extend_from_slice(theta);
        Ok(DVector::from_vec(z))
    }

    /// Splits `z` into the `n_nodes x d` state matrix and the parameters.
    pub fn unpack(&self, z: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let ns = self.n_states();
        let states = DMatrix::from_row_slice(self.n_nodes(), self.dim(), &z[..ns]);
        (states, z[ns..].to_vec())
    }

    pub fn theta<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[self.n_states()..]
    }

    /// `(1/N) ||Y* - Y_obs||_F^2 + lambda ||theta||^2` (plus the proximal
    /// term when present).
    pub fn objective(&self, z: &[f64]) -> f64 {
        let (n, d) = (self.n_nodes(), self.dim());
        let mut fit = 0.0;
        for i in 0..n {
            for k in 0..d {
                let r = z[i * d + k] - self.y_obs[(i, k)];
                fit += r * r;
            }
        }
        let theta = self.theta(z);
        let reg: f64 = theta
            .iter()
            .zip(&self.reg_mask)
            .map(|(t, m)| m * t * t)
            .sum();
        let mut value = fit / n as f64 + self.lambda_reg * reg;
        if let Some(p) = &self.proximal {
            let dist: f64 = theta
                .iter()
                .zip(&p.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            value += 0.5 * p.rho * dist;
        }
        value
    }

    /// Data-fit part of the objective alone, `(1/N) ||Y* - Y_obs||_F^2`.
    pub fn state_mse(&self, z: &[f64]) -> f64 {
        let (n, d) = (self.n_nodes(), self.dim());
        let mut fit = 0.0;
        for i in 0..n {
            for k in 0..d {
                let r = z[i * d + k] - self.y_obs[(i, k)];
                fit += r * r;
            }
        }
        fit / n as f64
    }

    pub fn objective_gradient(&self, z: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        self.objective_gradient_into(z, g.as_mut_slice());
        g
    }

    fn objective_gradient_into(&self, z: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n_nodes(), self.dim());
        let scale = 2.0 / n as f64;
        for i in 0..n {
            for k in 0..d {
                out[i * d + k] = scale * (z[i * d + k] - self.y_obs[(i, k)]);
            }
        }
        let ns = self.n_states();
        for (j, (t, m)) in z[ns..].iter().zip(&self.reg_mask).enumerate() {
            out[ns + j] = 2.0 * self.lambda_reg * m * t;
        }
        if let Some(p) = &self.proximal {
            for (j, (t, c)) in z[ns..].iter().zip(&p.target).enumerate() {
                out[ns + j] += p.rho * (t - c);
            }
        }
    }

    /// Collocation residuals `vec(D Y* - F_theta(Y*, nodes))`, row-major.
    pub fn constraints(&self, z: &[f64]) -> DVector<f64> {
        let mut c = DVector::zeros(self.n_states());
        self.constraints_into(z, c.as_mut_slice());
        c
    }

    fn constraints_into(&self, z: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n_nodes(), self.dim());
        let ns = self.n_states();
        let theta = &z[ns..];
        let dmat = &self.grid.diff_matrix;
        for i in 0..n {
            let y = &z[i * d..(i + 1) * d];
            let f = self
                .net
                .forward_with(theta, y, self.grid.nodes_time[i])
                .expect("problem dimensions are consistent");
            for k in 0..d {
                let mut dy = 0.0;
                for j in 0..n {
                    dy += dmat[(i, j)] * z[j * d + k];
                }
                out[i * d + k] = dy - f[k];
            }
        }
    }

    /// `J(z)^T v` without forming `J`.
    fn jacobian_transpose_product_into(&self, z: &[f64], v: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n_nodes(), self.dim());
        let ns = self.n_states();
        let theta = &z[ns..];
        let dmat = &self.grid.diff_matrix;
        out.fill(0.0);
        // D^T V for the state block
        for j in 0..n {
            for k in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += dmat[(i, j)] * v[i * d + k];
                }
                out[j * d + k] = s;
            }
        }
        let mut gy = vec![0.0; d];
        let mut gtheta = vec![0.0; theta.len()];
        for i in 0..n {
            let vi = &v[i * d..(i + 1) * d];
            if vi.iter().all(|x| *x == 0.0) {
                continue;
            }
            self.net
                .vjp_accumulate(
                    theta,
                    &z[i * d..(i + 1) * d],
                    self.grid.nodes_time[i],
                    vi,
                    &mut gy,
                    &mut gtheta,
                )
                .expect("problem dimensions are consistent");
            for k in 0..d {
                out[i * d + k] -= gy[k];
            }
        }
        for (o, g) in out[ns..].iter_mut().zip(&gtheta) {
            *o = -g;
        }
    }

    /// Gradient of `sum_i w_i . F(y_i, t_i; theta)` with respect to `z`.
    fn weighted_net_gradient(&self, z: &[f64], w: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n_nodes(), self.dim());
        let ns = self.n_states();
        let (states, theta) = z.split_at(ns);
        out.fill(0.0);
        let (gs, gtheta) = out.split_at_mut(ns);
        for i in 0..n {
            self.net
                .vjp_accumulate(
                    theta,
                    &states[i * d..(i + 1) * d],
                    self.grid.nodes_time[i],
                    &w[i * d..(i + 1) * d],
                    &mut gs[i * d..(i + 1) * d],
                    gtheta,
                )
                .expect("problem dimensions are consistent");
        }
    }

    /// `sum_i w_i hess c_i(z)` by forward differences of the weighted
    /// network gradient. Only the network term is nonlinear. States at
    /// different nodes never interact, so one perturbation per state
    /// component covers every node at once.
    pub fn constraint_curvature(&self, z: &[f64], w: &[f64]) -> DMatrix<f64> {
        let (n, d) = (self.n_nodes(), self.dim());
        let ns = self.n_states();
        let nv = z.len();
        let mut base = vec![0.0; nv];
        self.weighted_net_gradient(z, w, &mut base);
        let mut h = DMatrix::zeros(nv, nv);
        let mut zp = z.to_vec();
        let mut g = vec![0.0; nv];
        let step = |v: f64| 1e-7 * v.abs().max(1.0);
        for k in 0..d {
            for i in 0..n {
                zp[i * d + k] += step(z[i * d + k]);
            }
            self.weighted_net_gradient(&zp, w, &mut g);
            for i in 0..n {
                let eps = zp[i * d + k] - z[i * d + k];
                for r in 0..d {
                    h[(i * d + r, i * d + k)] = -(g[i * d + r] - base[i * d + r]) / eps;
                }
                zp[i * d + k] = z[i * d + k];
            }
        }
        for p in ns..nv {
            zp[p] += step(z[p]);
            let eps = zp[p] - z[p];
            self.weighted_net_gradient(&zp, w, &mut g);
            for r in 0..nv {
                h[(r, p)] = -(g[r] - base[r]) / eps;
            }
            zp[p] = z[p];
        }
        // the state-parameter block is taken from the parameter columns
        for r in 0..ns {
            for p in ns..nv {
                h[(p, r)] = h[(r, p)];
            }
        }
        for i in 0..n {
            for a in 0..d {
                for b in 0..a {
                    let m = 0.5 * (h[(i * d + a, i * d + b)] + h[(i * d + b, i * d + a)]);
                    h[(i * d + a, i * d + b)] = m;
                    h[(i * d + b, i * d + a)] = m;
                }
            }
        }
        for a in ns..nv {
            for b in ns..a {
                let m = 0.5 * (h[(a, b)] + h[(b, a)]);
                h[(a, b)] = m;
                h[(b, a)] = m;
            }
        }
        h
    }

    /// Dense constraint Jacobian, `(n_nodes d) x len(z)`.
    pub fn constraint_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let (n, d) = (self.n_nodes(), self.dim());
        let ns = self.n_states();
        let theta = &z[ns..];
        let mut jac = DMatrix::zeros(ns, z.len());
        for i in 0..n {
            for j in 0..n {
                let dij = self.grid.diff_matrix[(i, j)];
                for k in 0..d {
                    jac[(i * d + k, j * d + k)] = dij;
                }
            }
            let y = &z[i * d..(i + 1) * d];
            let t = self.grid.nodes_time[i];
            let jy = self.net.jacobian_input_with(theta, y, t).expect("consistent dims");
            let jt = self.net.jacobian_params_with(theta, y, t).expect("consistent dims");
            for k in 0..d {
                for l in 0..d {
                    jac[(i * d + k, i * d + l)] -= jy[(k, l)];
                }
                for p in 0..theta.len() {
                    jac[(i * d + k, ns + p)] = -jt[(k, p)];
                }
            }
        }
        jac
    }
}

impl Nlp for NlpProblem {
    fn n_vars(&self) -> usize {
        self.n_states() + self.n_params()
    }

    fn n_constraints(&self) -> usize {
        self.n_states()
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn objective(&self, z: &[f64]) -> f64 {
        NlpProblem::objective(self, z)
    }

    fn objective_gradient(&self, z: &[f64], out: &mut [f64]) {
        self.objective_gradient_into(z, out)
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        self.constraints_into(z, out)
    }

    fn jacobian_transpose_product(&self, z: &[f64], v: &[f64], out: &mut [f64]) {
        self.jacobian_transpose_product_into(z, v, out)
    }

    fn constraint_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        NlpProblem::constraint_jacobian(self, z)
    }

    fn constraint_curvature(&self, z: &[f64], w: &[f64]) -> Option<DMatrix<f64>> {
        Some(NlpProblem::constraint_curvature(self, z, w))
    }

    fn objective_hessian(&self, _z: &[f64]) -> DMatrix<f64> {
        let ns = self.n_states();
        let mut diag = vec![2.0 / self.n_nodes() as f64; ns + self.n_params()];
        let rho = self.proximal.as_ref().map_or(0.0, |p| p.rho);
        for (j, m) in self.reg_mask.iter().enumerate() {
            diag[ns + j] = 2.0 * self.lambda_reg * m + rho;
        }
        DMatrix::from_diagonal(&DVector::from_vec(diag))
    }
}
