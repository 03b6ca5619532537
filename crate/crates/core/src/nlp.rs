//! Box-bounded, equality-constrained NLP solver.
//!
//! Outer loop: augmented Lagrangian
//! `L_A(z; mu, rho) = f(z) + mu^T c(z) + (rho/2) ||c(z)||^2`, with the
//! first-order multiplier update `mu <- mu + rho c(z)` after every outer
//! iteration and a tenfold penalty increase whenever the constraint violation
//! fails to shrink by 4x. Inner loop: limited-memory BFGS on the free
//! variables with a projected Armijo backtracking search, so every iterate
//! lies inside the bounds exactly.

use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::problem::Bounds;

/// Callbacks the solver needs. `J` below is the constraint Jacobian.
pub trait Nlp {
    fn n_vars(&self) -> usize;

    fn n_constraints(&self) -> usize;

    fn bounds(&self) -> &Bounds;

    fn objective(&self, z: &[f64]) -> f64;

    fn objective_gradient(&self, z: &[f64], out: &mut [f64]);

    fn constraints(&self, z: &[f64], out: &mut [f64]);

    /// `out = J(z)^T v`.
    fn jacobian_transpose_product(&self, z: &[f64], v: &[f64], out: &mut [f64]);

    /// Dense `J(z)`, `n_constraints x n_vars`.
    fn constraint_jacobian(&self, z: &[f64]) -> DMatrix<f64>;

    /// Hessian of the objective, or a positive semidefinite approximation.
    fn objective_hessian(&self, z: &[f64]) -> DMatrix<f64>;

    /// `sum_i w_i hess c_i(z)`. Problems that cannot supply it leave the
    /// Gauss-Newton model without the second-order constraint term.
    fn constraint_curvature(&self, _z: &[f64], _w: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

const PENALTY_CAP: f64 = 1e8;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const SPOT_CHECK_PROBES: usize = 3;
const SPOT_CHECK_RTOL: f64 = 1e-3;
const SNAPSHOT_CAPACITY: usize = 4096;

/// Minimiser used for each augmented-Lagrangian subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSolver {
    /// Projected Levenberg-Marquardt on the Gauss-Newton model
    /// `H = hess f + rho J^T J`.
    GaussNewton,
    /// As `GaussNewton` plus the constraint curvature `sum w_i hess c_i`.
    Newton,
    /// Projected limited-memory BFGS with Armijo backtracking.
    Lbfgs,
}

impl InnerSolver {
    pub fn as_str(self) -> &'static str {
        match self {
            InnerSolver::GaussNewton => "gauss-newton",
            InnerSolver::Newton => "newton",
            InnerSolver::Lbfgs => "lbfgs",
        }
    }
}

impl std::str::FromStr for InnerSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gauss-newton" | "gn" => Ok(InnerSolver::GaussNewton),
            "newton" => Ok(InnerSolver::Newton),
            "lbfgs" => Ok(InnerSolver::Lbfgs),
            other => Err(Error::parse("inner solver", format!("unknown inner solver '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub inner_solver: InnerSolver,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Target on `max |c(z)|`.
    pub constraint_tol: f64,
    /// Target on the infinity norm of the projected Lagrangian gradient.
    pub opt_tol: f64,
    pub rho0: f64,
    pub rho_growth: f64,
    /// Wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    pub lbfgs_memory: usize,
    /// Seed of the startup Jacobian spot check.
    pub seed: u64,
    pub check_jacobian: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_solver: InnerSolver::GaussNewton,
            max_outer_iters: 50,
            max_inner_iters: 200,
            constraint_tol: 1e-6,
            opt_tol: 1e-6,
            rho0: 10.0,
            rho_growth: 10.0,
            time_limit: None,
            lbfgs_memory: 10,
            seed: 0,
            check_jacobian: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.constraint_tol > 0.0 && self.opt_tol > 0.0) {
            return bad("solver tolerances must be positive");
        }
        if !(self.rho_growth > 1.0) {
            return bad("rho_growth must exceed 1");
        }
        if !(self.rho0 > 0.0) {
            return bad("rho0 must be positive");
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be at least 1");
        }
        if matches!(self.time_limit, Some(t) if !(t > 0.0)) {
            return bad("time_limit must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    FeasibleSuboptimal,
    IterationLimit,
    TimeLimit,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::FeasibleSuboptimal => "feasible-but-suboptimal",
            SolveStatus::IterationLimit => "iteration-limit",
            SolveStatus::TimeLimit => "time-limit",
            SolveStatus::NumericalFailure => "numerical-failure",
        }
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub outer_iter: usize,
    pub elapsed_s: f64,
    pub objective: f64,
    pub max_violation: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub z_final: Vec<f64>,
    pub objective_final: f64,
    pub max_constraint_violation: f64,
    /// Infinity norm of the projected Lagrangian gradient at `z_final`.
    pub projected_gradient: f64,
    pub multipliers: Vec<f64>,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    pub status: SolveStatus,
    pub trace: Vec<TraceRecord>,
}

impl SolveReport {
    /// Trace as CSV: `outer_iter,elapsed_s,objective,max_violation,penalty`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("outer_iter,elapsed_s,objective,max_violation,penalty\n");
        for r in &self.trace {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.outer_iter,
                crate::fmt_f64(r.elapsed_s),
                crate::fmt_f64(r.objective),
                crate::fmt_f64(r.max_violation),
                crate::fmt_f64(r.penalty)
            )
            .unwrap();
        }
        s
    }
}

/// Decision vector captured during a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub elapsed_s: f64,
    pub z: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// `|| P(z - g) - z ||_inf` over the box.
fn projected_gradient_norm(z: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    z.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .fold(0.0f64, |m, ((zi, gi), (lo, hi))| {
            m.max(((zi - gi).clamp(*lo, *hi) - zi).abs())
        })
}

/// Augmented Lagrangian evaluator with reusable buffers.
struct Merit<'a, P: Nlp + ?Sized> {
    problem: &'a P,
    mu: Vec<f64>,
    rho: f64,
    c: Vec<f64>,
    weights: Vec<f64>,
    jtv: Vec<f64>,
    evals: usize,
}

impl<'a, P: Nlp + ?Sized> Merit<'a, P> {
    fn new(problem: &'a P, rho: f64) -> Self {
        let m = problem.n_constraints();
        Self {
            problem,
            mu: vec![0.0; m],
            rho,
            c: vec![0.0; m],
            weights: vec![0.0; m],
            jtv: vec![0.0; problem.n_vars()],
            evals: 0,
        }
    }

    /// Value at `z`; leaves `c(z)` in `self.c`.
    fn value(&mut self, z: &[f64]) -> f64 {
        self.evals += 1;
        let f = self.problem.objective(z);
        self.problem.constraints(z, &mut self.c);
        let lin = dot(&self.mu, &self.c);
        let quad = dot(&self.c, &self.c);
        f + lin + 0.5 * self.rho * quad
    }

    /// Value and gradient at `z`.
    fn value_grad(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.value(z);
        self.problem.objective_gradient(z, grad);
        for ((w, m), c) in self.weights.iter_mut().zip(&self.mu).zip(&self.c) {
            *w = m + self.rho * c;
        }
        self.problem
            .jacobian_transpose_product(z, &self.weights, &mut self.jtv);
        for (g, j) in grad.iter_mut().zip(&self.jtv) {
            *g += j;
        }
        v
    }
}

/// Limited-memory inverse Hessian approximation.
struct Lbfgs {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            pairs: VecDeque::with_capacity(memory),
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// `-H g` restricted to the free variables (`free[i] == false` entries
    /// are held at zero).
    fn direction(&self, g: &[f64], free: &[bool]) -> Vec<f64> {
        let mask = |v: &mut [f64]| {
            for (x, f) in v.iter_mut().zip(free) {
                if !f {
                    *x = 0.0;
                }
            }
        };
        let mut q = g.to_vec();
        mask(&mut q);
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, r) in self.pairs.iter().rev() {
            let a = r * masked_dot(s, &q, free);
            for ((qi, yi), f) in q.iter_mut().zip(y).zip(free) {
                if *f {
                    *qi -= a * yi;
                }
            }
            alphas.push(a);
        }
        let gamma = match self.pairs.back() {
            Some((s, y, _)) => {
                let sy = masked_dot(s, y, free);
                let yy = masked_dot(y, y, free);
                if sy > 0.0 && yy > 0.0 {
                    sy / yy
                } else {
                    1.0
                }
            }
            None => 1.0 / inf_norm(&q).max(1.0),
        };
        for x in q.iter_mut() {
            *x *= gamma;
        }
        for ((s, y, r), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = r * masked_dot(y, &q, free);
            for ((qi, si), f) in q.iter_mut().zip(s).zip(free) {
                if *f {
                    *qi += (a - b) * si;
                }
            }
        }
        for x in q.iter_mut() {
            *x = -*x;
        }
        mask(&mut q);
        q
    }
}

fn masked_dot(a: &[f64], b: &[f64], free: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, f)| **f)
        .map(|((x, y), _)| x * y)
        .sum()
}

enum InnerOutcome {
    Converged,
    IterationLimit,
    Stalled,
    TimeLimit,
    NonFinite,
}

struct Clock {
    start: Instant,
    limit: Option<f64>,
    cadence: Option<f64>,
    next_snapshot: f64,
    snapshots: VecDeque<Snapshot>,
}

impl Clock {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn out_of_time(&self) -> bool {
        matches!(self.limit, Some(l) if self.elapsed() >= l)
    }

    fn maybe_snapshot(&mut self, z: &[f64]) {
        let Some(cadence) = self.cadence else { return };
        let now = self.elapsed();
        if now >= self.next_snapshot {
            if self.snapshots.len() == SNAPSHOT_CAPACITY {
                self.snapshots.pop_front();
            }
            self.snapshots.push_back(Snapshot {
                elapsed_s: now,
                z: z.to_vec(),
            });
            while self.next_snapshot <= now {
                self.next_snapshot += cadence;
            }
        }
    }
}

/// Projected L-BFGS on the augmented Lagrangian. `z`, `grad` and `value`
/// are updated in place and always describe the last accepted iterate.
#[allow(clippy::too_many_arguments)]
fn minimize_inner<P: Nlp + ?Sized>(
    merit: &mut Merit<'_, P>,
    bounds: &Bounds,
    lbfgs: &mut Lbfgs,
    z: &mut Vec<f64>,
    grad: &mut Vec<f64>,
    value: &mut f64,
    tol: f64,
    max_iters: usize,
    clock: &mut Clock,
    iters: &mut usize,
) -> InnerOutcome {
    let n = z.len();
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut free = vec![true; n];
    for _ in 0..max_iters {
        if projected_gradient_norm(z, grad, bounds) <= tol {
            return InnerOutcome::Converged;
        }
        if clock.out_of_time() {
            return InnerOutcome::TimeLimit;
        }
        for i in 0..n {
            let at_lo = z[i] <= bounds.lower[i] && grad[i] > 0.0;
            let at_hi = z[i] >= bounds.upper[i] && grad[i] < 0.0;
            free[i] = !(at_lo || at_hi);
        }
        let mut dir = lbfgs.direction(grad, &free);
        if !(dot(&dir, grad) < 0.0) {
            lbfgs.clear();
            dir = lbfgs.direction(grad, &free);
        }
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = (z[i] + step * dir[i]).clamp(bounds.lower[i], bounds.upper[i]);
            }
            let decrease: f64 = (0..n).map(|i| grad[i] * (trial[i] - z[i])).sum();
            let v = merit.value_grad(&trial, &mut trial_grad);
            if v.is_finite() && all_finite(&trial_grad) && v <= *value + ARMIJO_C1 * decrease {
                accepted = true;
                let s: Vec<f64> = (0..n).map(|i| trial[i] - z[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| trial_grad[i] - grad[i]).collect();
                lbfgs.push(s, y);
                std::mem::swap(z, &mut trial);
                std::mem::swap(grad, &mut trial_grad);
                *value = v;
                break;
            }
            step *= 0.5;
        }
        *iters += 1;
        clock.maybe_snapshot(z);
        if !accepted {
            if lbfgs.pairs.is_empty() {
                return if value.is_finite() {
                    InnerOutcome::Stalled
                } else {
                    InnerOutcome::NonFinite
                };
            }
            lbfgs.clear();
        }
    }
    if projected_gradient_norm(z, grad, bounds) <= tol {
        InnerOutcome::Converged
    } else {
        InnerOutcome::IterationLimit
    }
}

/// Levenberg-Marquardt damping state, carried across subproblems.
struct Damping {
    lambda: f64,
    nu: f64,
}

impl Damping {
    fn new() -> Self {
        Self {
            lambda: 1e-3,
            nu: 2.0,
        }
    }

    fn reject(&mut self) {
        self.lambda *= self.nu;
        self.nu *= 2.0;
    }

    fn accept(&mut self, ratio: f64) {
        self.lambda *= (1.0 - (2.0 * ratio - 1.0).powi(3)).max(1.0 / 3.0);
        self.lambda = self.lambda.max(1e-12);
        self.nu = 2.0;
    }
}

const MAX_DAMPING: f64 = 1e16;

/// Projected Levenberg-Marquardt on the augmented Lagrangian using the
/// curvature model `hess f + rho J^T J` restricted to the free variables.
/// Damping is relative to the model diagonal.
#[allow(clippy::too_many_arguments)]
fn minimize_inner_gn<P: Nlp + ?Sized>(
    merit: &mut Merit<'_, P>,
    curvature: bool,
    bounds: &Bounds,
    damping: &mut Damping,
    z: &mut Vec<f64>,
    grad: &mut Vec<f64>,
    value: &mut f64,
    tol: f64,
    max_iters: usize,
    clock: &mut Clock,
    iters: &mut usize,
) -> InnerOutcome {
    let n = z.len();
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    for _ in 0..max_iters {
        if projected_gradient_norm(z, grad, bounds) <= tol {
            return InnerOutcome::Converged;
        }
        if clock.out_of_time() {
            return InnerOutcome::TimeLimit;
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = z[i] <= bounds.lower[i] && grad[i] > 0.0;
                let at_hi = z[i] >= bounds.upper[i] && grad[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let jac = merit.problem.constraint_jacobian(z);
        let mut model = merit.problem.objective_hessian(z);
        if jac.nrows() > 0 {
            // transpose first: the gemm path is much faster than tr_mul
            let jt = jac.transpose();
            model += (&jt * &jac) * merit.rho;
        }
        // damping is scaled by the convex part of the model
        let scale: Vec<f64> = free.iter().map(|&i| model[(i, i)]).collect();
        if curvature && jac.nrows() > 0 {
            merit.problem.constraints(z, &mut merit.c);
            let w: Vec<f64> = merit.mu.iter().zip(&merit.c).map(|(m, c)| m + merit.rho * c).collect();
            if let Some(curv) = merit.problem.constraint_curvature(z, &w) {
                model += curv;
            }
        }
        if model.iter().any(|v| !v.is_finite()) {
            return InnerOutcome::NonFinite;
        }
        let reduced = model.select_rows(&free).select_columns(&free);
        let diag_max = scale.iter().fold(0.0f64, |m, v| m.max(*v));
        let floor = 1e-10 * diag_max.max(1e-10);
        let rhs = nalgebra::DVector::from_iterator(free.len(), free.iter().map(|&i| -grad[i]));
        let mut accepted = false;
        while damping.lambda < MAX_DAMPING {
            let mut system = reduced.clone();
            for i in 0..free.len() {
                system[(i, i)] += damping.lambda * scale[i].max(floor);
            }
            let Some(chol) = system.cholesky() else {
                damping.reject();
                continue;
            };
            let p = chol.solve(&rhs);
            trial.copy_from_slice(z);
            for (k, &i) in free.iter().enumerate() {
                trial[i] = (z[i] + p[k]).clamp(bounds.lower[i], bounds.upper[i]);
            }
            let step: Vec<f64> = (0..n).map(|i| trial[i] - z[i]).collect();
            let hs = &model * nalgebra::DVector::from_column_slice(&step);
            let predicted = -(dot(grad, &step) + 0.5 * dot(&step, hs.as_slice()));
            let v = merit.value(&trial);
            let actual = *value - v;
            if v.is_finite() && predicted > 0.0 && actual > 1e-4 * predicted {
                let v = merit.value_grad(&trial, &mut trial_grad);
                if all_finite(&trial_grad) {
                    damping.accept(actual / predicted);
                    std::mem::swap(z, &mut trial);
                    std::mem::swap(grad, &mut trial_grad);
                    *value = v;
                    accepted = true;
                    break;
                }
            }
            if !(predicted > 0.0) && step.iter().all(|s| *s == 0.0) {
                break;
            }
            damping.reject();
        }
        *iters += 1;
        clock.maybe_snapshot(z);
        if !accepted {
            // back off for the next subproblem, which has a different model
            *damping = Damping::new();
            return InnerOutcome::Stalled;
        }
    }
    if projected_gradient_norm(z, grad, bounds) <= tol {
        InnerOutcome::Converged
    } else {
        InnerOutcome::IterationLimit
    }
}

/// Compares `v^T J p` from the analytic transpose product with central
/// differences of the constraints along `p`.
pub fn check_jacobian<P: Nlp + ?Sized>(problem: &P, z: &[f64], seed: u64) -> Result<()> {
    let (n, m) = (problem.n_vars(), problem.n_constraints());
    if m == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jtv = vec![0.0; n];
    let mut cp = vec![0.0; m];
    let mut cm = vec![0.0; m];
    for probe in 0..SPOT_CHECK_PROBES {
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        problem.jacobian_transpose_product(z, &v, &mut jtv);
        let analytic = dot(&jtv, &p);
        let h = 1e-6 * inf_norm(z).max(1.0);
        let zp: Vec<f64> = z.iter().zip(&p).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z.iter().zip(&p).map(|(a, b)| a - h * b).collect();
        problem.constraints(&zp, &mut cp);
        problem.constraints(&zm, &mut cm);
        let fd: f64 = v
            .iter()
            .zip(cp.iter().zip(&cm))
            .map(|(vi, (a, b))| vi * (a - b) / (2.0 * h))
            .sum();
        if !(analytic.is_finite() && fd.is_finite()) {
            // non-finite callbacks are reported by the solve itself
            return Ok(());
        }
        let scale = analytic.abs().max(fd.abs()).max(1.0);
        let rel_err = (analytic - fd).abs() / scale;
        if rel_err > SPOT_CHECK_RTOL {
            return Err(Error::InconsistentJacobian { probe, rel_err });
        }
    }
    Ok(())
}

pub fn solve<P: Nlp + ?Sized>(problem: &P, z0: &[f64], config: &SolverConfig) -> Result<SolveReport> {
    solve_impl(problem, z0, config, None).map(|(_, r)| r)
}

/// As [`solve`], additionally capturing the iterate every
/// `checkpoint_seconds` of wall time plus once at termination. At most the
/// newest 4096 snapshots are kept.
pub fn solve_with_checkpoints<P: Nlp + ?Sized>(
    problem: &P,
    z0: &[f64],
    config: &SolverConfig,
    checkpoint_seconds: f64,
) -> Result<(Vec<Snapshot>, SolveReport)> {
    if !(checkpoint_seconds > 0.0) {
        return Err(Error::InvalidArgument(
            "checkpoint cadence must be positive".into(),
        ));
    }
    solve_impl(problem, z0, config, Some(checkpoint_seconds))
}

fn solve_impl<P: Nlp + ?Sized>(
    problem: &P,
    z0: &[f64],
    config: &SolverConfig,
    cadence: Option<f64>,
) -> Result<(Vec<Snapshot>, SolveReport)> {
    config.validate()?;
    let n = problem.n_vars();
    if z0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: z0.len(),
        });
    }
    let bounds = problem.bounds();
    let mut clock = Clock {
        start: Instant::now(),
        limit: config.time_limit,
        cadence,
        next_snapshot: cadence.unwrap_or(0.0),
        snapshots: VecDeque::new(),
    };
    let mut z = z0.to_vec();
    bounds.project(&mut z);

    let mut merit = Merit::new(problem, config.rho0);
    let mut grad = vec![0.0; n];
    let mut value = merit.value_grad(&z, &mut grad);
    let finish = |status: SolveStatus,
                  z: Vec<f64>,
                  merit: &Merit<'_, P>,
                  grad: &[f64],
                  outer: usize,
                  inner: usize,
                  trace: Vec<TraceRecord>,
                  mut clock: Clock| {
        let report = SolveReport {
            objective_final: problem.objective(&z),
            max_constraint_violation: inf_norm(&merit.c),
            projected_gradient: projected_gradient_norm(&z, grad, problem.bounds()),
            multipliers: merit.mu.clone(),
            z_final: z,
            outer_iters: outer,
            inner_iters_total: inner,
            status,
            trace,
        };
        if clock.cadence.is_some() {
            if clock.snapshots.len() == SNAPSHOT_CAPACITY {
                clock.snapshots.pop_front();
            }
            clock.snapshots.push_back(Snapshot {
                elapsed_s: clock.elapsed(),
                z: report.z_final.clone(),
            });
        }
        (Vec::from(clock.snapshots), report)
    };

    let mut trace = Vec::new();
    if !value.is_finite() || !all_finite(&grad) || !all_finite(&merit.c) {
        trace.push(TraceRecord {
            outer_iter: 0,
            elapsed_s: clock.elapsed(),
            objective: problem.objective(&z),
            max_violation: inf_norm(&merit.c),
            penalty: merit.rho,
        });
        return Ok(finish(SolveStatus::NumericalFailure, z, &merit, &grad, 0, 0, trace, clock));
    }
    if config.check_jacobian {
        check_jacobian(problem, &z, config.seed)?;
    }

    let mut lbfgs = Lbfgs::new(config.lbfgs_memory);
    let mut damping = Damping::new();
    let mut inner_total = 0usize;
    let mut prev_violation = inf_norm(&merit.c);
    let mut status = SolveStatus::IterationLimit;
    let mut outer = 0usize;
    while outer < config.max_outer_iters {
        outer += 1;
        let outcome = match config.inner_solver {
            InnerSolver::GaussNewton | InnerSolver::Newton => minimize_inner_gn(
                &mut merit,
                config.inner_solver == InnerSolver::Newton,
                bounds,
                &mut damping,
                &mut z,
                &mut grad,
                &mut value,
                config.opt_tol,
                config.max_inner_iters,
                &mut clock,
                &mut inner_total,
            ),
            InnerSolver::Lbfgs => minimize_inner(
                &mut merit,
                bounds,
                &mut lbfgs,
                &mut z,
                &mut grad,
                &mut value,
                config.opt_tol,
                config.max_inner_iters,
                &mut clock,
                &mut inner_total,
            ),
        };
        // refresh c(z) for the accepted iterate (the line search may have
        // left a rejected trial point's constraints in the buffer)
        let _ = merit.value(&z);
        let violation = inf_norm(&merit.c);
        let objective = problem.objective(&z);
        trace.push(TraceRecord {
            outer_iter: outer,
            elapsed_s: clock.elapsed(),
            objective,
            max_violation: violation,
            penalty: merit.rho,
        });
        if matches!(outcome, InnerOutcome::NonFinite) || !violation.is_finite() {
            status = SolveStatus::NumericalFailure;
            break;
        }
        for (m, c) in merit.mu.iter_mut().zip(&merit.c) {
            *m += merit.rho * c;
        }
        // with the updated multipliers the Lagrangian gradient equals the
        // augmented-Lagrangian gradient at the same penalty
        value = merit.value_grad(&z, &mut grad);
        let pg = projected_gradient_norm(&z, &grad, bounds);
        if violation <= config.constraint_tol && pg <= config.opt_tol {
            status = SolveStatus::Converged;
            break;
        }
        if matches!(outcome, InnerOutcome::TimeLimit) || clock.out_of_time() {
            status = SolveStatus::TimeLimit;
            break;
        }
        if violation > config.constraint_tol && violation > 0.25 * prev_violation {
            let rho = merit.rho * config.rho_growth;
            if rho > PENALTY_CAP {
                status = SolveStatus::NumericalFailure;
                break;
            }
            merit.rho = rho;
            lbfgs.clear();
            value = merit.value_grad(&z, &mut grad);
        }
        prev_violation = violation;
    }
    if status == SolveStatus::IterationLimit || status == SolveStatus::TimeLimit {
        let violation = inf_norm(&merit.c);
        if violation <= config.constraint_tol && status == SolveStatus::IterationLimit {
            status = SolveStatus::FeasibleSuboptimal;
        }
    }
    // report the Lagrangian gradient for the final multipliers
    merit.value_grad(&z, &mut grad);
    Ok(finish(status, z, &merit, &grad, outer, inner_total, trace, clock))
}
