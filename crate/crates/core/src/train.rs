//! Collocation training pipeline: resample and smooth the observations,
//! assemble the simultaneous problem, and solve it.

use std::time::Instant;

use nalgebra::DVector;

use crate::colloc::CollocationGrid;
use crate::error::{Error, Result};
use crate::neuralnet::Mlp;
use crate::nlp::{self, Snapshot, SolveReport, SolverConfig};
use crate::prep::{self, Dataset};
use crate::problem::{NlpProblem, DEFAULT_LAMBDA};

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationConfig {
    /// Grid size; `None` pairs one node with every observation.
    pub n_nodes: Option<usize>,
    pub lambda_reg: f64,
    pub regularize_biases: bool,
    pub loess_span: f64,
    pub solver: SolverConfig,
    /// Snapshot cadence in seconds, for MSE-vs-time curves.
    pub checkpoint_seconds: Option<f64>,
}

impl Default for CollocationConfig {
    fn default() -> Self {
        Self {
            n_nodes: None,
            lambda_reg: DEFAULT_LAMBDA,
            regularize_biases: true,
            loess_span: prep::DEFAULT_LOESS_SPAN,
            solver: SolverConfig::default(),
            checkpoint_seconds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollocationFit {
    pub net: Mlp,
    pub problem: NlpProblem,
    pub report: SolveReport,
    /// `(elapsed seconds, network at that time)`, empty unless requested.
    pub snapshots: Vec<(f64, Mlp)>,
    /// Solver wall time, excluding preprocessing.
    pub solve_seconds: f64,
}

/// Builds the collocation problem for `data` with the architecture of `net`.
pub fn build_problem(net: &Mlp, data: &Dataset, cfg: &CollocationConfig) -> Result<NlpProblem> {
    if data.dim() != net.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.state_dim(),
            got: data.dim(),
        });
    }
    let n = cfg.n_nodes.unwrap_or(data.len());
    let grid = CollocationGrid::build(n, data.t0(), data.t_end())?;
    let y_grid = prep::resample_to_grid(data, &grid)?.y_obs;
    Ok(NlpProblem::new(grid, net.clone(), y_grid, cfg.lambda_reg)?
        .with_bias_regularization(cfg.regularize_biases))
}

/// Starting point: LOESS-initialised states and the parameters of `net`.
pub fn initial_point(problem: &NlpProblem, net: &Mlp, data: &Dataset, span: f64) -> Result<DVector<f64>> {
    let states = prep::init_states(data, &problem.grid, span)?;
    problem.pack(&states, &net.theta)
}

/// Solves a prepared problem from `z0`, turning snapshots into networks.
pub fn solve_problem(
    problem: &NlpProblem,
    z0: &[f64],
    solver: &SolverConfig,
    checkpoint_seconds: Option<f64>,
) -> Result<(SolveReport, Vec<Snapshot>, f64)> {
    let start = Instant::now();
    let (snaps, report) = match checkpoint_seconds {
        Some(c) => nlp::solve_with_checkpoints(problem, z0, solver, c)?,
        None => (Vec::new(), nlp::solve(problem, z0, solver)?),
    };
    Ok((report, snaps, start.elapsed().as_secs_f64()))
}

pub fn train_collocation(net0: &Mlp, data: &Dataset, cfg: &CollocationConfig) -> Result<CollocationFit> {
    let problem = build_problem(net0, data, cfg)?;
    let z0 = initial_point(&problem, net0, data, cfg.loess_span)?;
    let (report, snaps, solve_seconds) =
        solve_problem(&problem, z0.as_slice(), &cfg.solver, cfg.checkpoint_seconds)?;
    let net = net0.clone().with_theta(problem.theta(&report.z_final).to_vec())?;
    let snapshots = snaps
        .into_iter()
        .map(|s| {
            let m = net0.clone().with_theta(problem.theta(&s.z).to_vec())?;
            Ok((s.elapsed_s, m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CollocationFit {
        net,
        problem,
        report,
        snapshots,
        solve_seconds,
    })
}
