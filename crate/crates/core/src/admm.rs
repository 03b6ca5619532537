//! Consensus ADMM over data batches. Each batch owns its collocation states
//! and a copy of the network parameters; only the parameters are averaged.

use std::fmt;
use std::time::Instant;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::neuralnet::Mlp;
use crate::nlp::SolveStatus;
use crate::prep::Dataset;
use crate::problem::{NlpProblem, Proximal};
use crate::train::{self, CollocationConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iters: usize,
    /// Stop once `r <= tol_scale * sqrt(len(theta))`.
    pub tol_scale: f64,
    pub collocation: CollocationConfig,
    /// Solve the batch subproblems on separate threads.
    pub parallel: bool,
    /// Keep every iterate in [`AdmmResult::history`].
    pub keep_history: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 20,
            tol_scale: 1e-3,
            collocation: CollocationConfig::default(),
            parallel: true,
            keep_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub thetas: Vec<Vec<f64>>,
    pub consensus: Vec<f64>,
    pub duals: Vec<Vec<f64>>,
    pub rho: f64,
    pub primal_residuals: Vec<f64>,
}

impl AdmmState {
    fn new(b: usize, theta0: &[f64], rho: f64) -> Self {
        Self {
            thetas: vec![theta0.to_vec(); b],
            consensus: theta0.to_vec(),
            duals: vec![vec![0.0; theta0.len()]; b],
            rho,
            primal_residuals: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmmStatus {
    Converged,
    IterationLimit,
    /// A batch subproblem failed; the consensus from the previous
    /// iteration is returned.
    SubproblemFailed {
        iter: usize,
        batch: usize,
        reason: String,
    },
}

impl fmt::Display for AdmmStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdmmStatus::Converged => f.write_str("converged"),
            AdmmStatus::IterationLimit => f.write_str("iteration-limit"),
            AdmmStatus::SubproblemFailed { iter, batch, reason } => {
                write!(f, "subproblem-failed (iteration {iter}, batch {batch}: {reason})")
            }
        }
    }
}

/// One completed iteration: the subproblem solutions, their mean, and the
/// duals before and after the update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmIterate {
    pub thetas: Vec<Vec<f64>>,
    pub consensus: Vec<f64>,
    pub duals_before: Vec<Vec<f64>>,
    pub duals_after: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdmmResult {
    pub net: Mlp,
    pub state: AdmmState,
    pub status: AdmmStatus,
    /// Elapsed seconds at the end of each iteration.
    pub elapsed: Vec<f64>,
    pub history: Vec<AdmmIterate>,
}

impl AdmmResult {
    /// `iter,elapsed_s,value` rows of the primal residual.
    pub fn residual_csv(&self) -> String {
        let mut s = String::from("iter,elapsed_s,value\n");
        for (k, (r, t)) in self.state.primal_residuals.iter().zip(&self.elapsed).enumerate() {
            s.push_str(&format!("{},{},{}\n", k + 1, crate::fmt_f64(*t), crate::fmt_f64(*r)));
        }
        s
    }
}

/// Arithmetic mean of the batch parameters.
pub fn consensus_mean(thetas: &[Vec<f64>]) -> Vec<f64> {
    let b = thetas.len() as f64;
    let mut mean = vec![0.0; thetas[0].len()];
    for th in thetas {
        for (m, v) in mean.iter_mut().zip(th) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= b;
    }
    mean
}

/// `u_i <- u_i + rho (theta_i - theta_bar)` for every batch.
pub fn dual_update(duals: &mut [Vec<f64>], thetas: &[Vec<f64>], consensus: &[f64], rho: f64) {
    for (u, th) in duals.iter_mut().zip(thetas) {
        for ((uj, tj), cj) in u.iter_mut().zip(th).zip(consensus) {
            *uj += rho * (tj - cj);
        }
    }
}

/// `sum_i ||theta_i - theta_bar||_2`.
pub fn primal_residual(thetas: &[Vec<f64>], consensus: &[f64]) -> f64 {
    thetas
        .iter()
        .map(|th| {
            th.iter()
                .zip(consensus)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

struct Batch {
    problem: NlpProblem,
    z: DVector<f64>,
}

fn solve_batch(batch: &Batch, proximal: Option<Proximal>, cfg: &CollocationConfig) -> Result<(SolveStatus, Vec<f64>)> {
    let problem = batch.problem.clone().with_proximal(proximal)?;
    let (report, _, _) = train::solve_problem(&problem, batch.z.as_slice(), &cfg.solver, None)?;
    Ok((report.status, report.z_final))
}

/// Trains one network across `batches` by consensus ADMM. Iteration 1
/// solves each batch on its own (there is no consensus yet); later
/// iterations add `(rho/2) ||theta_i - theta_bar + u_i/rho||^2` and warm
/// start from the previous batch solution.
pub fn admm_train(batches: &[Dataset], net0: &Mlp, cfg: &AdmmConfig) -> Result<AdmmResult> {
    if batches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ADMM needs at least two batches, got {}",
            batches.len()
        )));
    }
    if !(cfg.rho > 0.0 && cfg.rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {}", cfg.rho)));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("ADMM iteration cap must be at least 1".into()));
    }
    let start = Instant::now();
    let mut work = Vec::with_capacity(batches.len());
    for data in batches {
        let problem = train::build_problem(net0, data, &cfg.collocation)?;
        let z = train::initial_point(&problem, net0, data, cfg.collocation.loess_span)?;
        work.push(Batch { problem, z });
    }
    let p = net0.n_params();
    let tol = cfg.tol_scale * (p as f64).sqrt();
    let mut state = AdmmState::new(batches.len(), &net0.theta, cfg.rho);
    let mut status = AdmmStatus::IterationLimit;
    let mut elapsed = Vec::new();
    let mut history = Vec::new();
    for iter in 1..=cfg.max_iters {
        let proximals: Vec<Option<Proximal>> = state
            .duals
            .iter()
            .map(|u| {
                (iter > 1).then(|| Proximal {
                    target: state
                        .consensus
                        .iter()
                        .zip(u)
                        .map(|(c, ui)| c - ui / cfg.rho)
                        .collect(),
                    rho: cfg.rho,
                })
            })
            .collect();
        let outcomes: Vec<Result<(SolveStatus, Vec<f64>)>> = if cfg.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = work
                    .iter()
                    .zip(&proximals)
                    .map(|(b, prox)| s.spawn(move || solve_batch(b, prox.clone(), &cfg.collocation)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("batch solver thread panicked"))
                    .collect()
            })
        } else {
            work.iter()
                .zip(&proximals)
                .map(|(b, prox)| solve_batch(b, prox.clone(), &cfg.collocation))
                .collect()
        };
        let mut failure = None;
        let mut new_z = Vec::with_capacity(work.len());
        for (i, out) in outcomes.into_iter().enumerate() {
            match out {
                Ok((SolveStatus::NumericalFailure, _)) => {
                    failure = Some((i, "numerical failure in the collocation solve".to_string()));
                    break;
                }
                Ok((_, z)) => new_z.push(z),
                Err(e) => {
                    failure = Some((i, e.to_string()));
                    break;
                }
            }
        }
        if let Some((batch, reason)) = failure {
            status = AdmmStatus::SubproblemFailed { iter, batch, reason };
            break;
        }
        for (b, z) in work.iter_mut().zip(new_z) {
            b.z = DVector::from_vec(z);
        }
        let thetas: Vec<Vec<f64>> = work
            .iter()
            .map(|b| b.problem.theta(b.z.as_slice()).to_vec())
            .collect();
        let consensus = consensus_mean(&thetas);
        let r = primal_residual(&thetas, &consensus);
        let duals_before = state.duals.clone();
        dual_update(&mut state.duals, &thetas, &consensus, cfg.rho);
        if cfg.keep_history {
            history.push(AdmmIterate {
                thetas: thetas.clone(),
                consensus: consensus.clone(),
                duals_before,
                duals_after: state.duals.clone(),
            });
        }
        state.thetas = thetas;
        state.consensus = consensus;
        state.primal_residuals.push(r);
        elapsed.push(start.elapsed().as_secs_f64());
        if r <= tol {
            status = AdmmStatus::Converged;
            break;
        }
    }
    let net = net0.clone().with_theta(state.consensus.clone())?;
    Ok(AdmmResult {
        net,
        state,
        status,
        elapsed,
        history,
    })
}
