//! Neural ODE training by fully discretised simultaneous optimisation.
//!
//! The state trajectory is represented on a Chebyshev collocation grid, the
//! ODE becomes a set of algebraic equality constraints through a barycentric
//! differentiation matrix, and an augmented-Lagrangian solver optimises the
//! states and the network parameters jointly. A sequential baseline trainer
//! (backpropagation through a fixed-step integrator) and consensus ADMM over
//! data batches are included for comparison.

pub mod admm;
pub mod cli;
pub mod colloc;
pub mod config;
pub mod error;
pub mod experiment;
pub mod neuralnet;
pub mod nlp;
pub mod odesim;
pub mod prep;
pub mod problem;
pub mod seqtrain;
pub mod train;

pub use colloc::CollocationGrid;
pub use error::{Error, Result};
pub use neuralnet::{Activation, Mlp};
pub use nlp::{SolveReport, SolveStatus, SolverConfig};
pub use odesim::{OdeSystem, Trajectory};
pub use prep::Dataset;
pub use problem::NlpProblem;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
