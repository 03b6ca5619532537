//! Sequential baseline: fit the network by rolling it out with a fixed-step
//! integrator and backpropagating the trajectory MSE through every step.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::neuralnet::Mlp;
use crate::odesim;
use crate::prep::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

impl Integrator {
    pub fn as_str(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
        }
    }
}

impl FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(Error::parse("integrator", format!("unknown integrator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqTrainConfig {
    pub integrator: Integrator,
    /// Internal steps between consecutive observation times. `None` uses
    /// the inference step bound, so the training loss equals the evaluated
    /// rollout MSE.
    pub substeps: Option<usize>,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub time_limit: Option<f64>,
}

impl Default for SeqTrainConfig {
    fn default() -> Self {
        Self {
            integrator: Integrator::Rk4,
            substeps: None,
            adam: AdamConfig::default(),
            epochs: 1000,
            seed: 0,
            time_limit: None,
        }
    }
}

impl SeqTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.substeps == Some(0) {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("time limit must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqStatus {
    Completed,
    TimeLimit,
    /// No step size, down to the retry floor, reduced the loss.
    Stalled,
    /// Every retry diverged.
    Diverged,
}

impl SeqStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SeqStatus::Completed => "completed",
            SeqStatus::TimeLimit => "time-limit",
            SeqStatus::Stalled => "stalled",
            SeqStatus::Diverged => "diverged",
        }
    }
}

impl fmt::Display for SeqStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elapsed_s: f64,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct SeqTrainResult {
    pub net: Mlp,
    pub trace: Vec<EpochRecord>,
    pub status: SeqStatus,
}

/// `epoch,elapsed_s,mse` rows.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("iter,elapsed_s,value\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{}\n",
            r.epoch,
            crate::fmt_f64(r.elapsed_s),
            crate::fmt_f64(r.mse)
        ));
    }
    s
}

/// Halvings tried before an epoch gives up.
const MAX_RETRIES: usize = 20;

/// Unrolled rollout with everything the reverse pass needs.
struct Rollout {
    /// Stage inputs `(x, t)` per internal step; one per step for Euler,
    /// four for RK4.
    stages: Vec<(Vec<f64>, f64)>,
    /// Step sizes, one per internal step.
    steps: Vec<f64>,
    /// Predicted states at the observation times.
    states: Vec<Vec<f64>>,
}

fn rollout(
    net: &Mlp,
    theta: &[f64],
    y0: &[f64],
    times: &[f64],
    integrator: Integrator,
    substeps: usize,
) -> Option<Rollout> {
    let d = y0.len();
    let n_steps = (times.len() - 1) * substeps;
    let per = match integrator {
        Integrator::Euler => 1,
        Integrator::Rk4 => 4,
    };
    let mut stages = Vec::with_capacity(n_steps * per);
    let mut steps = Vec::with_capacity(n_steps);
    let mut states = Vec::with_capacity(times.len());
    states.push(y0.to_vec());
    let mut y = y0.to_vec();
    let f = |x: &[f64], t: f64| -> Vec<f64> {
        net.forward_with(theta, x, t)
            .expect("dimensions checked before training")
            .as_slice()
            .to_vec()
    };
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + s as f64 * h;
            steps.push(h);
            match integrator {
                Integrator::Euler => {
                    let k1 = f(&y, t);
                    stages.push((y.clone(), t));
                    for k in 0..d {
                        y[k] += h * k1[k];
                    }
                }
                Integrator::Rk4 => {
                    let x1 = y.clone();
                    let k1 = f(&x1, t);
                    let x2: Vec<f64> = (0..d).map(|k| y[k] + 0.5 * h * k1[k]).collect();
                    let k2 = f(&x2, t + 0.5 * h);
                    let x3: Vec<f64> = (0..d).map(|k| y[k] + 0.5 * h * k2[k]).collect();
                    let k3 = f(&x3, t + 0.5 * h);
                    let x4: Vec<f64> = (0..d).map(|k| y[k] + h * k3[k]).collect();
                    let k4 = f(&x4, t + h);
                    for k in 0..d {
                        y[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                    }
                    stages.push((x1, t));
                    stages.push((x2, t + 0.5 * h));
                    stages.push((x3, t + 0.5 * h));
                    stages.push((x4, t + h));
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return None;
        }
        states.push(y.clone());
    }
    Some(Rollout {
        stages,
        steps,
        states,
    })
}

fn rollout_mse(states: &[Vec<f64>], data: &Dataset) -> f64 {
    let mut s = 0.0;
    for (i, y) in states.iter().enumerate() {
        for (k, v) in y.iter().enumerate() {
            let r = v - data.y_obs[(i, k)];
            s += r * r;
        }
    }
    s / data.len() as f64
}

/// Gradient of the rollout MSE with respect to `theta`, by reverse
/// accumulation through the stored stages.
fn rollout_gradient(
    net: &Mlp,
    theta: &[f64],
    ro: &Rollout,
    data: &Dataset,
    integrator: Integrator,
    substeps: usize,
) -> Vec<f64> {
    let d = data.dim();
    let n = data.len();
    let scale = 2.0 / n as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut adj = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let vjp = |x: &[f64], t: f64, cot: &[f64], gx: &mut [f64], grad: &mut [f64]| {
        net.vjp_accumulate(theta, x, t, cot, gx, grad)
            .expect("dimensions checked before training");
    };
    for i in (1..n).rev() {
        for k in 0..d {
            adj[k] += scale * (ro.states[i][k] - data.y_obs[(i, k)]);
        }
        for s in (0..substeps).rev() {
            let step = (i - 1) * substeps + s;
            let h = ro.steps[step];
            match integrator {
                Integrator::Euler => {
                    let (x, t) = &ro.stages[step];
                    let cot: Vec<f64> = adj.iter().map(|a| h * a).collect();
                    vjp(x, *t, &cot, &mut gx, &mut grad);
                    for k in 0..d {
                        adj[k] += gx[k];
                    }
                }
                Integrator::Rk4 => {
                    let st = &ro.stages[4 * step..4 * step + 4];
                    let mut kbar: [Vec<f64>; 4] = [
                        adj.iter().map(|a| h / 6.0 * a).collect(),
                        adj.iter().map(|a| h / 3.0 * a).collect(),
                        adj.iter().map(|a| h / 3.0 * a).collect(),
                        adj.iter().map(|a| h / 6.0 * a).collect(),
                    ];
                    // x4 = y + h k3, x3 = y + h/2 k2, x2 = y + h/2 k1, x1 = y
                    let coef = [0.0, 0.5 * h, 0.5 * h, h];
                    let mut ybar = adj.clone();
                    for j in (0..4).rev() {
                        let (x, t) = &st[j];
                        vjp(x, *t, &kbar[j], &mut gx, &mut grad);
                        for k in 0..d {
                            ybar[k] += gx[k];
                        }
                        if j > 0 {
                            for k in 0..d {
                                kbar[j - 1][k] += coef[j] * gx[k];
                            }
                        }
                    }
                    adj = ybar;
                }
            }
        }
    }
    grad
}

/// Rollout MSE and its parameter gradient from the first observation row,
/// `None` when the rollout diverges.
pub fn loss_and_gradient(
    net: &Mlp,
    theta: &[f64],
    data: &Dataset,
    integrator: Integrator,
    substeps: usize,
) -> Result<Option<(f64, Vec<f64>)>> {
    check_shapes(net, data)?;
    let y0 = data.row(0);
    Ok(rollout(net, theta, &y0, &data.times, integrator, substeps).map(|ro| {
        let loss = rollout_mse(&ro.states, data);
        let grad = rollout_gradient(net, theta, &ro, data, integrator, substeps);
        (loss, grad)
    }))
}

fn check_shapes(net: &Mlp, data: &Dataset) -> Result<()> {
    if net.state_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.state_dim(),
            got: data.dim(),
        });
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("need at least two observations".into()));
    }
    Ok(())
}

/// Full-batch Adam on the rollout MSE. A proposed step that diverges or
/// raises the loss is retried at half the step size along the
/// preconditioned gradient, so the recorded loss never increases.
pub fn sequential_train(net0: &Mlp, data: &Dataset, config: &SeqTrainConfig) -> Result<SeqTrainResult> {
    config.validate()?;
    check_shapes(net0, data)?;
    let start = Instant::now();
    let integrator = config.integrator;
    let substeps = config
        .substeps
        .unwrap_or_else(|| odesim::substeps_for(&data.times, odesim::INFERENCE_MAX_STEP));
    let y0 = data.row(0);
    let mut theta = net0.theta.clone();
    let mut trace = Vec::new();
    if config.epochs == 0 {
        return Ok(SeqTrainResult {
            net: net0.clone(),
            trace,
            status: SeqStatus::Completed,
        });
    }
    let Some(mut ro) = rollout(net0, &theta, &y0, &data.times, integrator, substeps) else {
        return Ok(SeqTrainResult {
            net: net0.clone(),
            trace,
            status: SeqStatus::Diverged,
        });
    };
    let mut loss = rollout_mse(&ro.states, data);
    let a = config.adam;
    let p = theta.len();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let mut status = SeqStatus::Completed;
    let mut trial = vec![0.0; p];
    for epoch in 1..=config.epochs {
        if config.time_limit.is_some_and(|lim| start.elapsed().as_secs_f64() >= lim) {
            status = SeqStatus::TimeLimit;
            break;
        }
        let g = rollout_gradient(net0, &theta, &ro, data, integrator, substeps);
        let (b1t, b2t) = (1.0 - a.beta1.powi(epoch as i32), 1.0 - a.beta2.powi(epoch as i32));
        for j in 0..p {
            m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * g[j];
            v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * g[j] * g[j];
        }
        let mut lr = a.lr;
        let mut accepted = None;
        let mut any_finite = false;
        for _ in 0..=MAX_RETRIES {
            for j in 0..p {
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                trial[j] = theta[j] - lr * mhat / (vhat.sqrt() + a.eps);
            }
            if let Some(r) = rollout(net0, &trial, &y0, &data.times, integrator, substeps) {
                any_finite = true;
                let l = rollout_mse(&r.states, data);
                if l <= loss {
                    accepted = Some((r, l));
                    break;
                }
            }
            // momentum may point uphill; fall back to the preconditioned
            // gradient, which is a descent direction for small steps
            for j in 0..p {
                m[j] = g[j] * b1t;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((r, l)) => {
                std::mem::swap(&mut theta, &mut trial);
                ro = r;
                loss = l;
            }
            None => {
                status = if any_finite {
                    SeqStatus::Stalled
                } else {
                    SeqStatus::Diverged
                };
                break;
            }
        }
        trace.push(EpochRecord {
            epoch,
            elapsed_s: start.elapsed().as_secs_f64(),
            mse: loss,
        });
    }
    Ok(SeqTrainResult {
        net: net0.clone().with_theta(theta)?,
        trace,
        status,
    })
}

/// Sequential fine-tuning warm-started from a collocation checkpoint. The
/// trace starts with the checkpoint's own training MSE as epoch 0.
pub fn hybrid_pretrain_handoff(
    checkpoint: &Mlp,
    template: &Mlp,
    data: &Dataset,
    config: &SeqTrainConfig,
) -> Result<SeqTrainResult> {
    if !checkpoint.same_architecture(template) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint architecture {:?} (time input {}) does not match {:?} (time input {})",
            checkpoint.layer_sizes, checkpoint.time_input, template.layer_sizes, template.time_input
        )));
    }
    check_shapes(checkpoint, data)?;
    let mse0 = evaluate_mse(checkpoint, data, &data.row(0), EvalMode::Train).mse;
    let mut result = sequential_train(checkpoint, data, config)?;
    result.trace.insert(
        0,
        EpochRecord {
            epoch: 0,
            elapsed_s: 0.0,
            mse: mse0,
        },
    );
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Train,
    Test,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Train => "train",
            EvalMode::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mode: EvalMode,
    /// `+inf` when the rollout diverged.
    pub mse: f64,
    /// Time at which the rollout stopped being finite.
    pub diverged_at: Option<f64>,
}

/// Rolls `net` out from `y0` at the first data time with the inference
/// integrator and scores `(1/N) ||Y_hat - Y||_F^2`.
pub fn evaluate_mse(net: &Mlp, data: &Dataset, y0: &[f64], mode: EvalMode) -> Evaluation {
    match odesim::predict(net, y0, &data.times) {
        Ok(traj) => {
            // same summation order as the training loss
            let rows: Vec<Vec<f64>> = traj.states.row_iter().map(|r| r.iter().copied().collect()).collect();
            Evaluation {
                mode,
                mse: rollout_mse(&rows, data),
                diverged_at: None,
            }
        }
        Err(Error::IntegrationDiverged { t, .. }) => Evaluation {
            mode,
            mse: f64::INFINITY,
            diverged_at: Some(t),
        },
        Err(_) => Evaluation {
            mode,
            mse: f64::INFINITY,
            diverged_at: None,
        },
    }
}
