//! Fixed-step integrators, the forced Van der Pol oscillator, and forward
//! simulation of trained networks.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::neuralnet::Mlp;

/// Largest internal step used by [`predict`].
pub const INFERENCE_MAX_STEP: f64 = 0.01;

/// Right-hand side of `y' = f(y, t)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, y: &[f64], t: f64, out: &mut [f64]);
}

/// Forced Van der Pol oscillator:
/// `u' = v`, `v' = mu (1 - u^2) v - u + A cos(omega t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanDerPol {
    pub mu: f64,
    pub amplitude: f64,
    pub omega: f64,
}

pub fn vdp_system(mu: f64, amplitude: f64, omega: f64) -> VanDerPol {
    VanDerPol {
        mu,
        amplitude,
        omega,
    }
}

impl OdeSystem for VanDerPol {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, y: &[f64], t: f64, out: &mut [f64]) {
        let (u, v) = (y[0], y[1]);
        out[0] = v;
        out[1] = self.mu * (1.0 - u * u) * v - u + self.amplitude * (self.omega * t).cos();
    }
}

/// A network used as the right-hand side.
#[derive(Debug, Clone, Copy)]
pub struct NeuralSystem<'a>(pub &'a Mlp);

impl OdeSystem for NeuralSystem<'_> {
    fn dim(&self) -> usize {
        self.0.state_dim()
    }

    fn rhs(&self, y: &[f64], t: f64, out: &mut [f64]) {
        let f = self
            .0
            .forward(y, t)
            .expect("state dimension checked by the integrator");
        out.copy_from_slice(f.as_slice());
    }
}

/// Closure-backed system, handy for analytic test problems.
pub struct FnSystem<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, y: &[f64], t: f64, out: &mut [f64]) {
        (self.f)(y, t, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One row per time point.
    pub states: DMatrix<f64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        write_table_csv(&self.times, &self.states)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let (times, states) = parse_table_csv(text)?;
        Ok(Self { times, states })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// CSV with header `t,y0,...,y{d-1}` and 17-significant-digit values.
pub(crate) fn write_table_csv(times: &[f64], states: &DMatrix<f64>) -> String {
    let mut s = String::from("t");
    for k in 0..states.ncols() {
        write!(s, ",y{k}").unwrap();
    }
    s.push('\n');
    for (i, t) in times.iter().enumerate() {
        s.push_str(&crate::fmt_f64(*t));
        for k in 0..states.ncols() {
            s.push(',');
            s.push_str(&crate::fmt_f64(states[(i, k)]));
        }
        s.push('\n');
    }
    s
}

pub(crate) fn parse_table_csv(text: &str) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse("csv", "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(Error::parse("csv", format!("bad header '{header}'")));
    }
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("y{k}") {
            return Err(Error::parse("csv", format!("bad column name '{c}'")));
        }
    }
    let d = cols.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::parse(
                "csv",
                format!("row {} has {} fields, expected {}", lineno + 1, fields.len(), d + 1),
            ));
        }
        let parse = |f: &str| {
            f.parse::<f64>()
                .map_err(|e| Error::parse("csv", format!("row {}: '{f}': {e}", lineno + 1)))
        };
        times.push(parse(fields[0])?);
        for f in &fields[1..] {
            values.push(parse(f)?);
        }
    }
    let states = DMatrix::from_row_slice(times.len(), d, &values);
    Ok((times, states))
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("no output times".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "output times must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Substep count keeping every internal step at most `max_step`.
pub fn substeps_for(times: &[f64], max_step: f64) -> usize {
    let widest = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0f64, f64::max);
    ((widest / max_step).ceil() as usize).max(1)
}

#[derive(Clone, Copy)]
enum Scheme {
    Euler,
    Rk4,
}

fn integrate<S: OdeSystem + ?Sized>(
    scheme: Scheme,
    system: &S,
    y0: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Trajectory> {
    let d = system.dim();
    if y0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: y0.len(),
        });
    }
    check_times(times)?;
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let mut states = DMatrix::zeros(times.len(), d);
    for k in 0..d {
        states[(0, k)] = y0[k];
    }
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for i in 1..times.len() {
        let (ta, tb) = (times[i - 1], times[i]);
        let h = (tb - ta) / substeps as f64;
        for s in 0..substeps {
            let t = ta + s as f64 * h;
            match scheme {
                Scheme::Euler => {
                    system.rhs(&y, t, &mut k1);
                    for k in 0..d {
                        y[k] += h * k1[k];
                    }
                }
                Scheme::Rk4 => {
                    system.rhs(&y, t, &mut k1);
                    for k in 0..d {
                        tmp[k] = y[k] + 0.5 * h * k1[k];
                    }
                    system.rhs(&tmp, t + 0.5 * h, &mut k2);
                    for k in 0..d {
                        tmp[k] = y[k] + 0.5 * h * k2[k];
                    }
                    system.rhs(&tmp, t + 0.5 * h, &mut k3);
                    for k in 0..d {
                        tmp[k] = y[k] + h * k3[k];
                    }
                    system.rhs(&tmp, t + h, &mut k4);
                    for k in 0..d {
                        y[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                    }
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            let partial = Trajectory {
                times: times[..i].to_vec(),
                states: states.rows(0, i).into_owned(),
            };
            return Err(Error::IntegrationDiverged {
                t: tb,
                partial: Box::new(partial),
            });
        }
        for k in 0..d {
            states[(i, k)] = y[k];
        }
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
    })
}

/// Classical fourth-order Runge-Kutta with `substeps` equal steps between
/// consecutive output times.
pub fn rk4_integrate<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Trajectory> {
    integrate(Scheme::Rk4, system, y0, times, substeps)
}

/// Forward Euler with `substeps` equal steps between output times.
pub fn euler_integrate<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Trajectory> {
    integrate(Scheme::Euler, system, y0, times, substeps)
}

/// Forward simulation of a trained network from `y0` with RK4, internal step
/// at most [`INFERENCE_MAX_STEP`].
pub fn predict(net: &Mlp, y0: &[f64], times: &[f64]) -> Result<Trajectory> {
    let substeps = substeps_for(times, INFERENCE_MAX_STEP);
    rk4_integrate(&NeuralSystem(net), y0, times, substeps)
}
