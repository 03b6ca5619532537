//! Fully connected network used as the ODE right-hand side.
//!
//! Parameters are stored flat. For each layer, in order, the weight matrix of
//! shape `(fan_out, fan_in)` comes first in row-major order, followed by its
//! bias vector. Collocation problems and ADMM index directly into this layout,
//! so it must not change.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "# colnode mlp checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::parse("activation", format!("unknown activation '{other}'"))),
        }
    }
}

/// Number of parameters for the given layer widths.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

fn validate_layers(layer_sizes: &[usize], time_input: bool) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "network needs at least one hidden layer, got widths {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive, got {layer_sizes:?}"
        )));
    }
    let d = *layer_sizes.last().unwrap();
    let expected_in = d + usize::from(time_input);
    if layer_sizes[0] != expected_in {
        return Err(Error::InvalidArgument(format!(
            "input width {} does not match state dimension {d} (time_input = {time_input})",
            layer_sizes[0]
        )));
    }
    Ok(())
}

/// Xavier/Glorot uniform initialisation: weights on
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`, zero biases.
pub fn xavier_init(layer_sizes: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite xavier bound");
        theta.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    theta
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub time_input: bool,
    pub theta: Vec<f64>,
}

impl Mlp {
    /// Network with the given widths and all parameters zero. The first width
    /// must be `d + 1` when `time_input` is set, `d` otherwise.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, time_input: bool) -> Result<Self> {
        validate_layers(&layer_sizes, time_input)?;
        let theta = vec![0.0; param_count(&layer_sizes)];
        Ok(Self {
            layer_sizes,
            activation,
            time_input,
            theta,
        })
    }

    /// Tanh network for a `d`-dimensional state with the given hidden widths.
    pub fn for_state(d: usize, hidden: &[usize], time_input: bool) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(d + usize::from(time_input));
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        Self::new(sizes, Activation::Tanh, time_input)
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn with_xavier(self, seed: u64) -> Self {
        let theta = xavier_init(&self.layer_sizes, seed);
        Self { theta, ..self }
    }

    pub fn state_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        param_count(&self.layer_sizes)
    }

    /// Same architecture, different parameters.
    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.activation == other.activation
            && self.time_input == other.time_input
    }

    fn check_inputs(&self, theta: &[f64], y: &[f64]) -> Result<()> {
        if y.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: y.len(),
            });
        }
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn input_vector(&self, y: &[f64], t: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.layer_sizes[0]);
        x.extend_from_slice(y);
        if self.time_input {
            x.push(t);
        }
        x
    }

    /// Runs the network and keeps every layer's output (input included).
    fn forward_tape(&self, theta: &[f64], y: &[f64], t: f64) -> Vec<Vec<f64>> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut tape = Vec::with_capacity(n_layers + 1);
        tape.push(self.input_vector(y, t));
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &theta[offset..offset + fan_in * fan_out];
            let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let x = &tape[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o];
                    if hidden {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
            tape.push(out);
        }
        tape
    }

    /// Network output for parameters `theta` (not necessarily `self.theta`).
    pub fn forward_with(&self, theta: &[f64], y: &[f64], t: f64) -> Result<DVector<f64>> {
        self.check_inputs(theta, y)?;
        let mut tape = self.forward_tape(theta, y, t);
        Ok(DVector::from_vec(tape.pop().unwrap()))
    }

    pub fn forward(&self, y: &[f64], t: f64) -> Result<DVector<f64>> {
        self.forward_with(&self.theta, y, t)
    }

    /// Vector-Jacobian product by reverse accumulation: returns
    /// `(cotangent^T df/dy, cotangent^T df/dtheta)`. The parameter part is
    /// added into `grad_theta` so callers can accumulate over many points.
    pub fn vjp_accumulate(
        &self,
        theta: &[f64],
        y: &[f64],
        t: f64,
        cotangent: &[f64],
        grad_y: &mut [f64],
        grad_theta: &mut [f64],
    ) -> Result<()> {
        self.check_inputs(theta, y)?;
        let d = self.state_dim();
        if cotangent.len() != d || grad_y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cotangent.len().min(grad_y.len()),
            });
        }
        if grad_theta.len() != theta.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                got: grad_theta.len(),
            });
        }
        let tape = self.forward_tape(theta, y, t);
        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1];
        }
        // delta holds d(loss)/d(pre-activation) of the current layer
        let mut delta = cotangent.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let base = offsets[l];
            let x = &tape[l];
            for o in 0..fan_out {
                let g = delta[o];
                if g != 0.0 {
                    let gw = &mut grad_theta[base + o * fan_in..base + (o + 1) * fan_in];
                    for (gwi, xi) in gw.iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                }
                grad_theta[base + fan_in * fan_out + o] += g;
            }
            let w = &theta[base..base + fan_in * fan_out];
            let mut g_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let g = delta[o];
                if g != 0.0 {
                    for (gi, wi) in g_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *gi += g * wi;
                    }
                }
            }
            if l > 0 {
                for (gi, a) in g_in.iter_mut().zip(x) {
                    *gi *= self.activation.derivative_from_output(*a);
                }
            } else {
                for (gy, gi) in grad_y.iter_mut().zip(&g_in[..d]) {
                    *gy = *gi;
                }
            }
            delta = g_in;
        }
        Ok(())
    }

    /// `df/dy`, a `d x d` matrix, at `(y, t)` with parameters `theta`.
    pub fn jacobian_input_with(&self, theta: &[f64], y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = self.state_dim();
        let mut jac = DMatrix::zeros(d, d);
        let mut scratch = vec![0.0; theta.len()];
        let mut e = vec![0.0; d];
        let mut row = vec![0.0; d];
        for k in 0..d {
            e.fill(0.0);
            e[k] = 1.0;
            self.vjp_accumulate(theta, y, t, &e, &mut row, &mut scratch)?;
            for j in 0..d {
                jac[(k, j)] = row[j];
            }
        }
        Ok(jac)
    }

    pub fn jacobian_input(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        self.jacobian_input_with(&self.theta, y, t)
    }

    /// `df/dtheta`, a `d x n_params` matrix.
    pub fn jacobian_params_with(&self, theta: &[f64], y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = self.state_dim();
        let p = theta.len();
        let mut jac = DMatrix::zeros(d, p);
        let mut grad = vec![0.0; p];
        let mut gy = vec![0.0; d];
        let mut e = vec![0.0; d];
        for k in 0..d {
            e.fill(0.0);
            e[k] = 1.0;
            grad.fill(0.0);
            self.vjp_accumulate(theta, y, t, &e, &mut gy, &mut grad)?;
            for j in 0..p {
                jac[(k, j)] = grad[j];
            }
        }
        Ok(jac)
    }

    pub fn jacobian_params(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        self.jacobian_params_with(&self.theta, y, t)
    }

    /// Row `i` of the result is `forward(ys.row(i), ts[i])`.
    pub fn batch_forward_with(
        &self,
        theta: &[f64],
        ys: &DMatrix<f64>,
        ts: &[f64],
    ) -> Result<DMatrix<f64>> {
        let d = self.state_dim();
        if ys.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: ys.ncols(),
            });
        }
        if ys.nrows() != ts.len() {
            return Err(Error::DimensionMismatch {
                expected: ys.nrows(),
                got: ts.len(),
            });
        }
        let mut out = DMatrix::zeros(ys.nrows(), d);
        let mut y = vec![0.0; d];
        for (i, &t) in ts.iter().enumerate() {
            for k in 0..d {
                y[k] = ys[(i, k)];
            }
            let f = self.forward_with(theta, &y, t)?;
            out.row_mut(i).copy_from(&f.transpose());
        }
        Ok(out)
    }

    pub fn batch_forward(&self, ys: &DMatrix<f64>, ts: &[f64]) -> Result<DMatrix<f64>> {
        self.batch_forward_with(&self.theta, ys, ts)
    }

    /// Plain-text checkpoint: header, architecture, then one parameter per
    /// line with 17 significant digits.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        let sizes: Vec<String> = self.layer_sizes.iter().map(|w| w.to_string()).collect();
        writeln!(s, "layer_sizes {}", sizes.join(" ")).unwrap();
        writeln!(s, "time_input {}", self.time_input).unwrap();
        writeln!(s, "activation {}", self.activation.name()).unwrap();
        writeln!(s, "n_params {}", self.theta.len()).unwrap();
        for v in &self.theta {
            writeln!(s, "{}", crate::fmt_f64(*v)).unwrap();
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let err = |m: &str| Error::parse("checkpoint", m);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(err("missing checkpoint header"));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| err(&format!("missing '{key}'")))?;
            line.strip_prefix(key)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| err(&format!("expected '{key}', found '{line}'")))
        };
        let layer_sizes = field("layer_sizes")?
            .split_whitespace()
            .map(|w| w.parse::<usize>().map_err(|e| err(&e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let time_input = field("time_input")?
            .parse::<bool>()
            .map_err(|e| err(&e.to_string()))?;
        let activation: Activation = field("activation")?.parse()?;
        let n_params = field("n_params")?
            .parse::<usize>()
            .map_err(|e| err(&e.to_string()))?;
        let theta = lines
            .map(|l| l.parse::<f64>().map_err(|e| err(&format!("bad parameter '{l}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if theta.len() != n_params {
            return Err(err(&format!("expected {n_params} parameters, found {}", theta.len())));
        }
        Mlp::new(layer_sizes, activation, time_input)?.with_theta(theta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_net(sizes: &[usize], time_input: bool, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(sizes.to_vec(), Activation::Tanh, time_input).unwrap();
        let theta = (0..net.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        net.with_theta(theta).unwrap()
    }

    fn central_diff<F: Fn(&[f64]) -> DVector<f64>>(f: F, x: &[f64], k: usize) -> DVector<f64> {
        let h = 1e-6 * x[k].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(xavier_init(&[2, 8, 2], 1).len(), 42);
        assert_eq!(xavier_init(&[2, 32, 2], 1).len(), 162);
        assert_eq!(param_count(&[3, 8, 2]), 50);
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let a = xavier_init(&[3, 8, 2], 7);
        assert_eq!(a, xavier_init(&[3, 8, 2], 7));
        assert_ne!(a, xavier_init(&[3, 8, 2], 8));
        let bound1 = (6.0f64 / 11.0).sqrt();
        assert!(a[..24].iter().all(|w| w.abs() <= bound1));
        assert!(a[24..32].iter().all(|b| *b == 0.0));
        assert!(a[48..50].iter().all(|b| *b == 0.0));
    }

    #[test]
    fn zero_and_bias_only_nets() {
        let net = Mlp::for_state(2, &[8], true).unwrap();
        assert_eq!(net.forward(&[0.3, -2.0], 1.5).unwrap(), DVector::zeros(2));
        assert_eq!(net.jacobian_input(&[0.3, -2.0], 1.5).unwrap(), DMatrix::zeros(2, 2));

        let mut theta = vec![0.0; net.n_params()];
        let n = theta.len();
        theta[n - 2] = 0.7;
        theta[n - 1] = -1.25;
        let net = net.with_theta(theta).unwrap();
        assert_eq!(net.forward(&[5.0, 1.0], -3.0).unwrap().as_slice(), &[0.7, -1.25]);
    }

    #[test]
    fn hand_evaluated_tiny_net() {
        let net = Mlp::new(vec![1, 1, 1], Activation::Tanh, false)
            .unwrap()
            .with_theta(vec![1.0, 0.0, 1.0, 0.0])
            .unwrap();
        let out = net.forward(&[0.5], 0.0).unwrap();
        assert!((out[0] - 0.46211715726).abs() < 1e-10);
        assert!((out[0] - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn linear_net_jacobian_is_weight_product() {
        let w1 = [1.0, 2.0, -1.0, 0.5];
        let w2 = [0.3, -0.7, 1.1, 0.2];
        let mut theta = Vec::new();
        theta.extend_from_slice(&w1);
        theta.extend_from_slice(&[0.1, 0.2]);
        theta.extend_from_slice(&w2);
        theta.extend_from_slice(&[0.0, 0.0]);
        let net = Mlp::new(vec![2, 2, 2], Activation::Identity, false)
            .unwrap()
            .with_theta(theta)
            .unwrap();
        let a = DMatrix::from_row_slice(2, 2, &w1);
        let b = DMatrix::from_row_slice(2, 2, &w2);
        let j = net.jacobian_input(&[0.4, -0.9], 0.0).unwrap();
        assert!((j - b * a).abs().max() < 1e-15);
    }

    #[test]
    fn param_jacobian_structure_at_zero() {
        let net = Mlp::for_state(2, &[8], true).unwrap();
        let j = net.jacobian_params(&[0.3, 0.8], 0.5).unwrap();
        let p = net.n_params();
        assert_eq!(j[(0, p - 2)], 1.0);
        assert_eq!(j[(1, p - 1)], 1.0);
        assert_eq!(j[(0, p - 1)], 0.0);
        assert_eq!(j[(1, p - 2)], 0.0);
        // first-layer weights and biases only reach the output through zero weights
        for c in 0..3 * 8 + 8 {
            assert_eq!(j[(0, c)], 0.0);
            assert_eq!(j[(1, c)], 0.0);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for (arch, seed) in [(vec![3, 8, 2], 1u64), (vec![2, 32, 2], 2), (vec![3, 5, 4, 2], 3)] {
            let time_input = arch[0] == 3;
            let net = random_net(&arch, time_input, seed);
            let y = [0.4, -1.3];
            let t = 0.7;
            let ji = net.jacobian_input(&y, t).unwrap();
            for k in 0..2 {
                let fd = central_diff(|x| net.forward(x, t).unwrap(), &y, k);
                for r in 0..2 {
                    let a = ji[(r, k)];
                    assert!((a - fd[r]).abs() <= 1e-6 * a.abs().max(1.0));
                }
            }
            let jp = net.jacobian_params(&y, t).unwrap();
            for k in 0..net.n_params() {
                let fd = central_diff(|th| net.forward_with(th, &y, t).unwrap(), &net.theta, k);
                for r in 0..2 {
                    let a = jp[(r, k)];
                    assert!((a - fd[r]).abs() <= 1e-6 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn batch_forward_rows_and_permutation() {
        let net = random_net(&[3, 8, 2], true, 11);
        let ys = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.5, 1.0, 2.0, -1.0]);
        let ts = [0.0, 0.5, 1.0];
        let out = net.batch_forward(&ys, &ts).unwrap();
        for i in 0..3 {
            let row = net.forward(&[ys[(i, 0)], ys[(i, 1)]], ts[i]).unwrap();
            assert_eq!(out.row(i).transpose(), row);
        }
        let perm = [2usize, 0, 1];
        let ys_p = DMatrix::from_fn(3, 2, |i, k| ys[(perm[i], k)]);
        let ts_p: Vec<f64> = perm.iter().map(|&i| ts[i]).collect();
        let out_p = net.batch_forward(&ys_p, &ts_p).unwrap();
        for i in 0..3 {
            assert_eq!(out_p.row(i), out.row(perm[i]));
        }
        let one = net.batch_forward(&ys.rows(0, 1).into_owned(), &ts[..1]).unwrap();
        assert_eq!(one.row(0), out.row(0));
        assert!(net.batch_forward(&ys, &ts[..2]).is_err());
    }

    #[test]
    fn dimension_errors() {
        let net = Mlp::for_state(2, &[4], false).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0, 3.0], 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(Mlp::new(vec![2, 2], Activation::Tanh, false).is_err());
        assert!(Mlp::new(vec![2, 0, 2], Activation::Tanh, false).is_err());
        assert!(Mlp::new(vec![2, 4, 2], Activation::Tanh, true).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = random_net(&[3, 8, 2], true, 5);
        let text = net.to_checkpoint_string();
        let back = Mlp::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::from_checkpoint_str("garbage").is_err());
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(Mlp::from_checkpoint_str(&truncated).is_err());
    }
}
