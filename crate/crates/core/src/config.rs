//! Experiment configuration as flat `section.key = value` text.
//!
//! Every key has a default, a config file overrides the defaults, and
//! command-line overrides are applied last. `to_text` writes the fully
//! resolved configuration, derived seeds included, so a run directory can
//! be re-run as is.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::nlp::InnerSolver;
use crate::seqtrain::{Integrator, SeqTrainConfig};
use crate::train::CollocationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Collocation,
    Sequential,
    Hybrid,
    Admm,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Collocation => "collocation",
            Mode::Sequential => "sequential",
            Mode::Hybrid => "hybrid",
            Mode::Admm => "admm",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collocation" => Ok(Mode::Collocation),
            "sequential" => Ok(Mode::Sequential),
            "hybrid" => Ok(Mode::Hybrid),
            "admm" => Ok(Mode::Admm),
            other => Err(Error::parse("train.mode", format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub mu: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub y0: Vec<f64>,
    pub t0: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub sigma: f64,
    /// Read `train.csv`/`test.csv` from here instead of generating.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub time_input: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed; the noise and initialisation seeds derive from it
    /// unless set explicitly.
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub system: SystemConfig,
    pub data: DataConfig,
    pub net: NetConfig,
    pub mode: Mode,
    pub collocation: CollocationConfig,
    pub sequential: SeqTrainConfig,
    /// Fraction of the training rows (from the start) used by the
    /// collocation phase of hybrid training.
    pub pretrain_fraction: f64,
    pub admm: AdmmConfig,
    pub admm_batches: usize,
    pub output_dir: PathBuf,
}

/// Collocation grid size used when the config does not say otherwise.
pub const DEFAULT_NODES: usize = 60;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let collocation = CollocationConfig {
            n_nodes: Some(DEFAULT_NODES),
            ..Default::default()
        };
        Self {
            seed: 0,
            noise_seed: None,
            init_seed: None,
            system: SystemConfig {
                mu: 1.0,
                amplitude: 1.0,
                omega: 1.0,
                y0: vec![0.0, 1.0],
                t0: 0.0,
                t_end: 12.0,
            },
            data: DataConfig {
                n_train: 200,
                n_test: 200,
                sigma: 0.1,
                dir: None,
            },
            net: NetConfig {
                hidden: vec![32],
                time_input: false,
            },
            mode: Mode::Collocation,
            admm: AdmmConfig {
                collocation: collocation.clone(),
                ..Default::default()
            },
            collocation,
            sequential: SeqTrainConfig::default(),
            pretrain_fraction: 0.2,
            admm_batches: 2,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Seed number `stream` derived from `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::parse(key, format!("cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::parse(key, format!("expected true or false, got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `none` or a value.
fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn noise_seed(&self) -> u64 {
        self.noise_seed.unwrap_or_else(|| derive_seed(self.seed, 1))
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or_else(|| derive_seed(self.seed, 2))
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.collocation.solver;
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
            }
            "noise_seed" => self.noise_seed = parse_opt(key, v)?,
            "init_seed" => self.init_seed = parse_opt(key, v)?,
            "system.mu" => self.system.mu = parse(key, v)?,
            "system.amplitude" => self.system.amplitude = parse(key, v)?,
            "system.omega" => self.system.omega = parse(key, v)?,
            "system.y0" => self.system.y0 = parse_list(key, v)?,
            "system.t0" => self.system.t0 = parse(key, v)?,
            "system.t_end" => self.system.t_end = parse(key, v)?,
            "data.n_train" => self.data.n_train = parse(key, v)?,
            "data.n_test" => self.data.n_test = parse(key, v)?,
            "data.sigma" => self.data.sigma = parse(key, v)?,
            "data.dir" => self.data.dir = parse_opt(key, v)?,
            "net.hidden" => self.net.hidden = parse_list(key, v)?,
            "net.time_input" => self.net.time_input = parse_bool(key, v)?,
            "train.mode" => self.mode = parse(key, v)?,
            "collocation.nodes" => {
                self.collocation.n_nodes = if v == "data" { None } else { Some(parse(key, v)?) }
            }
            "collocation.lambda" => self.collocation.lambda_reg = parse(key, v)?,
            "collocation.regularize_biases" => self.collocation.regularize_biases = parse_bool(key, v)?,
            "collocation.loess_span" => self.collocation.loess_span = parse(key, v)?,
            "collocation.checkpoint_seconds" => self.collocation.checkpoint_seconds = parse_opt(key, v)?,
            "solver.inner" => s.inner_solver = parse::<InnerSolver>(key, v)?,
            "solver.max_outer_iters" => s.max_outer_iters = parse(key, v)?,
            "solver.max_inner_iters" => s.max_inner_iters = parse(key, v)?,
            "solver.constraint_tol" => s.constraint_tol = parse(key, v)?,
            "solver.opt_tol" => s.opt_tol = parse(key, v)?,
            "solver.rho0" => s.rho0 = parse(key, v)?,
            "solver.rho_growth" => s.rho_growth = parse(key, v)?,
            "solver.time_limit" => s.time_limit = parse_opt(key, v)?,
            "solver.lbfgs_memory" => s.lbfgs_memory = parse(key, v)?,
            "solver.check_jacobian" => s.check_jacobian = parse_bool(key, v)?,
            "sequential.integrator" => self.sequential.integrator = parse::<Integrator>(key, v)?,
            "sequential.substeps" => self.sequential.substeps = parse_opt(key, v)?,
            "sequential.lr" => self.sequential.adam.lr = parse(key, v)?,
            "sequential.beta1" => self.sequential.adam.beta1 = parse(key, v)?,
            "sequential.beta2" => self.sequential.adam.beta2 = parse(key, v)?,
            "sequential.eps" => self.sequential.adam.eps = parse(key, v)?,
            "sequential.epochs" => self.sequential.epochs = parse(key, v)?,
            "sequential.time_limit" => self.sequential.time_limit = parse_opt(key, v)?,
            "hybrid.pretrain_fraction" => self.pretrain_fraction = parse(key, v)?,
            "admm.batches" => self.admm_batches = parse(key, v)?,
            "admm.rho" => self.admm.rho = parse(key, v)?,
            "admm.max_iters" => self.admm.max_iters = parse(key, v)?,
            "admm.tol_scale" => self.admm.tol_scale = parse(key, v)?,
            "admm.parallel" => self.admm.parallel = parse_bool(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::parse("config", format!("unknown key '{other}'"))),
        }
        self.collocation.solver.seed = self.seed;
        self.sequential.seed = self.seed;
        self.admm.collocation = self.collocation.clone();
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse("override", format!("expected key=value, got '{kv}'")))?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<()> {
        let sys = &self.system;
        if !(sys.t_end > sys.t0) {
            return Err(Error::InvalidInterval {
                t0: sys.t0,
                t_end: sys.t_end,
            });
        }
        if sys.y0.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "system.y0 needs 2 values, got {}",
                sys.y0.len()
            )));
        }
        if self.data.n_train < 2 {
            return Err(Error::InvalidArgument("data.n_train must be at least 2".into()));
        }
        if self.data.n_test == 1 {
            return Err(Error::InvalidArgument("data.n_test must be 0 or at least 2".into()));
        }
        if !(self.data.sigma >= 0.0) {
            return Err(Error::InvalidArgument("data.sigma must be >= 0".into()));
        }
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return Err(Error::InvalidArgument("net.hidden needs positive widths".into()));
        }
        if !(self.pretrain_fraction > 0.0 && self.pretrain_fraction <= 1.0) {
            return Err(Error::InvalidArgument("hybrid.pretrain_fraction must lie in (0, 1]".into()));
        }
        if self.admm_batches < 2 {
            return Err(Error::InvalidArgument("admm.batches must be at least 2".into()));
        }
        self.collocation.solver.validate()?;
        self.sequential.validate()?;
        Ok(())
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let c = &self.collocation;
        let s = &c.solver;
        let q = &self.sequential;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("seed", self.seed.to_string());
        put("noise_seed", self.noise_seed().to_string());
        put("init_seed", self.init_seed().to_string());
        put("system.mu", self.system.mu.to_string());
        put("system.amplitude", self.system.amplitude.to_string());
        put("system.omega", self.system.omega.to_string());
        put("system.y0", list(&self.system.y0));
        put("system.t0", self.system.t0.to_string());
        put("system.t_end", self.system.t_end.to_string());
        put("data.n_train", self.data.n_train.to_string());
        put("data.n_test", self.data.n_test.to_string());
        put("data.sigma", self.data.sigma.to_string());
        put(
            "data.dir",
            self.data
                .dir
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        );
        put("net.hidden", list(&self.net.hidden));
        put("net.time_input", self.net.time_input.to_string());
        put("train.mode", self.mode.as_str().to_string());
        put("collocation.nodes", opt(&c.n_nodes, "data"));
        put("collocation.lambda", c.lambda_reg.to_string());
        put("collocation.regularize_biases", c.regularize_biases.to_string());
        put("collocation.loess_span", c.loess_span.to_string());
        put("collocation.checkpoint_seconds", opt(&c.checkpoint_seconds, "none"));
        put("solver.inner", s.inner_solver.as_str().to_string());
        put("solver.max_outer_iters", s.max_outer_iters.to_string());
        put("solver.max_inner_iters", s.max_inner_iters.to_string());
        put("solver.constraint_tol", s.constraint_tol.to_string());
        put("solver.opt_tol", s.opt_tol.to_string());
        put("solver.rho0", s.rho0.to_string());
        put("solver.rho_growth", s.rho_growth.to_string());
        put("solver.time_limit", opt(&s.time_limit, "none"));
        put("solver.lbfgs_memory", s.lbfgs_memory.to_string());
        put("solver.check_jacobian", s.check_jacobian.to_string());
        put("sequential.integrator", q.integrator.as_str().to_string());
        put("sequential.substeps", opt(&q.substeps, "auto"));
        put("sequential.lr", q.adam.lr.to_string());
        put("sequential.beta1", q.adam.beta1.to_string());
        put("sequential.beta2", q.adam.beta2.to_string());
        put("sequential.eps", q.adam.eps.to_string());
        put("sequential.epochs", q.epochs.to_string());
        put("sequential.time_limit", opt(&q.time_limit, "none"));
        put("hybrid.pretrain_fraction", self.pretrain_fraction.to_string());
        put("admm.batches", self.admm_batches.to_string());
        put("admm.rho", self.admm.rho.to_string());
        put("admm.max_iters", self.admm.max_iters.to_string());
        put("admm.tol_scale", self.admm.tol_scale.to_string());
        put("admm.parallel", self.admm.parallel.to_string());
        put("output.dir", self.output_dir.display().to_string());
        out
    }
}
