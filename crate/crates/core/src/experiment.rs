//! Experiment pipeline behind the command-line tool: data generation,
//! training in every mode, evaluation and run comparison.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::admm::{self, AdmmStatus};
use crate::config::{derive_seed, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::neuralnet::Mlp;
use crate::nlp::SolveStatus;
use crate::odesim::{self, vdp_system};
use crate::prep::{self, Dataset, Meta};
use crate::seqtrain::{self, EvalMode, SeqStatus};
use crate::train;

/// Step bound of the reference integration used to generate data.
pub const GENERATION_MAX_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train_clean: Dataset,
    pub train: Dataset,
    pub test_clean: Dataset,
    pub test: Dataset,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Test interval `[T, 2T - t0]`: contiguous with training, equal length.
pub fn test_interval(cfg: &ExperimentConfig) -> (f64, f64) {
    let s = &cfg.system;
    (s.t_end, 2.0 * s.t_end - s.t0)
}

fn simulate(cfg: &ExperimentConfig, y0: &[f64], times: &[f64], what: &str) -> Result<Dataset> {
    let s = &cfg.system;
    let sys = vdp_system(s.mu, s.amplitude, s.omega);
    let traj = odesim::rk4_integrate(&sys, y0, times, odesim::substeps_for(times, GENERATION_MAX_STEP))?;
    let mut ds = Dataset::new(traj.times, traj.states)?;
    let m = &mut ds.meta;
    m.set("system", "forced van der pol");
    m.set("system.mu", s.mu);
    m.set("system.amplitude", s.amplitude);
    m.set("system.omega", s.omega);
    m.set("interval", format!("{},{}", times[0], times[times.len() - 1]));
    m.set("split", what);
    m.push_step(format!("rk4 reference, step <= {GENERATION_MAX_STEP}"));
    Ok(ds)
}

/// Simulates the system on the training and test intervals and adds noise.
/// The test trajectory continues the training one.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let s = &cfg.system;
    let train_clean = simulate(cfg, &s.y0, &linspace(s.t0, s.t_end, cfg.data.n_train), "train")?;
    let noise = cfg.noise_seed();
    let train = prep::add_noise(&train_clean, cfg.data.sigma, derive_seed(noise, 1))?;
    let (test_clean, test) = if cfg.data.n_test == 0 {
        (train_clean.clone(), train.clone())
    } else {
        let (a, b) = test_interval(cfg);
        let y_t = train_clean.row(train_clean.len() - 1);
        let clean = simulate(cfg, &y_t, &linspace(a, b, cfg.data.n_test), "test")?;
        let noisy = prep::add_noise(&clean, cfg.data.sigma, derive_seed(noise, 2))?;
        (clean, noisy)
    };
    Ok(GeneratedData {
        train_clean,
        train,
        test_clean,
        test,
    })
}

impl GeneratedData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(&dir.join("train.csv"))?;
        self.train_clean.save(&dir.join("train_clean.csv"))?;
        if self.test.times != self.train.times {
            self.test.save(&dir.join("test.csv"))?;
            self.test_clean.save(&dir.join("test_clean.csv"))?;
        }
        Ok(())
    }
}

/// Training and test data for `cfg`: loaded from `data.dir` when set,
/// generated otherwise. The test set is `None` when there is none.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    match &cfg.data.dir {
        Some(dir) => {
            let train = Dataset::load(&dir.join("train.csv"))?;
            let test_path = dir.join("test.csv");
            let test = if test_path.exists() {
                Some(Dataset::load(&test_path)?)
            } else {
                None
            };
            Ok((train, test))
        }
        None => {
            let g = generate_data(cfg)?;
            let test = (cfg.data.n_test > 0).then_some(g.test);
            Ok((g.train, test))
        }
    }
}

/// Untrained network of the configured architecture.
pub fn initial_net(cfg: &ExperimentConfig, d: usize) -> Result<Mlp> {
    Ok(Mlp::for_state(d, &cfg.net.hidden, cfg.net.time_input)?.with_xavier(cfg.init_seed()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    pub status: String,
    /// The trainer reported a failure rather than a usable model.
    pub failed: bool,
    /// Training wall time, excluding data preparation and file I/O.
    pub wall_seconds: f64,
    pub train_mse: f64,
    /// `(elapsed seconds, train MSE)` of intermediate models.
    pub series: Vec<(f64, f64)>,
    /// Trainer trace CSV (`trace.csv`).
    pub trace_csv: String,
    /// Extra trace files, `(file name, content)`.
    pub extra_files: Vec<(String, String)>,
    /// Trainer-specific summary entries.
    pub details: Vec<(String, String)>,
}

fn train_mse(net: &Mlp, data: &Dataset) -> f64 {
    seqtrain::evaluate_mse(net, data, &data.row(0), EvalMode::Train).mse
}

fn colloc_failed(s: SolveStatus) -> bool {
    s == SolveStatus::NumericalFailure
}

fn series_csv(series: &[(f64, f64)]) -> String {
    let mut s = String::from("elapsed_s,train_mse\n");
    for (t, m) in series {
        s.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*m)));
    }
    s
}

fn run_collocation(cfg: &ExperimentConfig, net0: &Mlp, data: &Dataset) -> Result<(train::CollocationFit, Vec<(f64, f64)>)> {
    let fit = train::train_collocation(net0, data, &cfg.collocation)?;
    let mut series: Vec<(f64, f64)> = fit
        .snapshots
        .iter()
        .map(|(t, net)| (*t, train_mse(net, data)))
        .collect();
    if series.last().is_none_or(|(t, _)| *t < fit.solve_seconds) {
        series.push((fit.solve_seconds, train_mse(&fit.net, data)));
    }
    Ok((fit, series))
}

fn collocation_details(fit: &train::CollocationFit) -> Vec<(String, String)> {
    let r = &fit.report;
    vec![
        ("solver.status".into(), r.status.to_string()),
        ("solver.max_violation".into(), fmt_f64(r.max_constraint_violation)),
        ("solver.projected_gradient".into(), fmt_f64(r.projected_gradient)),
        ("solver.objective".into(), fmt_f64(r.objective_final)),
        ("solver.outer_iters".into(), r.outer_iters.to_string()),
        ("solver.inner_iters".into(), r.inner_iters_total.to_string()),
        ("collocation.nodes".into(), fit.problem.n_nodes().to_string()),
    ]
}

/// Trains the configured model on `data`.
pub fn run_training(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net0 = initial_net(cfg, data.dim())?;
    match cfg.mode {
        Mode::Collocation => {
            let (fit, series) = run_collocation(cfg, &net0, data)?;
            Ok(TrainOutcome {
                status: fit.report.status.to_string(),
                failed: colloc_failed(fit.report.status),
                wall_seconds: fit.solve_seconds,
                train_mse: train_mse(&fit.net, data),
                series,
                trace_csv: fit.report.trace_csv(),
                extra_files: Vec::new(),
                details: collocation_details(&fit),
                net: fit.net,
            })
        }
        Mode::Sequential => {
            let start = Instant::now();
            let r = seqtrain::sequential_train(&net0, data, &cfg.sequential)?;
            let wall = start.elapsed().as_secs_f64();
            let mut series = vec![(0.0, train_mse(&net0, data))];
            series.extend(r.trace.iter().map(|e| (e.elapsed_s, e.mse)));
            Ok(TrainOutcome {
                status: r.status.to_string(),
                failed: r.status == SeqStatus::Diverged,
                wall_seconds: wall,
                train_mse: train_mse(&r.net, data),
                series,
                trace_csv: seqtrain::trace_csv(&r.trace),
                extra_files: Vec::new(),
                details: vec![("sequential.epochs_run".into(), r.trace.len().to_string())],
                net: r.net,
            })
        }
        Mode::Hybrid => {
            let n = ((cfg.pretrain_fraction * data.len() as f64).ceil() as usize).clamp(2, data.len());
            let pre = data.slice(0..n)?;
            // keep the LOESS window the same number of points as on the full set
            let mut pre_cfg = cfg.clone();
            pre_cfg.collocation.loess_span = (cfg.collocation.loess_span * data.len() as f64 / n as f64).min(1.0);
            let (fit, mut series) = run_collocation(&pre_cfg, &net0, &pre)?;
            if n < data.len() {
                // the series tracks the full training set
                series = fit
                    .snapshots
                    .iter()
                    .map(|(t, net)| (*t, train_mse(net, data)))
                    .chain(std::iter::once((fit.solve_seconds, train_mse(&fit.net, data))))
                    .collect();
            }
            let mut details = collocation_details(&fit);
            details.push(("hybrid.pretrain_rows".into(), n.to_string()));
            details.push(("hybrid.checkpoint_train_mse".into(), fmt_f64(train_mse(&fit.net, data))));
            if colloc_failed(fit.report.status) {
                return Ok(TrainOutcome {
                    status: fit.report.status.to_string(),
                    failed: true,
                    wall_seconds: fit.solve_seconds,
                    train_mse: train_mse(&fit.net, data),
                    series,
                    trace_csv: fit.report.trace_csv(),
                    extra_files: Vec::new(),
                    details,
                    net: fit.net,
                });
            }
            let start = Instant::now();
            let r = seqtrain::hybrid_pretrain_handoff(&fit.net, &net0, data, &cfg.sequential)?;
            let seq_wall = start.elapsed().as_secs_f64();
            series.extend(r.trace.iter().skip(1).map(|e| (fit.solve_seconds + e.elapsed_s, e.mse)));
            details.push(("sequential.epochs_run".into(), (r.trace.len() - 1).to_string()));
            Ok(TrainOutcome {
                status: r.status.to_string(),
                failed: r.status == SeqStatus::Diverged,
                wall_seconds: fit.solve_seconds + seq_wall,
                train_mse: train_mse(&r.net, data),
                series,
                trace_csv: seqtrain::trace_csv(&r.trace),
                extra_files: vec![("collocation_trace.csv".into(), fit.report.trace_csv())],
                details,
                net: r.net,
            })
        }
        Mode::Admm => {
            let batches = data.split_contiguous(cfg.admm_batches)?;
            let mut acfg = cfg.admm.clone();
            acfg.keep_history = true;
            let r = admm::admm_train(&batches, &net0, &acfg)?;
            let wall = r.elapsed.last().copied().unwrap_or(0.0);
            let series = r
                .history
                .iter()
                .zip(&r.elapsed)
                .map(|(it, t)| {
                    let net = net0.clone().with_theta(it.consensus.clone())?;
                    Ok((*t, train_mse(&net, data)))
                })
                .collect::<Result<Vec<_>>>()?;
            let residuals = &r.state.primal_residuals;
            let details = vec![
                ("admm.iterations".into(), residuals.len().to_string()),
                ("admm.first_residual".into(), residuals.first().map_or("none".into(), |v| fmt_f64(*v))),
                ("admm.final_residual".into(), residuals.last().map_or("none".into(), |v| fmt_f64(*v))),
            ];
            Ok(TrainOutcome {
                status: r.status.to_string(),
                failed: matches!(r.status, AdmmStatus::SubproblemFailed { .. }),
                wall_seconds: wall,
                train_mse: train_mse(&r.net, data),
                series,
                trace_csv: r.residual_csv(),
                extra_files: Vec::new(),
                details,
                net: r.net,
            })
        }
    }
}

/// Summary record of a trained model.
pub fn summarize(cfg: &ExperimentConfig, out: &TrainOutcome, test: Option<&Dataset>) -> Meta {
    let mut m = Meta::default();
    m.set("mode", cfg.mode.as_str());
    m.set("hidden", cfg.net.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
    m.set("n_params", out.net.n_params());
    m.set("seed", cfg.seed);
    m.set("status", &out.status);
    m.set("failed", out.failed);
    m.set("train_mse", fmt_f64(out.train_mse));
    match test {
        Some(t) => {
            let e = seqtrain::evaluate_mse(&out.net, t, &t.row(0), EvalMode::Test);
            m.set("test_mse", fmt_f64(e.mse));
            if let Some(at) = e.diverged_at {
                m.set("test_diverged_at", fmt_f64(at));
            }
        }
        None => m.set("test_mse", "none"),
    }
    m.set("wall_seconds", fmt_f64(out.wall_seconds));
    for (k, v) in &out.details {
        m.set(k.clone(), v);
    }
    m
}

fn write(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Writes a run directory: resolved config, checkpoint, traces, series and
/// summary.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &TrainOutcome, summary: &Meta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    out.net.save(&dir.join("checkpoint.txt"))?;
    write(&dir.join("trace.csv"), &out.trace_csv)?;
    write(&dir.join("series.csv"), &series_csv(&out.series))?;
    for (name, content) in &out.extra_files {
        write(&dir.join(name), content)?;
    }
    write(&dir.join("summary.txt"), &summary.to_text())
}

/// Loads a checkpoint, rolls it out from the dataset's first row and
/// reports the MSE.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<Meta> {
    let net = Mlp::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    if ds.dim() != net.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.state_dim(),
            got: ds.dim(),
        });
    }
    let e = seqtrain::evaluate_mse(&net, &ds, &ds.row(0), EvalMode::Train);
    let mut m = Meta::default();
    m.set("checkpoint", checkpoint.display());
    m.set("data", data.display());
    m.set("rows", ds.len());
    m.set("mse", fmt_f64(e.mse));
    if let Some(at) = e.diverged_at {
        m.set("diverged_at", fmt_f64(at));
    }
    Ok(m)
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "run", "mode", "hidden", "n_params", "seed", "status", "train_mse", "test_mse", "time_s",
];

/// Merges run summaries into `comparison.csv` and copies each run's
/// `series.csv` to `series_<run>.csv` under `out`. Returns the number of
/// runs included; unreadable runs are skipped with a warning.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<usize> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut table = REPORT_COLUMNS.join(",");
    table.push('\n');
    let mut count = 0;
    for run in runs {
        let name = run
            .file_name()
            .map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        let summary = match std::fs::read_to_string(run.join("summary.txt")) {
            Ok(text) => Meta::from_text(&text)?,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", run.display());
                continue;
            }
        };
        let get = |k: &str| summary.get(k).unwrap_or("").to_string();
        let row = [
            name.clone(),
            get("mode"),
            format!("\"{}\"", get("hidden")),
            get("n_params"),
            get("seed"),
            get("status"),
            get("train_mse"),
            get("test_mse"),
            get("wall_seconds"),
        ];
        table.push_str(&row.join(","));
        table.push('\n');
        if let Ok(series) = std::fs::read_to_string(run.join("series.csv")) {
            write(&out.join(format!("series_{name}.csv")), &series)?;
        }
        count += 1;
    }
    write(&out.join("comparison.csv"), &table)?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "system.t_end = 2\ndata.n_train = 21\ndata.n_test = 21\nnet.hidden = 4\n\
             collocation.nodes = 8\ncollocation.loess_span = 0.3\nsequential.epochs = 3\nadmm.max_iters = 2\nseed = 5\n",
        )
        .unwrap();
        cfg
    }

    #[test]
    fn generated_data_shapes_and_intervals() {
        let cfg = ExperimentConfig::default();
        let g = generate_data(&cfg).unwrap();
        assert_eq!((g.train.len(), g.train.dim()), (200, 2));
        assert_eq!((g.test.len(), g.test.dim()), (200, 2));
        assert_eq!(g.train.t0(), 0.0);
        assert_eq!(g.train.t_end(), cfg.system.t_end);
        assert_eq!(g.test.t0(), cfg.system.t_end);
        assert_eq!(g.test.t_end(), 2.0 * cfg.system.t_end);
        // the test trajectory continues the training one
        assert_eq!(g.test_clean.row(0), g.train_clean.row(199));
        assert_eq!(g.train_clean.row(0), vec![0.0, 1.0]);
        assert_ne!(g.train.y_obs, g.train_clean.y_obs);
    }

    #[test]
    fn zero_noise_keeps_clean_data() {
        let mut cfg = small_config();
        cfg.set("data.sigma", "0").unwrap();
        let g = generate_data(&cfg).unwrap();
        assert_eq!(g.train.y_obs, g.train_clean.y_obs);
        assert_eq!(g.test.y_obs, g.test_clean.y_obs);
    }

    #[test]
    fn every_mode_produces_a_summary() {
        let base = small_config();
        let (train, test) = load_or_generate(&base).unwrap();
        for mode in ["collocation", "sequential", "hybrid", "admm"] {
            let mut cfg = base.clone();
            cfg.set("train.mode", mode).unwrap();
            let out = run_training(&cfg, &train).unwrap();
            let s = summarize(&cfg, &out, test.as_ref());
            assert_eq!(s.get("mode"), Some(mode));
            let mse: f64 = s.get("train_mse").unwrap().parse().unwrap();
            assert!(mse.is_finite(), "{mode}");
            assert!(s.get("test_mse").unwrap().parse::<f64>().is_ok(), "{mode}");
            assert!(!out.series.is_empty(), "{mode}");
        }
    }

    #[test]
    fn hybrid_without_epochs_matches_collocation() {
        let mut cfg = small_config();
        cfg.set("sequential.epochs", "0").unwrap();
        cfg.set("hybrid.pretrain_fraction", "1").unwrap();
        let (train, _) = load_or_generate(&cfg).unwrap();
        cfg.set("train.mode", "collocation").unwrap();
        let c = run_training(&cfg, &train).unwrap();
        cfg.set("train.mode", "hybrid").unwrap();
        let h = run_training(&cfg, &train).unwrap();
        assert_eq!(c.net, h.net);
        assert_eq!(c.train_mse, h.train_mse);
    }
}
