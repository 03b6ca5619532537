//! Observation datasets and preprocessing: measurement noise, resampling onto
//! a collocation grid, and LOESS smoothing used to initialise state variables.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::colloc::CollocationGrid;
use crate::error::{Error, Result};
use crate::odesim::{parse_table_csv, write_table_csv};

/// Default LOESS span (fraction of points in each local window).
pub const DEFAULT_LOESS_SPAN: f64 = 0.1;

/// Ordered key-value provenance record. Processing steps are appended as
/// `step.<k>` entries and never removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta {
    entries: Vec<(String, String)>,
}

impl Meta {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_step(&mut self, description: impl ToString) {
        let k = self.steps().len();
        self.entries
            .push((format!("step.{k}"), description.to_string()));
    }

    pub fn steps(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with("step."))
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut meta = Meta::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("metadata", format!("expected 'key = value', got '{line}'")))?;
            meta.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    /// `N x d`, one row per time point.
    pub y_obs: DMatrix<f64>,
    pub meta: Meta,
}

impl Dataset {
    pub fn new(times: Vec<f64>, y_obs: DMatrix<f64>) -> Result<Self> {
        if times.len() != y_obs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: y_obs.nrows(),
            });
        }
        if times.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("times must be strictly increasing".into()));
        }
        if times.iter().chain(y_obs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Self {
            times,
            y_obs,
            meta: Meta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.y_obs.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.y_obs.row(i).iter().copied().collect()
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Contiguous sub-range of rows, with provenance carried over.
    pub fn slice(&self, range: Range<usize>) -> Result<Dataset> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "row range {range:?} invalid for {} rows",
                self.len()
            )));
        }
        let mut out = Dataset::new(
            self.times[range.clone()].to_vec(),
            self.y_obs.rows(range.start, range.len()).into_owned(),
        )?;
        out.meta = self.meta.clone();
        out.meta.push_step(format!("slice rows {}..{}", range.start, range.end));
        Ok(out)
    }

    /// Splits into `b` contiguous batches of (nearly) equal size.
    pub fn split_contiguous(&self, b: usize) -> Result<Vec<Dataset>> {
        if b == 0 || b > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} rows into {b} batches",
                self.len()
            )));
        }
        let n = self.len();
        (0..b)
            .map(|i| self.slice(i * n / b..(i + 1) * n / b))
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        write_table_csv(&self.times, &self.y_obs)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let (times, y) = parse_table_csv(text)?;
        Dataset::new(times, y)
    }

    /// Sidecar metadata path for a dataset CSV: `<file>.meta`.
    pub fn meta_path(csv_path: &Path) -> PathBuf {
        let mut s = csv_path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv_string()).map_err(|e| Error::io(csv_path, e))?;
        let meta_path = Self::meta_path(csv_path);
        std::fs::write(&meta_path, self.meta.to_text()).map_err(|e| Error::io(&meta_path, e))
    }

    /// Loads a dataset CSV and, when present, its sidecar metadata.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut ds = Self::from_csv_str(&text)?;
        let meta_path = Self::meta_path(csv_path);
        if meta_path.exists() {
            let mt = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            ds.meta = Meta::from_text(&mt)?;
        }
        Ok(ds)
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every observation.
pub fn add_noise(data: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = data.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        // row-major draw order, so the noise realisation does not depend on storage layout
        for i in 0..out.y_obs.nrows() {
            for k in 0..out.y_obs.ncols() {
                out.y_obs[(i, k)] += normal.sample(&mut rng);
            }
        }
    }
    out.meta.set("noise.sigma", sigma);
    out.meta.set("noise.seed", seed);
    out.meta.push_step(format!("gaussian noise sigma={sigma} seed={seed}"));
    Ok(out)
}

fn lerp_at(times: &[f64], column: impl Fn(usize) -> f64, t: f64) -> f64 {
    // index of the first data time >= t
    let j = times.partition_point(|&x| x < t);
    if j < times.len() && times[j] == t {
        return column(j);
    }
    let (a, b) = (j - 1, j);
    let s = (t - times[a]) / (times[b] - times[a]);
    column(a) + s * (column(b) - column(a))
}

/// Piecewise-linear interpolation of every state column onto the grid nodes.
pub fn resample_to_grid(data: &Dataset, grid: &CollocationGrid) -> Result<Dataset> {
    let (lo, hi) = (data.t0(), data.t_end());
    let slack = 1e-12 * (hi - lo).abs().max(1.0);
    let nodes = &grid.nodes_time;
    if nodes[0] < lo - slack || nodes[nodes.len() - 1] > hi + slack {
        return Err(Error::InvalidArgument(format!(
            "grid [{}, {}] extends beyond data range [{lo}, {hi}]",
            nodes[0],
            nodes[nodes.len() - 1]
        )));
    }
    let d = data.dim();
    let mut y = DMatrix::zeros(nodes.len(), d);
    for (i, &t) in nodes.iter().enumerate() {
        let t = t.clamp(lo, hi);
        for k in 0..d {
            y[(i, k)] = if data.len() == 1 {
                data.y_obs[(0, k)]
            } else {
                lerp_at(&data.times, |r| data.y_obs[(r, k)], t)
            };
        }
    }
    let mut out = Dataset::new(nodes.clone(), y)?;
    out.meta = data.meta.clone();
    out.meta
        .push_step(format!("linear resample onto {}-node grid [{}, {}]", nodes.len(), grid.t0, grid.t_end));
    Ok(out)
}

/// LOESS smoother: local linear fit with tricube weights over the
/// `span * N` nearest neighbours of each data time, no robustness passes.
pub fn loess_smooth(data: &Dataset, span: f64) -> Result<Dataset> {
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::InvalidArgument(format!("loess span must be in (0, 1], got {span}")));
    }
    let n = data.len();
    let q = (span * n as f64 + 1e-9).floor() as usize;
    if q < 3 {
        return Err(Error::InvalidArgument(format!(
            "loess window of {q} points (span {span}, {n} points) is below the minimum of 3"
        )));
    }
    let t = &data.times;
    let d = data.dim();
    let mut smoothed = DMatrix::zeros(n, d);
    let mut lo = 0usize;
    let mut weights = vec![0.0; q];
    for i in 0..n {
        while lo + q < n && t[i] - t[lo] > t[lo + q] - t[i] {
            lo += 1;
        }
        let window = lo..lo + q;
        // slightly inflated so the outermost window points keep a nonzero weight
        let max_dist = 1.001 * (t[i] - t[lo]).max(t[lo + q - 1] - t[i]);
        for (w, j) in weights.iter_mut().zip(window.clone()) {
            let u = if max_dist > 0.0 { (t[j] - t[i]).abs() / max_dist } else { 0.0 };
            *w = if u < 1.0 { (1.0 - u * u * u).powi(3) } else { 0.0 };
        }
        // weighted least squares in local coordinates x = t_j - t_i
        let (mut sw, mut sx, mut sxx) = (0.0, 0.0, 0.0);
        for (w, j) in weights.iter().zip(window.clone()) {
            let x = t[j] - t[i];
            sw += w;
            sx += w * x;
            sxx += w * x * x;
        }
        let det = sw * sxx - sx * sx;
        if sw <= 0.0 || det <= 1e-14 * sw * sxx.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidArgument(format!(
                "loess window around t = {} has too few distinct weighted points",
                t[i]
            )));
        }
        for k in 0..d {
            let (mut sy, mut sxy) = (0.0, 0.0);
            for (w, j) in weights.iter().zip(window.clone()) {
                let x = t[j] - t[i];
                let y = data.y_obs[(j, k)];
                sy += w * y;
                sxy += w * x * y;
            }
            // intercept of the local line
            smoothed[(i, k)] = (sxx * sy - sx * sxy) / det;
        }
    }
    let mut out = data.clone();
    out.y_obs = smoothed;
    out.meta.set("loess.span", span);
    out.meta.push_step(format!("loess degree=1 span={span}"));
    Ok(out)
}

/// Initial state block for the collocation problem: LOESS on the raw data,
/// then linear resampling onto the grid. Returns `n_nodes x d`.
pub fn init_states(data: &Dataset, grid: &CollocationGrid, span: f64) -> Result<DMatrix<f64>> {
    let smooth = loess_smooth(data, span)?;
    Ok(resample_to_grid(&smooth, grid)?.y_obs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn dataset_from(times: Vec<f64>, f: impl Fn(f64, usize) -> f64, d: usize) -> Dataset {
        let y = DMatrix::from_fn(times.len(), d, |i, k| f(times[i], k));
        Dataset::new(times, y).unwrap()
    }

    #[test]
    fn zero_noise_is_identity_and_seeds_repeat() {
        let ds = dataset_from(linspace(0.0, 1.0, 20), |t, k| t * (k as f64 + 1.0), 2);
        assert_eq!(add_noise(&ds, 0.0, 3).unwrap().y_obs, ds.y_obs);
        let a = add_noise(&ds, 0.1, 3).unwrap();
        assert_eq!(a, add_noise(&ds, 0.1, 3).unwrap());
        assert_ne!(a.y_obs, add_noise(&ds, 0.1, 4).unwrap().y_obs);
        assert!(add_noise(&ds, -1.0, 3).is_err());
        assert_eq!(a.meta.get("noise.sigma"), Some("0.1"));
    }

    #[test]
    fn noise_level_matches_sigma() {
        let ds = dataset_from(linspace(0.0, 10.0, 200), |t, k| (t + k as f64).sin(), 2);
        for seed in 0..50 {
            let noisy = add_noise(&ds, 0.1, seed).unwrap();
            let diff: Vec<f64> = (&noisy.y_obs - &ds.y_obs).iter().copied().collect();
            let m = diff.iter().sum::<f64>() / diff.len() as f64;
            let var = diff.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (diff.len() - 1) as f64;
            let sd = var.sqrt();
            assert!((0.08..=0.12).contains(&sd), "seed {seed}: sd {sd}");
        }
    }

    #[test]
    fn resample_examples() {
        let ds = dataset_from(vec![0.0, 1.0], |t, _| t, 1);
        let grid = CollocationGrid::build(3, 0.0, 1.0).unwrap();
        let r = resample_to_grid(&ds, &grid).unwrap();
        assert_eq!(r.y_obs[(1, 0)], 0.5);
        assert_eq!(r.times, grid.nodes_time);

        // grid nodes that coincide with data times are copied exactly
        let ds = dataset_from(vec![-1.0, 0.0, 1.0], |t, _| (3.0 * t).exp(), 1);
        let grid = CollocationGrid::build(3, -1.0, 1.0).unwrap();
        assert_eq!(resample_to_grid(&ds, &grid).unwrap().y_obs, ds.y_obs);

        let grid = CollocationGrid::build(3, -1.0, 1.5).unwrap();
        assert!(resample_to_grid(&ds, &grid).is_err());
    }

    #[test]
    fn resample_quadratic_error_bound() {
        let times: Vec<f64> = (0..=400).map(|i| i as f64 * 0.005).collect();
        let ds = dataset_from(times, |t, _| 3.0 * t * t - t, 1);
        let grid = CollocationGrid::build(50, 0.0, 2.0).unwrap();
        let r = resample_to_grid(&ds, &grid).unwrap();
        for (i, t) in grid.nodes_time.iter().enumerate() {
            assert!((r.y_obs[(i, 0)] - (3.0 * t * t - t)).abs() <= 1e-4);
        }
    }

    #[test]
    fn resample_is_exact_on_affine_data() {
        let ds = dataset_from(linspace(0.0, 3.0, 17), |t, k| 2.0 * t - 1.0 + k as f64, 2);
        let grid = CollocationGrid::build(23, 0.0, 3.0).unwrap();
        let r = resample_to_grid(&ds, &grid).unwrap();
        for (i, t) in grid.nodes_time.iter().enumerate() {
            for k in 0..2 {
                assert!((r.y_obs[(i, k)] - (2.0 * t - 1.0 + k as f64)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn loess_reproduces_lines() {
        let ds = dataset_from(linspace(0.0, 5.0, 60), |t, k| 0.7 * t - 2.0 * k as f64, 2);
        let s = loess_smooth(&ds, 0.1).unwrap();
        assert!((s.y_obs - &ds.y_obs).abs().max() < 1e-10);
        let uneven: Vec<f64> = (0..40).map(|i| (i as f64).powf(1.3)).collect();
        let ds = dataset_from(uneven, |t, _| 4.0 - 0.25 * t, 1);
        let s = loess_smooth(&ds, 0.2).unwrap();
        assert!((s.y_obs - &ds.y_obs).abs().max() < 1e-10);
    }

    #[test]
    fn loess_reduces_variance_of_noisy_constant() {
        let clean = dataset_from(linspace(0.0, 1.0, 100), |_, _| 2.5, 1);
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        for seed in 0..10 {
            let noisy = add_noise(&clean, 0.3, seed).unwrap();
            let s = loess_smooth(&noisy, 0.1).unwrap();
            assert!(var(s.y_obs.as_slice()) <= var(noisy.y_obs.as_slice()));
        }
    }

    #[test]
    fn loess_beats_raw_noise_on_sine() {
        let clean = dataset_from(linspace(0.0, 10.0, 200), |t, _| t.sin(), 1);
        let noisy = add_noise(&clean, 0.1, 42).unwrap();
        let s = loess_smooth(&noisy, 0.1).unwrap();
        let rmse = |a: &DMatrix<f64>| ((a - &clean.y_obs).norm_squared() / 200.0).sqrt();
        assert!(rmse(&s.y_obs) < rmse(&noisy.y_obs));
    }

    #[test]
    fn loess_rejects_small_windows() {
        let ds = dataset_from(linspace(0.0, 1.0, 20), |t, _| t, 1);
        assert!(loess_smooth(&ds, 0.1).is_err());
        assert!(loess_smooth(&ds, 0.0).is_err());
        assert!(loess_smooth(&ds, 1.5).is_err());
        assert!(loess_smooth(&ds, 0.15).is_ok());
    }

    #[test]
    fn init_states_shapes_and_linear_exactness() {
        let ds = dataset_from(linspace(0.0, 2.0, 200), |t, k| 1.0 - t + k as f64 * t, 2);
        let grid = CollocationGrid::build(50, 0.0, 2.0).unwrap();
        let y = init_states(&ds, &grid, 0.1).unwrap();
        assert_eq!(y.shape(), (50, 2));
        for (i, t) in grid.nodes_time.iter().enumerate() {
            assert!((y[(i, 0)] - (1.0 - t)).abs() < 1e-10);
            assert!((y[(i, 1)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn meta_accumulates_steps_and_round_trips() {
        let ds = dataset_from(linspace(0.0, 1.0, 40), |t, _| t, 1);
        let a = add_noise(&ds, 0.1, 1).unwrap();
        let b = loess_smooth(&a, 0.1).unwrap();
        assert_eq!(b.meta.steps().len(), 2);
        assert_eq!(Meta::from_text(&b.meta.to_text()).unwrap(), b.meta);
    }

    #[test]
    fn split_covers_all_rows() {
        let ds = dataset_from(linspace(0.0, 1.0, 301), |t, _| t, 1);
        let parts = ds.split_contiguous(2).unwrap();
        assert_eq!(parts[0].len() + parts[1].len(), 301);
        assert_eq!(parts[1].times[0], ds.times[parts[0].len()]);
    }
}
