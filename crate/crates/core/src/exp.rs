//! Experiment harness: configuration, dataset generation and ingestion, the
//! width-sweep / transfer / ensemble drivers, and CSV + plot-script emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::kernel;
use crate::lin;
use crate::linalg::cholesky_solve_vec;
use crate::net::{self, Activation, MlpArchitecture, Parametrization, PriorMean};
use crate::rng;
use crate::train::{self, LearningRate, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    WidthSweep,
    Transfer,
    Ensemble,
    SingleTrain,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::WidthSweep => "width_sweep",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Ensemble => "ensemble",
            ExperimentKind::SingleTrain => "single_train",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "width_sweep" => Ok(ExperimentKind::WidthSweep),
            "transfer" => Ok(ExperimentKind::Transfer),
            "ensemble" => Ok(ExperimentKind::Ensemble),
            "single_train" => Ok(ExperimentKind::SingleTrain),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        dim: usize,
        n_points: usize,
        noise_sigma: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        target_column: String,
        normalize: bool,
    },
}

/// Flat key=value experiment configuration; `parse` and `to_manifest` round
/// trip so a finished run can be replayed from its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    pub depth: usize,
    pub activation: Activation,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    /// `None` selects the automatic rate.
    pub eta0: Option<f64>,
    pub auto_scale: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub record_every: usize,
    pub record_drift: bool,
    pub transfer_n1: usize,
    pub transfer_n2: Vec<usize>,
    pub ensemble_m: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::WidthSweep,
            dataset: DatasetSpec::Synthetic {
                dim: 1,
                n_points: 160,
                noise_sigma: 0.1,
                seed: 1000,
            },
            depth: 2,
            activation: Activation::Erf,
            widths: vec![256, 512, 1024, 2048, 4096],
            seeds: vec![0, 1, 2, 3, 4],
            betas: vec![0.5],
            eta0: None,
            auto_scale: 1.0,
            max_steps: 2000,
            grad_tol: 1e-8,
            record_every: 10,
            record_drift: false,
            transfer_n1: 200,
            transfer_n2: vec![5, 10, 20],
            ensemble_m: 300,
            out_dir: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("bad value {s:?} for {key}")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for {key}")))
}

impl ExperimentConfig {
    /// Parses a flat `key = value` document; `#` starts a comment. Unknown
    /// keys are rejected except `version`, which manifests carry.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => self.kind = ExperimentKind::parse(value)?,
            "data.kind" => match value {
                "synthetic" => {
                    if !matches!(self.dataset, DatasetSpec::Synthetic { .. }) {
                        self.dataset = DatasetSpec::Synthetic {
                            dim: 1,
                            n_points: 160,
                            noise_sigma: 0.1,
                            seed: 1000,
                        };
                    }
                }
                "csv" => {
                    if !matches!(self.dataset, DatasetSpec::Csv { .. }) {
                        self.dataset = DatasetSpec::Csv {
                            path: PathBuf::new(),
                            target_column: String::new(),
                            normalize: true,
                        };
                    }
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown data.kind {other:?}"
                    )))
                }
            },
            "data.dim" => {
                if let DatasetSpec::Synthetic { dim, .. } = &mut self.dataset {
                    *dim = parse_scalar(value, key)?;
                } else {
                    return Err(Error::InvalidConfig("data.dim requires synthetic data".into()));
                }
            }
            "data.n" => {
                if let DatasetSpec::Synthetic { n_points, .. } = &mut self.dataset {
                    *n_points = parse_scalar(value, key)?;
                } else {
                    return Err(Error::InvalidConfig("data.n requires synthetic data".into()));
                }
            }
            "data.noise" => {
                if let DatasetSpec::Synthetic { noise_sigma, .. } = &mut self.dataset {
                    *noise_sigma = parse_scalar(value, key)?;
                } else {
                    return Err(Error::InvalidConfig(
                        "data.noise requires synthetic data".into(),
                    ));
                }
            }
            "data.seed" => {
                if let DatasetSpec::Synthetic { seed, .. } = &mut self.dataset {
                    *seed = parse_scalar(value, key)?;
                } else {
                    return Err(Error::InvalidConfig("data.seed requires synthetic data".into()));
                }
            }
            "data.path" => {
                if let DatasetSpec::Csv { path, .. } = &mut self.dataset {
                    *path = PathBuf::from(value);
                } else {
                    return Err(Error::InvalidConfig("data.path requires csv data".into()));
                }
            }
            "data.target" => {
                if let DatasetSpec::Csv { target_column, .. } = &mut self.dataset {
                    *target_column = value.to_string();
                } else {
                    return Err(Error::InvalidConfig("data.target requires csv data".into()));
                }
            }
            "data.normalize" => {
                if let DatasetSpec::Csv { normalize, .. } = &mut self.dataset {
                    *normalize = parse_scalar(value, key)?;
                } else {
                    return Err(Error::InvalidConfig(
                        "data.normalize requires csv data".into(),
                    ));
                }
            }
            "arch.depth" => self.depth = parse_scalar(value, key)?,
            "arch.activation" => self.activation = Activation::parse(value)?,
            "widths" => self.widths = parse_list(value, key)?,
            "seeds" => self.seeds = parse_list(value, key)?,
            "betas" => self.betas = parse_list(value, key)?,
            "train.eta0" => {
                self.eta0 = if value == "auto" {
                    None
                } else {
                    Some(parse_scalar(value, key)?)
                }
            }
            "train.auto_scale" => self.auto_scale = parse_scalar(value, key)?,
            "train.max_steps" => self.max_steps = parse_scalar(value, key)?,
            "train.grad_tol" => self.grad_tol = parse_scalar(value, key)?,
            "train.record_every" => self.record_every = parse_scalar(value, key)?,
            "train.record_drift" => self.record_drift = parse_scalar(value, key)?,
            "transfer.n1" => self.transfer_n1 = parse_scalar(value, key)?,
            "transfer.n2" => self.transfer_n2 = parse_list(value, key)?,
            "ensemble.m" => self.ensemble_m = parse_scalar(value, key)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "version" => {}
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.seeds.is_empty() || self.betas.is_empty() {
            return Err(Error::InvalidConfig(
                "widths, seeds and betas must be nonempty".into(),
            ));
        }
        if let DatasetSpec::Synthetic {
            dim,
            n_points,
            noise_sigma,
            ..
        } = &self.dataset
        {
            if *dim == 0 || *n_points == 0 {
                return Err(Error::InvalidConfig(
                    "synthetic dim and n must be positive".into(),
                ));
            }
            if *noise_sigma < 0.0 {
                return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Serializes the full configuration as a replayable manifest.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "experiment = {}", self.kind.name());
        match &self.dataset {
            DatasetSpec::Synthetic {
                dim,
                n_points,
                noise_sigma,
                seed,
            } => {
                let _ = writeln!(s, "data.kind = synthetic");
                let _ = writeln!(s, "data.dim = {dim}");
                let _ = writeln!(s, "data.n = {n_points}");
                let _ = writeln!(s, "data.noise = {noise_sigma}");
                let _ = writeln!(s, "data.seed = {seed}");
            }
            DatasetSpec::Csv {
                path,
                target_column,
                normalize,
            } => {
                let _ = writeln!(s, "data.kind = csv");
                let _ = writeln!(s, "data.path = {}", path.display());
                let _ = writeln!(s, "data.target = {target_column}");
                let _ = writeln!(s, "data.normalize = {normalize}");
            }
        }
        let _ = writeln!(s, "arch.depth = {}", self.depth);
        let _ = writeln!(s, "arch.activation = {}", self.activation.name());
        let join = |v: &[String]| v.join(",");
        let _ = writeln!(
            s,
            "widths = {}",
            join(&self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(
            s,
            "seeds = {}",
            join(&self.seeds.iter().map(|w| w.to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(
            s,
            "betas = {}",
            join(&self.betas.iter().map(|w| w.to_string()).collect::<Vec<_>>())
        );
        match self.eta0 {
            Some(e) => {
                let _ = writeln!(s, "train.eta0 = {e}");
            }
            None => {
                let _ = writeln!(s, "train.eta0 = auto");
            }
        }
        let _ = writeln!(s, "train.auto_scale = {}", self.auto_scale);
        let _ = writeln!(s, "train.max_steps = {}", self.max_steps);
        let _ = writeln!(s, "train.grad_tol = {}", self.grad_tol);
        let _ = writeln!(s, "train.record_every = {}", self.record_every);
        let _ = writeln!(s, "train.record_drift = {}", self.record_drift);
        let _ = writeln!(s, "transfer.n1 = {}", self.transfer_n1);
        let _ = writeln!(
            s,
            "transfer.n2 = {}",
            join(&self.transfer_n2.iter().map(|w| w.to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(s, "ensemble.m = {}", self.ensemble_m);
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", dir.display());
        }
        s
    }

    pub fn train_config(&self, beta: f64) -> TrainConfig {
        let mut c = TrainConfig::new(beta);
        c.eta0 = match self.eta0 {
            Some(e) => LearningRate::Fixed(e),
            None => LearningRate::Auto,
        };
        c.auto_scale = self.auto_scale;
        c.max_steps = self.max_steps;
        c.grad_tol = self.grad_tol;
        c.record_every = self.record_every;
        c.record_jacobian_drift = self.record_drift;
        c
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                dim,
                n_points,
                noise_sigma,
                seed,
            } => Ok(gen_synthetic(*n_points, *dim, *noise_sigma, *seed)),
            DatasetSpec::Csv {
                path,
                target_column,
                normalize,
            } => load_csv(path, target_column, *normalize),
        }
    }
}

/// One emitted metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub width: usize,
    pub depth: usize,
    pub beta: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

/// Synthetic regression target: the scaled per-coordinate sum
/// `(1/sqrt(d)) sum_j [sin(x_j) + cos(2 x_j)]`.
pub fn synthetic_target(x: ArrayView1<f64>) -> f64 {
    let d = x.len() as f64;
    x.iter().map(|&v| v.sin() + (2.0 * v).cos()).sum::<f64>() / d.sqrt()
}

fn uniform_inputs(n: usize, dim: usize, seed: u64, index_base: u64) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(i, j)| {
        let idx = index_base + (i * dim + j) as u64;
        -6.0 + 12.0 * rng::uniform(seed, rng::stream::DATA_X, idx)
    })
}

/// Synthetic dataset with an 80/20 train/validation split; inputs uniform on
/// `[-6, 6]^d`, targets `synthetic_target` plus N(0, sigma^2) noise.
pub fn gen_synthetic(n_points: usize, dim: usize, noise_sigma: f64, seed: u64) -> Dataset {
    let x = uniform_inputs(n_points, dim, seed, 0);
    let y = Array1::from_shape_fn(n_points, |i| {
        synthetic_target(x.row(i))
            + noise_sigma * rng::standard_normal(seed, rng::stream::DATA_NOISE, i as u64)
    });
    let n_val = n_points / 5;
    let n_train = n_points - n_val;
    Dataset {
        train_x: x.slice(ndarray::s![..n_train, ..]).to_owned(),
        train_y: y.slice(ndarray::s![..n_train]).to_owned(),
        val_x: x.slice(ndarray::s![n_train.., ..]).to_owned(),
        val_y: y.slice(ndarray::s![n_train..]).to_owned(),
        normalization: Normalization::identity(dim),
    }
}

/// First transfer target: low frequencies shared with task 2 plus its own
/// mid and high frequency terms.
pub fn transfer_target_1(x: f64) -> f64 {
    x.sin() + 0.5 * (5.0 * x).sin() + 0.2 * (20.0 * x).sin()
}

/// Second transfer target, sharing only the `sin(x)` component with task 1.
pub fn transfer_target_2(x: f64) -> f64 {
    x.sin() + 0.3 * (7.0 * x).cos() - 0.2 * (15.0 * x).sin()
}

const TASK2_VAL_POINTS: usize = 200;

/// Two one-dimensional tasks on `[-6, 6]`: task 1 with `n1` training points
/// (plus a 20% validation split) and task 2 with `n2` training points and a
/// fixed 200-point validation grid. `n2 = 0` produces an empty training set.
pub fn gen_transfer_tasks(n1: usize, n2: usize, noise_sigma: f64, seed: u64) -> (Dataset, Dataset) {
    // Index bases keep the four point sets on disjoint draws.
    let n1_val = (n1 / 5).max(1);
    let x1 = uniform_inputs(n1 + n1_val, 1, seed, 0);
    let y1 = Array1::from_shape_fn(n1 + n1_val, |i| {
        transfer_target_1(x1[[i, 0]])
            + noise_sigma * rng::standard_normal(seed, rng::stream::DATA_NOISE, i as u64)
    });
    let task1 = Dataset {
        train_x: x1.slice(ndarray::s![..n1, ..]).to_owned(),
        train_y: y1.slice(ndarray::s![..n1]).to_owned(),
        val_x: x1.slice(ndarray::s![n1.., ..]).to_owned(),
        val_y: y1.slice(ndarray::s![n1..]).to_owned(),
        normalization: Normalization::identity(1),
    };

    let x2 = uniform_inputs(n2, 1, seed, 1_000_000);
    let y2 = Array1::from_shape_fn(n2, |i| {
        transfer_target_2(x2[[i, 0]])
            + noise_sigma
                * rng::standard_normal(seed, rng::stream::DATA_NOISE, 1_000_000 + i as u64)
    });
    let xv = uniform_inputs(TASK2_VAL_POINTS, 1, seed, 2_000_000);
    let yv = Array1::from_shape_fn(TASK2_VAL_POINTS, |i| transfer_target_2(xv[[i, 0]]));
    let task2 = Dataset {
        train_x: x2,
        train_y: y2,
        val_x: xv,
        val_y: yv,
        normalization: Normalization::identity(1),
    };
    (task1, task2)
}

/// Numeric-CSV regression loader. With `normalize`, inputs are centered and
/// uniformly scaled so every row norm is at most 1, and targets are
/// standardized; the transform is stored on the returned dataset.
pub fn load_csv(path: &Path, target_column: &str, normalize: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty csv file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let target_idx = columns
        .iter()
        .position(|c| *c == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_string()))?;
    let dim = columns.len() - 1;
    if dim == 0 {
        return Err(Error::InvalidConfig("csv has no feature columns".into()));
    }

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::ParseError {
                row: row_idx + 2,
                col: cells.len(),
                message: format!("expected {} cells", columns.len()),
            });
        }
        for (col_idx, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::ParseError {
                row: row_idx + 2,
                col: col_idx + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if col_idx == target_idx {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(Error::InvalidConfig("csv has no data rows".into()));
    }
    let mut x = Array2::from_shape_vec((n, dim), xs).expect("csv shape");
    let mut y = Array1::from_vec(ys);

    let normalization = if normalize {
        let x_center = x.mean_axis(Axis(0)).expect("nonempty");
        for mut row in x.rows_mut() {
            row -= &x_center;
        }
        let max_norm = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        let x_scale = if max_norm > 0.0 { max_norm } else { 1.0 };
        x.mapv_inplace(|v| v / x_scale);
        let y_mean = y.mean().expect("nonempty");
        let y_var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };
        y.mapv_inplace(|v| (v - y_mean) / y_std);
        Normalization {
            x_center,
            x_scale,
            y_mean,
            y_std,
        }
    } else {
        Normalization::identity(dim)
    };

    let n_val = n / 5;
    let n_train = n - n_val;
    Ok(Dataset {
        train_x: x.slice(ndarray::s![..n_train, ..]).to_owned(),
        train_y: y.slice(ndarray::s![..n_train]).to_owned(),
        val_x: x.slice(ndarray::s![n_train.., ..]).to_owned(),
        val_y: y.slice(ndarray::s![n_train..]).to_owned(),
        normalization,
    })
}

fn mse(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).iter().map(|v| v * v).sum::<f64>() / a.len() as f64
}

/// Full output of one width-sweep cell, kept so callers can derive further
/// statistics (such as cross-seed spread) without re-training.
pub struct SweepCell {
    pub width: usize,
    pub seed: u64,
    pub beta: f64,
    pub param_diff: f64,
    pub function_diff: f64,
    pub net_val_preds: Array1<f64>,
    pub krr_val_preds: Array1<f64>,
    pub final_grad_norm: f64,
    pub steps: f64,
    pub final_jacobian_drift: Option<f64>,
}

/// Trains the shifted network (zero prior) for one `(width, seed, beta)`
/// cell and compares it against its linearization: parameter distance to the
/// ridge optimum and sup-norm validation gap to the kernel ridge predictions.
pub fn run_sweep_cell(
    config: &ExperimentConfig,
    data: &Dataset,
    width: usize,
    seed: u64,
    beta: f64,
) -> Result<SweepCell> {
    let dim = data.input_dim();
    let arch = MlpArchitecture::new(dim, config.depth, width, config.activation, Parametrization::Ntk);
    let params0 = net::init_params(&arch, seed);
    let tc = config.train_config(beta);
    let (predictor, trace) = train::shifted_train(&arch, &params0, data, &PriorMean::Zero, &tc)?;

    // Ridge optimum of the linearized shifted problem, assembled factored:
    // theta_lin = theta0 + J^T (Theta + beta I)^{-1} y.
    let f_train = net::jacobian_factors(&arch, &params0, &data.train_x)?;
    let f_val = net::jacobian_factors(&arch, &params0, &data.val_x)?;
    let k_xx = kernel::empirical_ntk_factored(&f_train, &f_train, params0.layout(), width, seed);
    let k_tx = kernel::empirical_ntk_factored(&f_val, &f_train, params0.layout(), width, seed);
    let alpha = cholesky_solve_vec(&k_xx.shifted_sym(beta)?, &data.train_y, 0.0)?;
    let mut theta_lin = params0.clone();
    let update = f_train.apply_transpose(&alpha, params0.layout());
    theta_lin.axpy_trainable(1.0, &update);

    let param_diff = lin::param_frobenius_diff(&predictor.params, &theta_lin)?;
    let net_val_preds = predictor.predict_batch(&data.val_x)?;
    let krr_val_preds = k_tx.entries().dot(&alpha);
    let function_diff = lin::function_sup_diff(&net_val_preds, &krr_val_preds)?;
    let last = trace.final_record().expect("nonempty trace");

    Ok(SweepCell {
        width,
        seed,
        beta,
        param_diff,
        function_diff,
        net_val_preds,
        krr_val_preds,
        final_grad_norm: last.grad_norm,
        steps: last.step,
        final_jacobian_drift: last.jacobian_drift,
    })
}

fn cell_rows(kind: &str, cell: &SweepCell, depth: usize, seconds: f64) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| {
        rows.push(ResultRow {
            experiment: kind.to_string(),
            width: cell.width,
            depth,
            beta: cell.beta,
            seed: cell.seed,
            metric,
            value,
            seconds,
        });
    };
    push("param_frobenius_diff".into(), cell.param_diff);
    push("function_sup_diff".into(), cell.function_diff);
    push("final_grad_norm".into(), cell.final_grad_norm);
    push("steps".into(), cell.steps);
    if let Some(d) = cell.final_jacobian_drift {
        push("jacobian_drift".into(), d);
    }
    for (i, v) in cell.net_val_preds.iter().enumerate() {
        push(format!("net_val_pred_{i}"), *v);
    }
    for (i, v) in cell.krr_val_preds.iter().enumerate() {
        push(format!("krr_val_pred_{i}"), *v);
    }
    rows
}

/// Width sweep over `(width, seed, beta)`; training failures become
/// `failed` rows instead of aborting the sweep.
pub fn run_width_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let data = config.load_dataset()?;
    let mut rows = Vec::new();
    for &beta in &config.betas {
        for &width in &config.widths {
            for &seed in &config.seeds {
                let started = Instant::now();
                match run_sweep_cell(config, &data, width, seed, beta) {
                    Ok(cell) => {
                        let secs = started.elapsed().as_secs_f64();
                        rows.extend(cell_rows("width_sweep", &cell, config.depth, secs));
                    }
                    Err(_) => rows.push(ResultRow {
                        experiment: "width_sweep".into(),
                        width,
                        depth: config.depth,
                        beta,
                        seed,
                        metric: "failed".into(),
                        value: 1.0,
                        seconds: started.elapsed().as_secs_f64(),
                    }),
                }
            }
        }
    }
    Ok(rows)
}

/// Transfer comparison: zero-prior training on task 2 against training with
/// the task-1 predictor as prior mean, across `n2` sizes and seeds.
pub fn run_transfer(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let width = config.widths[0];
    let beta = config.betas[0];
    let noise = match &config.dataset {
        DatasetSpec::Synthetic { noise_sigma, .. } => *noise_sigma,
        DatasetSpec::Csv { .. } => {
            return Err(Error::InvalidConfig(
                "transfer experiment requires synthetic data".into(),
            ))
        }
    };
    let tc = config.train_config(beta);
    let mut rows = Vec::new();

    for &seed in &config.seeds {
        let started = Instant::now();
        // Task-1 pretraining happens once per seed; n2 only affects task 2.
        let (task1, _) = gen_transfer_tasks(config.transfer_n1, 0, noise, seed);
        let arch = MlpArchitecture::new(1, config.depth, width, config.activation, Parametrization::Ntk);
        let params0 = net::init_params(&arch, seed);
        let (pre, _) = train::shifted_train(&arch, &params0, &task1, &PriorMean::Zero, &tc)?;
        let prior = PriorMean::PretrainedNetwork {
            arch: arch.clone(),
            trained: pre.params.clone(),
            init: pre.params0.clone(),
        };

        for &n2 in &config.transfer_n2 {
            let (_, task2) = gen_transfer_tasks(config.transfer_n1, n2, noise, seed);
            let eval = |prior: &PriorMean| -> Result<f64> {
                let preds = if n2 == 0 {
                    prior.eval_batch(&task2.val_x)?
                } else {
                    let (p, _) = train::shifted_train(&arch, &params0, &task2, prior, &tc)?;
                    p.predict_batch(&task2.val_x)?
                };
                Ok(mse(&preds, &task2.val_y))
            };
            let mse_vanilla = eval(&PriorMean::Zero)?;
            let mse_pretrain = eval(&prior)?;
            let secs = started.elapsed().as_secs_f64();
            for (name, value) in [
                (format!("mse_vanilla_n2_{n2}"), mse_vanilla),
                (format!("mse_pretrain_n2_{n2}"), mse_pretrain),
            ] {
                rows.push(ResultRow {
                    experiment: "transfer".into(),
                    width,
                    depth: config.depth,
                    beta,
                    seed,
                    metric: name,
                    value,
                    seconds: secs,
                });
            }
        }
    }
    Ok(rows)
}

/// Closed-form linearized predictions at `t -> infinity` for one seed:
/// `f0_test + Theta_tx (Theta_xx + beta I)^{-1} (y - f0_train)`.
fn closed_form_seed_prediction(
    arch: &MlpArchitecture,
    seed: u64,
    data: &Dataset,
    beta: f64,
) -> Result<Array1<f64>> {
    let params0 = net::init_params(arch, seed);
    let f_train = net::jacobian_factors(arch, &params0, &data.train_x)?;
    let f_val = net::jacobian_factors(arch, &params0, &data.val_x)?;
    let k_xx = kernel::empirical_ntk_factored(&f_train, &f_train, params0.layout(), 0, seed);
    let k_tx = kernel::empirical_ntk_factored(&f_val, &f_train, params0.layout(), 0, seed);
    kernel::posterior_mean(
        &k_xx,
        &k_tx,
        &data.train_y,
        &f_train.outputs,
        &f_val.outputs,
        beta,
    )
}

/// Output moments of `run_ensemble`, exposed for testing.
pub struct EnsembleSummary {
    pub mc_mean: Array1<f64>,
    pub mc_cov_diag: Array1<f64>,
    pub mu: Array1<f64>,
    pub sigma_diag: Array1<f64>,
    /// Standard errors of the Monte-Carlo means.
    pub se: Array1<f64>,
}

/// Monte-Carlo ensemble of closed-form trained linearized networks against
/// the Gaussian moments predicted from the empirical NTK and NNGP kernels.
pub fn ensemble_summary(config: &ExperimentConfig) -> Result<EnsembleSummary> {
    let data = config.load_dataset()?;
    let width = config.widths[0];
    let beta = config.betas[0];
    let m_runs = config.ensemble_m;
    let arch = MlpArchitecture::new(
        data.input_dim(),
        config.depth,
        width,
        config.activation,
        Parametrization::Ntk,
    );
    let n_test = data.n_val();

    let mut preds = Array2::<f64>::zeros((m_runs, n_test));
    for m in 0..m_runs {
        let seed = 10_000 + m as u64;
        preds
            .row_mut(m)
            .assign(&closed_form_seed_prediction(&arch, seed, &data, beta)?);
    }
    let mc_mean = preds.mean_axis(Axis(0)).expect("nonempty");
    let mut mc_cov = Array2::<f64>::zeros((n_test, n_test));
    for m in 0..m_runs {
        let d = &preds.row(m) - &mc_mean;
        for i in 0..n_test {
            for j in 0..n_test {
                mc_cov[[i, j]] += d[i] * d[j];
            }
        }
    }
    mc_cov /= (m_runs - 1) as f64;

    // Reference kernels at the first configured seed.
    let ref_seed = config.seeds[0];
    let params0 = net::init_params(&arch, ref_seed);
    let f_train = net::jacobian_factors(&arch, &params0, &data.train_x)?;
    let f_val = net::jacobian_factors(&arch, &params0, &data.val_x)?;
    let theta_xx = kernel::empirical_ntk_factored(&f_train, &f_train, params0.layout(), width, ref_seed);
    let theta_tx = kernel::empirical_ntk_factored(&f_val, &f_train, params0.layout(), width, ref_seed);
    let cache_train = net::forward_cache(&arch, &params0, &data.train_x)?;
    let cache_val = net::forward_cache(&arch, &params0, &data.val_x)?;
    let feats_train = &cache_train.activations[config.depth];
    let feats_val = &cache_val.activations[config.depth];
    let (sw, sb) = (arch.sigma_w[config.depth], arch.sigma_b[config.depth]);
    let k_xx = kernel::empirical_nngp(feats_train, feats_train, sw, sb)?;
    let k_tx = kernel::empirical_nngp(feats_val, feats_train, sw, sb)?;
    let k_tt = kernel::empirical_nngp(feats_val, feats_val, sw, sb)?;
    let (mu, sigma) =
        kernel::ensemble_moments(&theta_tx, &theta_xx, &k_tt, &k_tx, &k_xx, &data.train_y, beta)?;

    let sigma_diag = Array1::from_iter((0..n_test).map(|i| sigma.as_array()[[i, i]]));
    let se = Array1::from_iter(
        (0..n_test).map(|i| (mc_cov[[i, i]] / m_runs as f64).sqrt()),
    );
    Ok(EnsembleSummary {
        mc_mean,
        mc_cov_diag: Array1::from_iter((0..n_test).map(|i| mc_cov[[i, i]])),
        mu,
        sigma_diag,
        se,
    })
}

pub fn run_ensemble(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let started = Instant::now();
    let summary = ensemble_summary(config)?;
    let secs = started.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| {
        rows.push(ResultRow {
            experiment: "ensemble".into(),
            width: config.widths[0],
            depth: config.depth,
            beta: config.betas[0],
            seed: config.seeds[0],
            metric,
            value,
            seconds: secs,
        });
    };
    for i in 0..summary.mu.len() {
        push(format!("mc_mean_{i}"), summary.mc_mean[i]);
        push(format!("mu_{i}"), summary.mu[i]);
        push(format!("se_{i}"), summary.se[i]);
        push(
            format!("zscore_{i}"),
            (summary.mc_mean[i] - summary.mu[i]).abs() / summary.se[i],
        );
        push(format!("mc_var_{i}"), summary.mc_cov_diag[i]);
        push(format!("sigma_diag_{i}"), summary.sigma_diag[i]);
        push(
            format!("cov_diag_rel_err_{i}"),
            (summary.mc_cov_diag[i] - summary.sigma_diag[i]).abs() / summary.sigma_diag[i].abs(),
        );
    }
    Ok(rows)
}

/// Plain regularized training at the first configured width and beta.
pub fn run_single_train(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let data = config.load_dataset()?;
    let width = config.widths[0];
    let beta = config.betas[0];
    let seed = config.seeds[0];
    let started = Instant::now();
    let arch = MlpArchitecture::new(
        data.input_dim(),
        config.depth,
        width,
        config.activation,
        Parametrization::Ntk,
    );
    let params0 = net::init_params(&arch, seed);
    let tc = config.train_config(beta);
    let (params, trace) = train::gd_train(&arch, &params0, &data, &tc)?;
    let secs = started.elapsed().as_secs_f64();
    let last = trace.final_record().expect("nonempty trace");
    let val_preds = net::forward_batch(&arch, &params, &data.val_x)?;
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| {
        rows.push(ResultRow {
            experiment: "single_train".into(),
            width,
            depth: config.depth,
            beta,
            seed,
            metric,
            value,
            seconds: secs,
        });
    };
    push("final_loss".into(), last.loss);
    push("final_grad_norm".into(), last.grad_norm);
    push("steps".into(), last.step);
    push("dist_from_init".into(), last.dist_from_init);
    push("val_mse".into(), mse(&val_preds, &data.val_y));
    for (i, v) in val_preds.iter().enumerate() {
        push(format!("val_pred_{i}"), *v);
    }
    Ok(rows)
}

/// Dispatches on the configured experiment kind.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    match config.kind {
        ExperimentKind::WidthSweep => run_width_sweep(config),
        ExperimentKind::Transfer => run_transfer(config),
        ExperimentKind::Ensemble => run_ensemble(config),
        ExperimentKind::SingleTrain => run_single_train(config),
    }
}

pub const RESULTS_HEADER: &str = "experiment,width,depth,beta,seed,metric,value,seconds";

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (
            &a.experiment,
            a.width,
            a.depth,
            a.beta.to_bits(),
            a.seed,
            &a.metric,
        )
            .cmp(&(
                &b.experiment,
                b.width,
                b.depth,
                b.beta.to_bits(),
                b.seed,
                &b.metric,
            ))
    });
}

/// Serializes rows as CSV; values use 17 significant digits so replays can be
/// compared bit-for-bit.
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    for r in &sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.16e},{:.3}",
            r.experiment, r.width, r.depth, r.beta, r.seed, r.metric, r.value, r.seconds
        );
    }
    out
}

/// Parses `results.csv` content back into rows.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty results csv".into()))?;
    if header != RESULTS_HEADER {
        return Err(Error::InvalidConfig(format!(
            "unexpected results header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(Error::ParseError {
                row: i + 2,
                col: cells.len(),
                message: "expected 8 cells".into(),
            });
        }
        let parse_cell = |idx: usize| -> Result<f64> {
            cells[idx].parse().map_err(|_| Error::ParseError {
                row: i + 2,
                col: idx + 1,
                message: format!("not a number: {:?}", cells[idx]),
            })
        };
        let parse_int = |idx: usize| -> Result<u64> {
            cells[idx].parse().map_err(|_| Error::ParseError {
                row: i + 2,
                col: idx + 1,
                message: format!("not an integer: {:?}", cells[idx]),
            })
        };
        rows.push(ResultRow {
            experiment: cells[0].to_string(),
            width: parse_int(1)? as usize,
            depth: parse_int(2)? as usize,
            beta: parse_cell(3)?,
            seed: parse_int(4)?,
            metric: cells[5].to_string(),
            value: parse_cell(6)?,
            seconds: parse_cell(7)?,
        });
    }
    Ok(rows)
}

/// Strips the timing column for replay comparisons.
pub fn csv_without_seconds(text: &str) -> String {
    text.lines()
        .map(|l| match l.rsplit_once(',') {
            Some((rest, _)) => rest.to_string(),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const PLOT_SCRIPT: &str = r#"# Log-scale width plots from results.csv.
# Usage: gnuplot -e "csv='results.csv'" plot.gnuplot
if (!exists("csv")) csv = "results.csv"
set datafile separator ","
set logscale xy
set xlabel "width"
set grid

set terminal pngcairo size 800,600
set output "param_diff.png"
set ylabel "parameter distance to linearized optimum"
plot "< awk -F, '$6==\"param_frobenius_diff\"' ".csv using 2:7 with points pt 7 title "per seed"

set output "function_diff.png"
set ylabel "sup |network - kernel ridge| on validation"
plot "< awk -F, '$6==\"function_sup_diff\"' ".csv using 2:7 with points pt 7 title "per seed"

set output "jacobian_drift.png"
set ylabel "Jacobian drift at end of training"
plot "< awk -F, '$6==\"jacobian_drift\"' ".csv using 2:7 with points pt 7 title "per seed"
"#;

pub fn plot_script() -> &'static str {
    PLOT_SCRIPT
}

/// Writes `results.csv`, `manifest.txt`, and `plot.gnuplot` into `out_dir`.
pub fn emit_outputs(rows: &[ResultRow], config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.csv"), rows_to_csv(rows))?;
    std::fs::write(out_dir.join("manifest.txt"), config.to_manifest())?;
    std::fs::write(out_dir.join("plot.gnuplot"), PLOT_SCRIPT)?;
    Ok(())
}

/// Writes a generated dataset as CSV: feature columns `x0..`, then `y`.
pub fn dataset_to_csv(data: &Dataset) -> String {
    let dim = data.input_dim();
    let mut out = String::new();
    for j in 0..dim {
        let _ = write!(out, "x{j},");
    }
    out.push_str("y\n");
    let mut emit = |x: &Array2<f64>, y: &Array1<f64>| {
        for i in 0..x.nrows() {
            for j in 0..dim {
                let _ = write!(out, "{:.16e},", x[[i, j]]);
            }
            let _ = writeln!(out, "{:.16e}", y[i]);
        }
    };
    emit(&data.train_x, &data.train_y);
    emit(&data.val_x, &data.val_y);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_target_hand_values() {
        let x0 = ndarray::arr1(&[0.0]);
        assert!((synthetic_target(x0.view()) - 1.0).abs() < 1e-15);
        let x1 = ndarray::arr1(&[std::f64::consts::FRAC_PI_2]);
        assert!(synthetic_target(x1.view()).abs() < 1e-15);
    }

    #[test]
    fn synthetic_noise_variance_recovery() {
        let sigma = 0.3;
        let data = gen_synthetic(10_000, 1, sigma, 7);
        let mut resid = Vec::new();
        for (x, y) in [(&data.train_x, &data.train_y), (&data.val_x, &data.val_y)] {
            for i in 0..x.nrows() {
                resid.push(y[i] - synthetic_target(x.row(i)));
            }
        }
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / resid.len() as f64;
        assert!((0.08..=0.10).contains(&var), "residual variance {var}");
    }

    #[test]
    fn synthetic_split_and_determinism() {
        let a = gen_synthetic(160, 2, 0.1, 3);
        assert_eq!(a.n_train(), 128);
        assert_eq!(a.n_val(), 32);
        let b = gen_synthetic(160, 2, 0.1, 3);
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.train_y, b.train_y);
    }

    #[test]
    fn transfer_targets_hand_values() {
        assert!(transfer_target_1(0.0).abs() < 1e-15);
        assert!((transfer_target_2(0.0) - 0.3).abs() < 1e-15);
        assert!(transfer_target_1(std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn transfer_coefficient_recovery() {
        // Least squares on the generating basis must return the stated
        // coefficients from noiseless samples.
        let n = 1000;
        let x = uniform_inputs(n, 1, 5, 0);
        let y = Array1::from_shape_fn(n, |i| transfer_target_1(x[[i, 0]]));
        let basis: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|v: f64| v.sin()),
            Box::new(|v: f64| (5.0 * v).sin()),
            Box::new(|v: f64| (20.0 * v).sin()),
        ];
        let phi = Array2::from_shape_fn((n, 3), |(i, j)| basis[j](x[[i, 0]]));
        let gram = crate::linalg::SymMatrix::symmetrize(phi.t().dot(&phi));
        let coef = cholesky_solve_vec(&gram, &phi.t().dot(&y), 0.0).unwrap();
        for (got, want) in coef.iter().zip([1.0, 0.5, 0.2]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn transfer_task2_empty_edge() {
        let (_, task2) = gen_transfer_tasks(50, 0, 0.1, 1);
        assert_eq!(task2.n_train(), 0);
        assert_eq!(task2.n_val(), 200);
    }

    #[test]
    fn csv_round_trip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "a,b,target\n1.0,2.0,3.0\n4.0,5.0,6.0\n7.0,8.0,9.0\n").unwrap();

        let raw = load_csv(&path, "target", false).unwrap();
        assert_eq!(raw.train_x[[0, 0]], 1.0);
        assert_eq!(raw.train_x[[1, 1]], 5.0);
        assert_eq!(raw.train_y[0], 3.0);

        let norm = load_csv(&path, "target", true).unwrap();
        let max_norm = norm
            .train_x
            .rows()
            .into_iter()
            .chain(norm.val_x.rows())
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        assert!(max_norm <= 1.0 + 1e-12);
        let all_y: Vec<f64> = norm.train_y.iter().chain(norm.val_y.iter()).copied().collect();
        let mean = all_y.iter().sum::<f64>() / all_y.len() as f64;
        let var = all_y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all_y.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);

        assert!(matches!(
            load_csv(&path, "missing", false),
            Err(Error::MissingColumn(_))
        ));
        std::fs::write(&path, "a,b,target\n1.0,oops,3.0\n").unwrap();
        assert!(matches!(
            load_csv(&path, "target", false),
            Err(Error::ParseError { row: 2, col: 2, .. })
        ));
    }

    #[test]
    fn config_manifest_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.kind = ExperimentKind::Transfer;
        cfg.widths = vec![64, 128];
        cfg.seeds = vec![7];
        cfg.betas = vec![0.25, 0.5];
        cfg.activation = Activation::Softplus;
        cfg.eta0 = Some(0.01);
        cfg.out_dir = Some(PathBuf::from("/tmp/somewhere"));
        let manifest = cfg.to_manifest();
        let parsed = ExperimentConfig::parse(&manifest).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_rejects_unknown_key() {
        assert!(ExperimentConfig::parse("nonsense = 1").is_err());
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![
            ResultRow {
                experiment: "width_sweep".into(),
                width: 256,
                depth: 2,
                beta: 0.5,
                seed: 1,
                metric: "param_frobenius_diff".into(),
                value: 0.123456789012345678,
                seconds: 1.25,
            },
            ResultRow {
                experiment: "width_sweep".into(),
                width: 128,
                depth: 2,
                beta: 0.5,
                seed: 0,
                metric: "function_sup_diff".into(),
                value: -3.5e-7,
                seconds: 0.5,
            },
        ];
        let csv = rows_to_csv(&rows);
        let parsed = parse_results_csv(&csv).unwrap();
        // Emission sorts; values survive exactly at 17 significant digits.
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].width, 128);
        assert_eq!(parsed[1].value, rows[0].value);
        assert_eq!(rows_to_csv(&parsed), csv);

        let empty = rows_to_csv(&[]);
        assert_eq!(empty.trim_end(), RESULTS_HEADER);
    }

    #[test]
    fn small_sweep_is_deterministic_and_recomputable() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetSpec::Synthetic {
            dim: 1,
            n_points: 20,
            noise_sigma: 0.1,
            seed: 1000,
        };
        cfg.widths = vec![16];
        cfg.seeds = vec![0, 1];
        cfg.max_steps = 200;
        cfg.grad_tol = 1e-6;
        let rows_a = run_width_sweep(&cfg).unwrap();
        let rows_b = run_width_sweep(&cfg).unwrap();
        assert_eq!(
            csv_without_seconds(&rows_to_csv(&rows_a)),
            csv_without_seconds(&rows_to_csv(&rows_b))
        );
        // function_sup_diff recomputes from the persisted predictions.
        for &seed in &[0u64, 1] {
            let of = |m: &str| {
                rows_a
                    .iter()
                    .filter(|r| r.seed == seed && r.metric.starts_with(m))
                    .collect::<Vec<_>>()
            };
            let nets = of("net_val_pred_");
            let krrs = of("krr_val_pred_");
            let reported = of("function_sup_diff")[0].value;
            let recomputed = nets
                .iter()
                .zip(&krrs)
                .fold(0.0f64, |m, (a, b)| m.max((a.value - b.value).abs()));
            assert!((reported - recomputed).abs() < 1e-12);
        }
    }

    #[test]
    fn emit_outputs_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        emit_outputs(&[], &cfg, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.trim_end(), RESULTS_HEADER);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(ExperimentConfig::parse(&manifest).unwrap(), cfg);
        assert!(dir.path().join("plot.gnuplot").exists());
    }
}
