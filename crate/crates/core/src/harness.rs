//! Experiment runner: single configurations, seeded grids, trajectory
//! output, and the D0 / bound diagnostics.
//!
//! A trajectory has one row per effective data pass. Pass counts include
//! the preconditioner warm-up (`2·batch` per probe) and every Hessian-vector
//! probe, so scaled and unscaled runs are compared at equal oracle cost.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_features, normalize_labels, read_libsvm, Dataset, ScalingSpec};
use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::losses::{Batch, LossKind, Objective};
use crate::optimizers::{
    self, Method, MetricRow, OptimizerConfig, RunStatus, StepView, Trajectory,
};
use crate::preconditioner::{BetaMode, ClippedDiagonal};
use crate::rng::{hash_seed, RandomSource, Stream};

/// Default search step sizes: `2^-20, 2^-18, ..., 2^4`.
pub fn search_etas() -> Vec<f64> {
    (-10..=2).map(|k| 2f64.powi(2 * k)).collect()
}

pub const SEARCH_ALPHAS: [f64; 3] = [1e-1, 1e-3, 1e-7];
pub const SEARCH_BATCHES: [usize; 2] = [128, 512];

pub fn search_betas() -> Vec<BetaMode> {
    let mut betas: Vec<BetaMode> = [0.95, 0.99, 0.995, 0.999]
        .into_iter()
        .map(BetaMode::Constant)
        .collect();
    betas.push(BetaMode::Averaging);
    betas
}

pub fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Label written to the `dataset` column.
    pub dataset: String,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub k_min: i32,
    pub k_max: i32,
    /// Seed of the feature permutation; shared by every run.
    pub scale_seed: u64,
    /// Budget in effective data passes.
    pub passes: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "dataset".into(),
            loss: LossKind::Logistic,
            optimizer: OptimizerConfig::default(),
            k_min: 0,
            k_max: 0,
            scale_seed: 0,
            passes: 10.0,
            seeds: default_seeds(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.passes >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "budget must be at least one pass, got {}",
                self.passes
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        ScalingSpec::new(self.k_min, self.k_max, self.scale_seed)?;
        self.optimizer.validate()
    }

    pub fn scaling(&self) -> Result<ScalingSpec> {
        ScalingSpec::new(self.k_min, self.k_max, self.scale_seed)
    }

    /// Normalized and corrupted copy of `raw`, as every run sees it.
    pub fn prepare(&self, raw: &Dataset) -> Result<Dataset> {
        let normalized = normalize_labels(raw, self.loss)?;
        corrupt_features(&normalized, &self.scaling()?)
    }
}

/// One run's metrics with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub method: Method,
    pub scaled: bool,
    pub dataset: String,
    pub loss_kind: LossKind,
    pub k_min: i32,
    pub k_max: i32,
    pub eta: f64,
    pub alpha: Option<f64>,
    pub beta: Option<String>,
    pub p: Option<f64>,
    pub batch: usize,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub status: RunStatus,
}

impl TrajectoryRecord {
    fn new(cfg: &ExperimentConfig, n: usize, seed: u64, trajectory: Trajectory) -> Self {
        let opt = &cfg.optimizer;
        let (alpha, beta) = match opt.method {
            Method::Adam => (None, Some(opt.adam_beta2.to_string())),
            _ if opt.scaled => (Some(opt.precond.alpha), Some(opt.precond.beta.to_string())),
            _ => (None, None),
        };
        let p = matches!(opt.method, Method::Sarah | Method::Lsvrg).then(|| opt.resolved_p(n));
        TrajectoryRecord {
            method: opt.method,
            scaled: opt.scaled,
            dataset: cfg.dataset.clone(),
            loss_kind: cfg.loss,
            k_min: cfg.k_min,
            k_max: cfg.k_max,
            eta: opt.eta,
            alpha,
            beta,
            p,
            batch: opt.batch_size,
            seed,
            rows: trajectory.rows,
            status: trajectory.status,
        }
    }

    /// Smallest recorded value of `objective`.
    pub fn best(&self, objective: TuneObjective) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| objective.pick(r))
            .min_by(f64::total_cmp)
    }

    /// First recorded pass count at which `‖∇P‖² ≤ threshold`.
    pub fn passes_to_grad_norm(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.grad_norm_sq <= threshold)
            .map(|r| r.effective_passes)
    }

    fn config_cmp(&self, other: &Self) -> Ordering {
        let opt_f = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => a.total_cmp(&b),
            (a, b) => a.is_some().cmp(&b.is_some()),
        };
        self.method
            .cmp(&other.method)
            .then(self.scaled.cmp(&other.scaled))
            .then_with(|| self.dataset.cmp(&other.dataset))
            .then(self.loss_kind.cmp(&other.loss_kind))
            .then(self.k_min.cmp(&other.k_min))
            .then(self.k_max.cmp(&other.k_max))
            .then(self.eta.total_cmp(&other.eta))
            .then(opt_f(self.alpha, other.alpha))
            .then_with(|| self.beta.cmp(&other.beta))
            .then(opt_f(self.p, other.p))
            .then(self.batch.cmp(&other.batch))
    }
}

/// Runs every seed of `cfg` on `raw` (labels are normalized and features
/// corrupted first). Divergence is recorded, not returned as an error.
pub fn run_experiment(cfg: &ExperimentConfig, raw: &Dataset) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    let data = cfg.prepare(raw)?;
    cfg.seeds
        .iter()
        .map(|&seed| run_seed(cfg, &data, seed, &mut |_| {}))
        .collect()
}

/// Reads the dataset named by a path, with file context on errors.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_libsvm(path, None)
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<TrajectoryRecord> {
    let obj = Objective::new(cfg.loss, data)?;
    let opt_cfg = OptimizerConfig {
        seed,
        ..cfg.optimizer
    };
    let trajectory = match optimizers::run(opt_cfg, obj, cfg.passes, observer) {
        Ok(out) => out.trajectory,
        Err(Error::Diverged { partial, .. }) => *partial,
        Err(e) => return Err(e),
    };
    Ok(TrajectoryRecord::new(cfg, data.n(), seed, trajectory))
}

/// Quantity minimized when tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuneObjective {
    Loss,
    GradNormSq,
    Error,
}

impl TuneObjective {
    pub fn pick(self, row: &MetricRow) -> f64 {
        match self {
            TuneObjective::Loss => row.loss,
            TuneObjective::GradNormSq => row.grad_norm_sq,
            TuneObjective::Error => row.error,
        }
    }
}

impl FromStr for TuneObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(TuneObjective::Loss),
            "grad_norm_sq" | "gradnorm" => Ok(TuneObjective::GradNormSq),
            "error" => Ok(TuneObjective::Error),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

/// Hyperparameter axes. Axes that do not apply to the template's method
/// collapse to a single cell (`alpha` and `beta` for unscaled methods,
/// `alpha` for Adam, whose `beta` axis sets its second-moment decay).
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxes {
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<BetaMode>,
    pub batch: Vec<usize>,
}

impl GridAxes {
    /// The full standard search grid.
    pub fn standard() -> Self {
        GridAxes {
            eta: search_etas(),
            alpha: SEARCH_ALPHAS.to_vec(),
            beta: search_betas(),
            batch: SEARCH_BATCHES.to_vec(),
        }
    }

    /// Single-cell grid reproducing `template`.
    pub fn single(template: &ExperimentConfig) -> Self {
        let opt = &template.optimizer;
        GridAxes {
            eta: vec![opt.eta],
            alpha: vec![opt.precond.alpha],
            beta: vec![opt.precond.beta],
            batch: vec![opt.batch_size],
        }
    }

    pub fn cells(&self, template: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let opt = template.optimizer;
        let alphas = if opt.scaled {
            self.alpha.clone()
        } else {
            vec![opt.precond.alpha]
        };
        let betas = if opt.scaled || opt.method == Method::Adam {
            self.beta.clone()
        } else {
            vec![opt.precond.beta]
        };
        let mut cells = Vec::new();
        for &batch in &self.batch {
            for &eta in &self.eta {
                for &alpha in &alphas {
                    for &beta in &betas {
                        let mut cell = template.clone();
                        let o = &mut cell.optimizer;
                        o.batch_size = batch;
                        o.eta = eta;
                        o.precond.alpha = alpha;
                        match (o.method, beta) {
                            (Method::Adam, BetaMode::Constant(b)) => o.adam_beta2 = b,
                            // invalid: the cell fails at validation
                            (Method::Adam, BetaMode::Averaging) => o.adam_beta2 = f64::NAN,
                            _ => o.precond.beta = beta,
                        }
                        cells.push(cell);
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub index: usize,
    pub config: ExperimentConfig,
    pub records: Vec<TrajectoryRecord>,
    /// Mean over seeds of the best recorded objective; `None` when failed.
    pub score: Option<f64>,
    /// Why the cell failed: divergence or an invalid configuration.
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the lowest score among surviving cells.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn records(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.cells.iter().flat_map(|c| c.records.iter())
    }
}

/// Seed of run `seed_index` in cell `cell`.
pub fn grid_run_seed(base: u64, cell: usize, seed_index: usize) -> u64 {
    hash_seed(&[base, cell as u64, seed_index as u64])
}

/// Runs the Cartesian product of `axes` over `template`, one run per
/// (cell, seed). Run seeds are `grid_run_seed(seeds[i], cell, i)`; the
/// derived seed is what the `seed` column records.
pub fn grid_search(
    template: &ExperimentConfig,
    axes: &GridAxes,
    objective: TuneObjective,
    raw: &Dataset,
) -> Result<GridResult> {
    let configs = axes.cells(template);
    if configs.is_empty() {
        return Err(Error::InvalidGrid);
    }
    if template.seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    let data = template.prepare(raw)?;

    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..template.seeds.len()).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<Result<TrajectoryRecord>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cfg = &configs[c];
            cfg.validate()?;
            let seed = grid_run_seed(template.seeds[s], c, s);
            run_seed(cfg, &data, seed, &mut |_| {})
        })
        .collect();

    let mut outcomes = outcomes.into_iter();
    let mut cells = Vec::with_capacity(configs.len());
    for (index, config) in configs.into_iter().enumerate() {
        let mut records = Vec::new();
        let mut failure = None;
        for _ in 0..template.seeds.len() {
            match outcomes.next().expect("one outcome per job") {
                Ok(rec) => {
                    if rec.status == RunStatus::Diverged && failure.is_none() {
                        failure = Some(format!("seed {} diverged", rec.seed));
                    }
                    records.push(rec);
                }
                Err(
                    e @ (Error::InvalidConfig(_)
                    | Error::InvalidBatch { .. }
                    | Error::InvalidWarmup),
                ) => {
                    failure.get_or_insert_with(|| e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        let score = if failure.is_none() {
            let bests: Option<Vec<f64>> = records.iter().map(|r| r.best(objective)).collect();
            bests.map(|b| b.iter().sum::<f64>() / b.len() as f64)
        } else {
            None
        };
        cells.push(GridCell {
            index,
            config,
            records,
            score,
            failure,
        });
    }
    let best = cells
        .iter()
        .filter_map(|c| c.score.map(|s| (c.index, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(GridResult { cells, best })
}

/// Output encoding for trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    JsonLines,
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(RecordFormat::Csv),
            "jsonl" | "json-lines" => Ok(RecordFormat::JsonLines),
            other => Err(Error::InvalidConfig(format!("unknown format {other:?}"))),
        }
    }
}

/// One output line; field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FlatRow {
    method: Method,
    scaled: bool,
    dataset: String,
    loss_kind: LossKind,
    kmin: i32,
    kmax: i32,
    eta: f64,
    alpha: Option<f64>,
    beta: Option<String>,
    p: Option<f64>,
    batch: usize,
    seed: u64,
    pass: f64,
    loss: f64,
    grad_norm_sq: f64,
    error: f64,
    status: RunStatus,
}

pub const CSV_COLUMNS: [&str; 17] = [
    "method",
    "scaled",
    "dataset",
    "loss_kind",
    "kmin",
    "kmax",
    "eta",
    "alpha",
    "beta",
    "p",
    "batch",
    "seed",
    "pass",
    "loss",
    "grad_norm_sq",
    "error",
    "status",
];

fn sorted<'r>(
    records: impl IntoIterator<Item = &'r TrajectoryRecord>,
) -> Vec<&'r TrajectoryRecord> {
    let mut out: Vec<_> = records.into_iter().collect();
    out.sort_by(|a, b| a.config_cmp(b).then(a.seed.cmp(&b.seed)));
    out
}

fn flatten<'r>(records: Vec<&'r TrajectoryRecord>) -> impl Iterator<Item = FlatRow> + 'r {
    records.into_iter().flat_map(|r| {
        r.rows.iter().map(move |row| FlatRow {
            method: r.method,
            scaled: r.scaled,
            dataset: r.dataset.clone(),
            loss_kind: r.loss_kind,
            kmin: r.k_min,
            kmax: r.k_max,
            eta: r.eta,
            alpha: r.alpha,
            beta: r.beta.clone(),
            p: r.p,
            batch: r.batch,
            seed: r.seed,
            pass: row.effective_passes,
            loss: row.loss,
            grad_norm_sq: row.grad_norm_sq,
            error: row.error,
            status: r.status,
        })
    })
}

/// Writes records sorted by configuration, then seed, then pass.
pub fn write_records<'r, W: Write>(
    records: impl IntoIterator<Item = &'r TrajectoryRecord>,
    writer: W,
    format: RecordFormat,
) -> Result<()> {
    let records = sorted(records);
    if records.is_empty() {
        return Err(Error::InvalidConfig("no records to write".into()));
    }
    match format {
        RecordFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            for row in flatten(records) {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        RecordFormat::JsonLines => {
            let mut w = BufWriter::new(writer);
            for row in flatten(records) {
                serde_json::to_writer(&mut w, &row)?;
                writeln!(w)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn emit_records<'r>(
    records: impl IntoIterator<Item = &'r TrajectoryRecord>,
    path: impl AsRef<Path>,
    format: RecordFormat,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::from(e).with_path(path))?;
    write_records(records, file, format).map_err(|e| e.with_path(path))
}

/// Parses CSV written by [`write_records`] back into records.
pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::InvalidConfig(format!(
            "unexpected CSV header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for row in rdr.deserialize::<FlatRow>() {
        let row = row?;
        let metric = MetricRow {
            effective_passes: row.pass,
            loss: row.loss,
            grad_norm_sq: row.grad_norm_sq,
            error: row.error,
        };
        let rec = TrajectoryRecord {
            method: row.method,
            scaled: row.scaled,
            dataset: row.dataset,
            loss_kind: row.loss_kind,
            k_min: row.kmin,
            k_max: row.kmax,
            eta: row.eta,
            alpha: row.alpha,
            beta: row.beta,
            p: row.p,
            batch: row.batch,
            seed: row.seed,
            rows: Vec::new(),
            status: row.status,
        };
        match out.last_mut() {
            Some(last)
                if last.config_cmp(&rec) == Ordering::Equal
                    && last.seed == rec.seed
                    && last.status == rec.status
                    && last
                        .rows
                        .last()
                        .is_some_and(|r| r.effective_passes < metric.effective_passes) =>
            {
                last.rows.push(metric)
            }
            _ => out.push(TrajectoryRecord {
                rows: vec![metric],
                ..rec
            }),
        }
    }
    Ok(out)
}

/// `‖estimate − truth‖ / ‖truth‖`.
pub fn relative_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    let truth_norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if truth_norm == 0.0 {
        return Err(Error::DegenerateDiagnostic);
    }
    let diff = estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / truth_norm)
}

/// Relative error of the warm-up diagonal `D0` against the exact
/// full-data Hessian diagonal at `w0 = 0`, one value per seed. `D0` is
/// built exactly as a scaled run with that seed would build it.
pub fn d0_diagnostic(cfg: &ExperimentConfig, raw: &Dataset) -> Result<Vec<f64>> {
    let data = cfg.prepare(raw)?;
    let obj = Objective::new(cfg.loss, &data)?;
    let w0 = DenseVector::zeros(data.d());
    let truth = obj.hessian_diag(&w0, Batch::Full)?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let opt_cfg = OptimizerConfig {
                method: Method::Sgd,
                scaled: true,
                seed,
                ..cfg.optimizer
            };
            let opt = optimizers::Optimizer::new(opt_cfg, obj, w0.clone())?;
            let d0 = opt.state().precond.as_ref().expect("scaled run").raw();
            relative_error(d0, &truth)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub step: u64,
    pub index: usize,
    pub value: f64,
}

/// Result of checking `α ≤ D̂_ii ≤ max(α, √d·L̂)` at every observed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub alpha: f64,
    pub gamma: f64,
    pub steps_checked: u64,
    pub max_entry: f64,
    pub violations: Vec<BoundViolation>,
}

/// Slack on the upper bound.
pub const AUDIT_SLACK: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct BoundAuditor {
    report: AuditReport,
}

impl BoundAuditor {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        BoundAuditor {
            report: AuditReport {
                alpha,
                gamma,
                steps_checked: 0,
                max_entry: 0.0,
                violations: Vec::new(),
            },
        }
    }

    pub fn observe(&mut self, step: u64, diag: &ClippedDiagonal) {
        let r = &mut self.report;
        let upper = r.alpha.max(r.gamma) + AUDIT_SLACK;
        for (index, &value) in diag.entries().iter().enumerate() {
            r.max_entry = r.max_entry.max(value);
            if !(value >= r.alpha && value <= upper) {
                r.violations.push(BoundViolation { step, index, value });
            }
        }
        r.steps_checked += 1;
    }

    pub fn report(self) -> AuditReport {
        self.report
    }
}

pub fn audit_bounds<'d>(
    steps: impl IntoIterator<Item = (u64, &'d ClippedDiagonal)>,
    alpha: f64,
    gamma: f64,
) -> AuditReport {
    let mut auditor = BoundAuditor::new(alpha, gamma);
    for (step, diag) in steps {
        auditor.observe(step, diag);
    }
    auditor.report()
}

/// Runs every seed of `cfg` while auditing the preconditioner after warm-up
/// and after every step. Unscaled runs yield empty reports.
pub fn audit_experiment(cfg: &ExperimentConfig, raw: &Dataset) -> Result<Vec<AuditReport>> {
    cfg.validate()?;
    let data = cfg.prepare(raw)?;
    let params = Objective::new(cfg.loss, &data)?.smoothness_bound()?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let mut auditor = BoundAuditor::new(cfg.optimizer.precond.alpha, params.gamma);
            run_seed(cfg, &data, seed, &mut |view| {
                if let Some(state) = view.precond {
                    auditor.observe(view.t, &state.clip());
                }
            })?;
            Ok(auditor.report())
        })
        .collect()
}

/// Largest relative discrepancies between analytic and central-difference
/// derivatives at a random point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub grad_rel_err: f64,
    pub hvp_rel_err: f64,
}

/// Compares the gradient against central differences of the loss, and the
/// Hessian-vector product against central differences of the gradient,
/// at `w ~ N(0, scale²)` and a Rademacher direction.
pub fn gradient_check(obj: &Objective<'_>, scale: f64, seed: u64) -> Result<GradientCheck> {
    let d = obj.d();
    let mut rng = RandomSource::new(seed, Stream::Synthetic);
    let w: DenseVector = (0..d).map(|_| scale * rng.standard_normal()).collect();
    let dir = rng.rademacher(d)?;
    let h = 1e-5;

    let grad = obj.grad(&w, Batch::Full)?;
    let mut fd = DenseVector::zeros(d);
    let mut probe = w.clone();
    for j in 0..d {
        probe[j] = w[j] + h;
        let up = obj.value(&probe, Batch::Full)?;
        probe[j] = w[j] - h;
        let down = obj.value(&probe, Batch::Full)?;
        probe[j] = w[j];
        fd[j] = (up - down) / (2.0 * h);
    }

    let hv = obj.hvp(&w, Batch::Full, &dir)?;
    let mut up = w.clone();
    up.axpy(h, &dir);
    let mut down = w.clone();
    down.axpy(-h, &dir);
    let g_up = obj.grad(&up, Batch::Full)?;
    let g_down = obj.grad(&down, Batch::Full)?;
    let fd_hv: DenseVector = g_up
        .iter()
        .zip(g_down.iter())
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect();

    let rel = |a: &DenseVector, b: &DenseVector| a.max_abs_diff(b) / b.norm().max(1e-12);
    Ok(GradientCheck {
        grad_rel_err: rel(&grad, &fd),
        hvp_rel_err: rel(&hv, &fd_hv),
    })
}

/// Flat `key = value` settings shared by the config file and the CLI.
///
/// Keys mirror the long flag names without dashes: `dataset`, `loss`,
/// `method`, `scaled`, `eta`, `alpha`, `beta`, `p`, `batch`, `warmup`,
/// `kmin`, `kmax`, `passes`, `seeds`, `out`, `format`, plus `scale-seed`
/// and `objective`. For grids, `eta`, `alpha`, `beta` and `batch` take
/// comma-separated lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

const SETTING_KEYS: [&str; 18] = [
    "dataset",
    "loss",
    "method",
    "scaled",
    "eta",
    "alpha",
    "beta",
    "p",
    "batch",
    "warmup",
    "kmin",
    "kmax",
    "passes",
    "seeds",
    "out",
    "format",
    "scale-seed",
    "objective",
];

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut settings = Settings::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::MalformedLine {
                    line: i + 1,
                    message: format!("expected key = value, found {line:?}"),
                })?;
            settings
                .set(key.trim(), value.trim())
                .map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(settings)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).with_path(path))?;
        Settings::parse(&text).map_err(|e| e.with_path(path))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim_start_matches("--").replace('_', "-");
        if !SETTING_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown setting {key:?}")));
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::InvalidConfig(format!("invalid {key}: {v:?}")))
            })
            .transpose()
    }

    fn number(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(parse_number).transpose()
    }

    fn list<T>(&self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| v.split(',').map(|s| parse(s.trim())).collect())
            .transpose()
    }

    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.get("dataset").map(PathBuf::from)
    }

    pub fn output_path(&self) -> Option<PathBuf> {
        self.get("out").map(PathBuf::from)
    }

    pub fn format(&self) -> Result<RecordFormat> {
        Ok(self.parsed("format")?.unwrap_or(RecordFormat::Csv))
    }

    pub fn objective(&self) -> Result<TuneObjective> {
        Ok(self.parsed("objective")?.unwrap_or(TuneObjective::Error))
    }

    /// Single-run configuration. List-valued axes use their first entry.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = self.dataset_path() {
            cfg.dataset = path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
        }
        if let Some(loss) = self.parsed("loss")? {
            cfg.loss = loss;
        }
        let o = &mut cfg.optimizer;
        if let Some(method) = self.parsed("method")? {
            o.method = method;
        }
        if let Some(scaled) = self.get("scaled") {
            o.scaled = parse_bool(scaled)?;
        }
        if let Some(eta) = self.list("eta", parse_number)? {
            o.eta = eta[0];
        }
        if let Some(alpha) = self.list("alpha", parse_number)? {
            o.precond.alpha = alpha[0];
        }
        if let Some(beta) = self.list("beta", |s| s.parse::<BetaMode>())? {
            o.precond.beta = beta[0];
            if let (Method::Adam, BetaMode::Constant(b)) = (o.method, beta[0]) {
                o.adam_beta2 = b;
            }
        }
        if let Some(p) = self.number("p")? {
            o.p = Some(p);
        }
        if let Some(batch) = self.list("batch", parse_count)? {
            o.batch_size = batch[0];
        }
        if let Some(m) = self.parsed::<usize>("warmup")? {
            o.precond.warmup = m;
        }
        if let Some(k) = self.parsed("kmin")? {
            cfg.k_min = k;
        }
        if let Some(k) = self.parsed("kmax")? {
            cfg.k_max = k;
        }
        if let Some(s) = self.parsed("scale-seed")? {
            cfg.scale_seed = s;
        }
        if let Some(passes) = self.number("passes")? {
            cfg.passes = passes;
        }
        if let Some(seeds) = self.get("seeds") {
            cfg.seeds = parse_seeds(seeds)?;
        }
        Ok(cfg)
    }

    /// Grid axes; missing axes default to the standard search grid.
    pub fn axes(&self) -> Result<GridAxes> {
        let table = GridAxes::standard();
        Ok(GridAxes {
            eta: self.list("eta", parse_number)?.unwrap_or(table.eta),
            alpha: self.list("alpha", parse_number)?.unwrap_or(table.alpha),
            beta: self
                .list("beta", |s| s.parse::<BetaMode>())?
                .unwrap_or(table.beta),
            batch: self.list("batch", parse_count)?.unwrap_or(table.batch),
        })
    }
}

/// Accepts plain floats and powers written `2^k`.
pub fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::InvalidConfig(format!("invalid number {s:?}"));
    if let Some((base, exp)) = s.split_once('^') {
        let base: f64 = base.trim().parse().map_err(|_| bad())?;
        let exp: f64 = exp.trim().parse().map_err(|_| bad())?;
        return Ok(base.powf(exp));
    }
    s.parse().map_err(|_| bad())
}

fn parse_count(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::InvalidConfig(format!("invalid count {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("invalid boolean {s:?}"))),
    }
}

/// `0,3,7` or a half-open range `0..10`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidConfig(format!("invalid seed list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
            out.extend(lo..hi);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}
