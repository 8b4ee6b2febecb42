//! Step engines: Scaled SARAH, Scaled L-SVRG, (scaled) SGD and Adam.
//!
//! Every engine moves the iterate along `−η D̂⁻¹ v` where `D̂` is the clipped
//! Hutchinson diagonal when `scaled` is set and the identity otherwise.
//!
//! Randomness is split into independent streams: gradient minibatches,
//! preconditioner batches, Rademacher probes, the probability-`p` coin and
//! the final output draw. Fixing the seed fixes the whole trajectory.
//!
//! Cost accounting is in component-gradient evaluations: a full gradient
//! costs `n`, a minibatch gradient `b`, and one Hessian-vector probe on a
//! batch `J` costs `2|J|`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::losses::{Batch, Objective, TheoryParams};
use crate::preconditioner::{BetaMode, ClippedDiagonal, PrecondState};
use crate::rng::{RandomSource, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sarah,
    Lsvrg,
    Sgd,
    Adam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sarah => "sarah",
            Method::Lsvrg => "lsvrg",
            Method::Sgd => "sgd",
            Method::Adam => "adam",
        }
    }

    fn uses_probability(self) -> bool {
        matches!(self, Method::Sarah | Method::Lsvrg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sarah" => Ok(Method::Sarah),
            "lsvrg" | "l-svrg" => Ok(Method::Lsvrg),
            "sgd" => Ok(Method::Sgd),
            "adam" => Ok(Method::Adam),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Hutchinson preconditioner settings, used only when `scaled` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecondConfig {
    pub alpha: f64,
    pub beta: BetaMode,
    /// Number of warm-up probes for `D0`.
    pub warmup: usize,
    /// Batch size of each probe; defaults to the gradient batch size.
    pub batch_size: Option<usize>,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        PrecondConfig {
            alpha: 1e-3,
            beta: BetaMode::Constant(0.999),
            warmup: 100,
            batch_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub scaled: bool,
    pub eta: f64,
    /// Full-gradient / anchor-keeping probability; `None` means `b/n`.
    pub p: Option<f64>,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub precond: PrecondConfig,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::Sarah,
            scaled: false,
            eta: 0.1,
            p: None,
            batch_size: 128,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            precond: PrecondConfig::default(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(p) = self.p {
            if self.method.uses_probability() && !(p > 0.0 && p <= 1.0) {
                return bad(format!("p must lie in (0, 1], got {p}"));
            }
        }
        if self.scaled {
            if self.method == Method::Adam {
                return bad("adam has no scaled variant".into());
            }
            if !(self.precond.alpha > 0.0 && self.precond.alpha.is_finite()) {
                return bad(format!(
                    "alpha must be positive, got {}",
                    self.precond.alpha
                ));
            }
            if self.precond.warmup == 0 {
                return Err(Error::InvalidWarmup);
            }
            self.precond.beta.validate()?;
        }
        if self.method == Method::Adam {
            for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return bad(format!("adam {name} must lie in [0, 1), got {b}"));
                }
            }
            if self.adam_eps < 0.0 {
                return bad("adam eps must be nonnegative".into());
            }
        }
        Ok(())
    }

    /// Probability actually used on a dataset of `n` samples.
    pub fn resolved_p(&self, n: usize) -> f64 {
        self.p
            .unwrap_or_else(|| (self.batch_size as f64 / n as f64).min(1.0))
    }
}

/// Mutable state of one run.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub w: DenseVector,
    /// Gradient estimate used by the next step (SARAH, L-SVRG).
    pub v: DenseVector,
    /// L-SVRG anchor.
    pub z: DenseVector,
    /// Full gradient at `z`.
    pub anchor_grad: DenseVector,
    pub precond: Option<PrecondState>,
    /// Adam first and second moments.
    pub moment1: DenseVector,
    pub moment2: DenseVector,
    pub t: u64,
    /// Component-gradient-equivalent evaluations so far.
    pub evals: u64,
}

impl OptimizerState {
    pub fn preconditioner(&self) -> ClippedDiagonal {
        match &self.precond {
            Some(state) => state.clip(),
            None => ClippedDiagonal::identity(self.w.len()),
        }
    }
}

/// SARAH recursion on minibatch `batch`: `v + ∇f_B(w_new) − ∇f_B(w_old)`.
pub fn sarah_estimate(
    obj: &Objective<'_>,
    v: &[f64],
    w_new: &[f64],
    w_old: &[f64],
    batch: &[usize],
) -> Result<DenseVector> {
    let mut out = obj.grad(w_new, Batch::Indices(batch))?;
    let old = obj.grad(w_old, Batch::Indices(batch))?;
    for ((o, a), b) in out.iter_mut().zip(v).zip(old.iter()) {
        *o += a - b;
    }
    Ok(out)
}

/// L-SVRG estimator on minibatch `batch`: `∇f_B(w) − ∇f_B(z) + ∇P(z)`.
pub fn lsvrg_estimate(
    obj: &Objective<'_>,
    w: &[f64],
    z: &[f64],
    anchor_grad: &[f64],
    batch: &[usize],
) -> Result<DenseVector> {
    let mut out = obj.grad(w, Batch::Indices(batch))?;
    let at_anchor = obj.grad(z, Batch::Indices(batch))?;
    for ((o, a), g) in out.iter_mut().zip(at_anchor.iter()).zip(anchor_grad) {
        *o += g - a;
    }
    Ok(out)
}

/// One optimizer bound to an objective.
pub struct Optimizer<'a> {
    cfg: OptimizerConfig,
    obj: Objective<'a>,
    p: f64,
    precond_batch: usize,
    state: OptimizerState,
    batch_rng: RandomSource,
    precond_batch_rng: RandomSource,
    probe_rng: RandomSource,
    coin_rng: RandomSource,
}

impl<'a> Optimizer<'a> {
    /// Validates the configuration, warms up the preconditioner at `w0`
    /// (scaled runs) and computes `v0 = ∇P(w0)` (SARAH, L-SVRG).
    pub fn new(cfg: OptimizerConfig, obj: Objective<'a>, w0: DenseVector) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = (obj.n(), obj.d());
        if w0.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w0.len(),
            });
        }
        if d == 0 {
            return Err(Error::EmptyDimension);
        }
        if cfg.batch_size > n {
            return Err(Error::InvalidBatch {
                batch: cfg.batch_size,
                n,
            });
        }
        let precond_batch = cfg.precond.batch_size.unwrap_or(cfg.batch_size);
        if cfg.scaled && (precond_batch == 0 || precond_batch > n) {
            return Err(Error::InvalidBatch {
                batch: precond_batch,
                n,
            });
        }

        let seed = cfg.seed;
        let mut this = Optimizer {
            cfg,
            obj,
            p: cfg.resolved_p(n),
            precond_batch,
            state: OptimizerState {
                w: w0.clone(),
                v: DenseVector::zeros(d),
                z: w0,
                anchor_grad: DenseVector::zeros(d),
                precond: None,
                moment1: DenseVector::zeros(d),
                moment2: DenseVector::zeros(d),
                t: 0,
                evals: 0,
            },
            batch_rng: RandomSource::with_counter(seed, Stream::BatchSampling, 0),
            precond_batch_rng: RandomSource::with_counter(seed, Stream::BatchSampling, 1),
            probe_rng: RandomSource::new(seed, Stream::Rademacher),
            coin_rng: RandomSource::new(seed, Stream::CoinFlip),
        };

        if cfg.scaled {
            let pc = cfg.precond;
            let obj = this.obj;
            let w0 = this.state.w.clone();
            let batch_rng = &mut this.precond_batch_rng;
            let state = PrecondState::init(
                |z: &[f64]| {
                    let batch = batch_rng.sample_batch(n, precond_batch)?;
                    obj.hvp(&w0, Batch::Indices(&batch), z)
                },
                &mut this.probe_rng,
                pc.warmup,
                d,
                pc.alpha,
                pc.beta,
                precond_batch,
            )?;
            this.state.evals += 2 * (precond_batch * pc.warmup) as u64;
            this.state.precond = Some(state);
        }

        if cfg.method.uses_probability() {
            let g = this.obj.grad(&this.state.w, Batch::Full)?;
            this.state.evals += n as u64;
            this.state.anchor_grad = g.clone();
            this.state.v = g;
        }
        Ok(this)
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn objective(&self) -> &Objective<'a> {
        &self.obj
    }

    pub fn probability(&self) -> f64 {
        self.p
    }

    pub fn step(&mut self) -> Result<()> {
        match self.cfg.method {
            Method::Sarah => self.sarah_step(),
            Method::Lsvrg => self.lsvrg_step(),
            Method::Sgd => self.sgd_step(),
            Method::Adam => self.adam_step(),
        }?;
        self.state.t += 1;
        Ok(())
    }

    fn precondition(&self, g: &[f64]) -> DenseVector {
        match &self.state.precond {
            Some(state) => state.clip().apply_inverse(g),
            None => DenseVector::from_vec(g.to_vec()),
        }
    }

    fn sample_batch(&mut self) -> Result<Vec<usize>> {
        self.batch_rng
            .sample_batch(self.obj.n(), self.cfg.batch_size)
    }

    /// Refreshes `D` at the current iterate on an independent batch.
    fn update_precond(&mut self) -> Result<()> {
        let Some(state) = self.state.precond.as_mut() else {
            return Ok(());
        };
        let batch = self
            .precond_batch_rng
            .sample_batch(self.obj.n(), self.precond_batch)?;
        let obj = self.obj;
        let w = &self.state.w;
        state.update(
            |z: &[f64]| obj.hvp(w, Batch::Indices(&batch), z),
            &mut self.probe_rng,
        )?;
        self.state.evals += 2 * batch.len() as u64;
        Ok(())
    }

    fn take_step(&mut self, direction: &[f64]) -> DenseVector {
        let scaled = self.precondition(direction);
        let previous = self.state.w.clone();
        self.state.w.axpy(-self.cfg.eta, &scaled);
        previous
    }

    fn sarah_step(&mut self) -> Result<()> {
        let v = self.state.v.clone();
        let w_old = self.take_step(&v);
        if self.coin_rng.coin(self.p)? {
            self.state.v = self.obj.grad(&self.state.w, Batch::Full)?;
            self.state.evals += self.obj.n() as u64;
        } else {
            let batch = self.sample_batch()?;
            self.state.v = sarah_estimate(&self.obj, &v, &self.state.w, &w_old, &batch)?;
            self.state.evals += 2 * batch.len() as u64;
        }
        self.update_precond()
    }

    fn lsvrg_step(&mut self) -> Result<()> {
        let v = self.state.v.clone();
        let w_old = self.take_step(&v);
        // keep the anchor with probability p
        if !self.coin_rng.coin(self.p)? {
            self.state.anchor_grad = self.obj.grad(&w_old, Batch::Full)?;
            self.state.z = w_old;
            self.state.evals += self.obj.n() as u64;
        }
        let batch = self.sample_batch()?;
        self.state.v = lsvrg_estimate(
            &self.obj,
            &self.state.w,
            &self.state.z,
            &self.state.anchor_grad,
            &batch,
        )?;
        self.state.evals += 2 * batch.len() as u64;
        self.update_precond()
    }

    fn sgd_step(&mut self) -> Result<()> {
        let batch = self.sample_batch()?;
        let g = self.obj.grad(&self.state.w, Batch::Indices(&batch))?;
        self.state.evals += batch.len() as u64;
        self.take_step(&g);
        self.update_precond()
    }

    fn adam_step(&mut self) -> Result<()> {
        let batch = self.sample_batch()?;
        let g = self.obj.grad(&self.state.w, Batch::Indices(&batch))?;
        self.state.evals += batch.len() as u64;

        let (b1, b2) = (self.cfg.adam_beta1, self.cfg.adam_beta2);
        let k = (self.state.t + 1) as i32;
        let c1 = 1.0 - b1.powi(k);
        let c2 = 1.0 - b2.powi(k);
        let s = &mut self.state;
        for j in 0..g.len() {
            s.moment1[j] = b1 * s.moment1[j] + (1.0 - b1) * g[j];
            s.moment2[j] = b2 * s.moment2[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = s.moment1[j] / c1;
            let v_hat = s.moment2[j] / c2;
            s.w[j] -= self.cfg.eta * m_hat / (v_hat.sqrt() + self.cfg.adam_eps);
        }
        Ok(())
    }
}

/// Full-dataset metrics at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub effective_passes: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub error: f64,
}

impl MetricRow {
    pub fn measure(obj: &Objective<'_>, w: &[f64], effective_passes: f64) -> Result<Self> {
        Ok(MetricRow {
            effective_passes,
            loss: obj.value(w, Batch::Full)?,
            grad_norm_sq: obj.grad(w, Batch::Full)?.norm_sq(),
            error: obj.classification_error(w)?,
        })
    }

    fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad_norm_sq.is_finite() && self.error.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        }
    }
}

impl FromStr for RunStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "completed" => Ok(RunStatus::Completed),
            "diverged" => Ok(RunStatus::Diverged),
            other => Err(Error::InvalidConfig(format!("unknown status {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<MetricRow>,
    pub status: RunStatus,
}

/// What a step observer sees after initialization (`t = 0`) and after
/// every step.
pub struct StepView<'s> {
    pub t: u64,
    pub evals: u64,
    pub w: &'s DenseVector,
    pub precond: Option<&'s PrecondState>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    /// Output point, drawn uniformly from the recorded iterates.
    pub w_hat: DenseVector,
    pub steps: u64,
    pub evals: u64,
}

/// Runs from `w0 = 0` until `budget` effective passes are spent, recording
/// full metrics whenever the evaluation count crosses a multiple of `n`.
///
/// The first row is measured at `w0` before any work is charged. A row
/// records `evals / n` at the crossing, so rows are strictly increasing but
/// not necessarily integral.
pub fn run(
    cfg: OptimizerConfig,
    obj: Objective<'_>,
    budget: f64,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunOutput> {
    let n = obj.n() as f64;
    let w0 = DenseVector::zeros(obj.d());
    let mut rows = vec![MetricRow::measure(&obj, &w0, 0.0)?];
    let mut iterates = vec![w0.clone()];

    let mut opt = Optimizer::new(cfg, obj, w0)?;
    let limit = budget * n;
    let mut next_boundary = 1.0f64;

    let diverged = |rows: Vec<MetricRow>, passes: f64| Error::Diverged {
        passes,
        partial: Box::new(Trajectory {
            rows,
            status: RunStatus::Diverged,
        }),
    };

    let mut notify = |opt: &Optimizer<'_>| {
        let s = opt.state();
        observer(&StepView {
            t: s.t,
            evals: s.evals,
            w: &s.w,
            precond: s.precond.as_ref(),
        })
    };
    notify(&opt);

    loop {
        let evals = opt.state().evals as f64;
        let passes = evals / n;
        if passes >= next_boundary {
            let row = MetricRow::measure(&obj, &opt.state().w, passes)?;
            if !row.is_finite() {
                return Err(diverged(rows, passes));
            }
            rows.push(row);
            iterates.push(opt.state().w.clone());
            next_boundary = passes.floor() + 1.0;
        }
        if evals >= limit {
            break;
        }
        opt.step()?;
        if !opt.state().w.is_finite() || !opt.state().v.is_finite() {
            return Err(diverged(rows, opt.state().evals as f64 / n));
        }
        notify(&opt);
    }

    let mut pick = RandomSource::with_counter(cfg.seed, Stream::CoinFlip, 1);
    let w_hat = iterates[pick.index(iterates.len())].clone();
    Ok(RunOutput {
        trajectory: Trajectory {
            rows,
            status: RunStatus::Completed,
        },
        w_hat,
        steps: opt.state().t,
        evals: opt.state().evals,
    })
}

/// Step-size bounds from the convergence theory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsizeDiagnostics {
    /// `α / (L (1 + sqrt((1 − p)/p)))`.
    pub eta_bar_sarah: f64,
    /// `min{α/(4L), sqrt(p) α/(sqrt(24) L), p^{2/3}/144^{2/3} · α/L}`.
    pub eta_bar_lsvrg: f64,
    /// Under the PL condition, when `μ` is known:
    /// `min{pΓ/(6μ), α/(4L), (p/6)^{1/2} α/L, (p/6)^{2/3} α/L}`.
    pub eta_bar_lsvrg_pl: Option<f64>,
    /// Whether the configured step respects the bound for its method.
    /// Always false for SGD and Adam, which have no bound here.
    pub within_theory: bool,
}

pub fn theoretical_stepsize(
    params: &TheoryParams,
    alpha: f64,
    p: f64,
    method: Method,
    eta: f64,
) -> Result<StepsizeDiagnostics> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if !(params.l_hat > 0.0) {
        return Err(Error::DegenerateSmoothness);
    }
    let l = params.l_hat;
    let ratio = alpha / l;
    let eta_bar_sarah = ratio / (1.0 + ((1.0 - p) / p).sqrt());
    let eta_bar_lsvrg = (ratio / 4.0)
        .min(p.sqrt() * ratio / 24f64.sqrt())
        .min(p.powf(2.0 / 3.0) / 144f64.powf(2.0 / 3.0) * ratio);
    let eta_bar_lsvrg_pl = params.mu.map(|mu| {
        (p * params.gamma / (6.0 * mu))
            .min(ratio / 4.0)
            .min((p / 6.0).sqrt() * ratio)
            .min((p / 6.0).powf(2.0 / 3.0) * ratio)
    });
    let within_theory = match method {
        Method::Sarah => eta <= eta_bar_sarah,
        Method::Lsvrg => eta <= eta_bar_lsvrg,
        Method::Sgd | Method::Adam => false,
    };
    Ok(StepsizeDiagnostics {
        eta_bar_sarah,
        eta_bar_lsvrg,
        eta_bar_lsvrg_pl,
        within_theory,
    })
}
