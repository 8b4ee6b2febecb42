mod common;

use common::{dataset_from, max_abs_diff, tiny};
use proptest::prelude::*;
use scaledvr::optimizers::{
    lsvrg_estimate, run, sarah_estimate, theoretical_stepsize, Optimizer, RunStatus,
};
use scaledvr::{
    Batch, BetaMode, Dataset, DenseVector, LossKind, Method, Objective, OptimizerConfig,
    PrecondConfig, RandomSource, Stream, TheoryParams,
};

/// Plain-loop oracles that share nothing with the library but the data.
mod reference {
    use scaledvr::{Dataset, LossKind};

    fn sigma(t: f64) -> f64 {
        1.0 / (1.0 + (-t).exp())
    }

    fn margin(data: &Dataset, i: usize, w: &[f64]) -> f64 {
        let row = data.row(i);
        row.indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &x)| x * w[j])
            .sum()
    }

    fn slope(kind: LossKind, t: f64, y: f64) -> f64 {
        match kind {
            LossKind::Logistic => -y * sigma(-y * t),
            LossKind::Nllsq => {
                let s = sigma(t);
                -2.0 * (y - s) * s * (1.0 - s)
            }
        }
    }

    fn curvature(kind: LossKind, t: f64, y: f64) -> f64 {
        let s = sigma(t);
        match kind {
            LossKind::Logistic => s * (1.0 - s),
            LossKind::Nllsq => {
                let q = s * (1.0 - s);
                2.0 * q * q - 2.0 * (y - s) * q * (1.0 - 2.0 * s)
            }
        }
    }

    pub fn grad(kind: LossKind, data: &Dataset, w: &[f64], batch: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for &i in batch {
            let c = slope(kind, margin(data, i, w), data.label(i));
            let row = data.row(i);
            for (&j, &x) in row.indices().iter().zip(row.values()) {
                g[j] += c * x / batch.len() as f64;
            }
        }
        g
    }

    pub fn full_grad(kind: LossKind, data: &Dataset, w: &[f64]) -> Vec<f64> {
        let all: Vec<usize> = (0..data.n()).collect();
        grad(kind, data, w, &all)
    }

    pub fn hvp(kind: LossKind, data: &Dataset, w: &[f64], batch: &[usize], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        for &i in batch {
            let c = curvature(kind, margin(data, i, w), data.label(i));
            let xv = margin(data, i, v);
            let row = data.row(i);
            for (&j, &x) in row.indices().iter().zip(row.values()) {
                out[j] += c * xv * x / batch.len() as f64;
            }
        }
        out
    }
}

fn objective(data: &Dataset, kind: LossKind) -> Objective<'_> {
    Objective::new(kind, data).unwrap()
}

fn scaled_cfg(method: Method) -> OptimizerConfig {
    OptimizerConfig {
        method,
        scaled: true,
        eta: 0.2,
        p: Some(0.5),
        batch_size: 2,
        precond: PrecondConfig {
            alpha: 1e-3,
            beta: BetaMode::Averaging,
            warmup: 3,
            batch_size: None,
        },
        seed: 11,
        ..OptimizerConfig::default()
    }
}

/// Scaled SARAH / L-SVRG written out step by step.
struct ReferenceRun {
    kind: LossKind,
    w: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
    anchor_grad: Vec<f64>,
    diag: Vec<f64>,
    t: u64,
    evals: u64,
    batch_rng: RandomSource,
    precond_rng: RandomSource,
    probe_rng: RandomSource,
    coin_rng: RandomSource,
}

impl ReferenceRun {
    fn new(cfg: &OptimizerConfig, kind: LossKind, data: &Dataset) -> Self {
        let (n, d) = (data.n(), data.d());
        let mut r = ReferenceRun {
            kind,
            w: vec![0.0; d],
            v: vec![0.0; d],
            z: vec![0.0; d],
            anchor_grad: vec![0.0; d],
            diag: vec![0.0; d],
            t: 0,
            evals: 0,
            batch_rng: RandomSource::with_counter(cfg.seed, Stream::BatchSampling, 0),
            precond_rng: RandomSource::with_counter(cfg.seed, Stream::BatchSampling, 1),
            probe_rng: RandomSource::new(cfg.seed, Stream::Rademacher),
            coin_rng: RandomSource::new(cfg.seed, Stream::CoinFlip),
        };
        let m = cfg.precond.warmup;
        for _ in 0..m {
            let z = r.probe_rng.rademacher(d).unwrap();
            let batch = r.precond_rng.sample_batch(n, cfg.batch_size).unwrap();
            let hz = reference::hvp(kind, data, &r.w, &batch, &z);
            for j in 0..d {
                r.diag[j] += z[j] * hz[j] / m as f64;
            }
            r.evals += 2 * cfg.batch_size as u64;
        }
        r.v = reference::full_grad(kind, data, &r.w);
        r.anchor_grad = r.v.clone();
        r.evals += n as u64;
        r
    }

    fn step(&mut self, cfg: &OptimizerConfig, data: &Dataset) {
        let (n, d) = (data.n(), data.d());
        let alpha = cfg.precond.alpha;
        let p = cfg.p.unwrap();
        let w_old = self.w.clone();
        for j in 0..d {
            self.w[j] -= cfg.eta * self.v[j] / alpha.max(self.diag[j].abs());
        }
        match cfg.method {
            Method::Sarah => {
                if self.coin_rng.coin(p).unwrap() {
                    self.v = reference::full_grad(self.kind, data, &self.w);
                    self.evals += n as u64;
                } else {
                    let b = self.batch_rng.sample_batch(n, cfg.batch_size).unwrap();
                    let g_new = reference::grad(self.kind, data, &self.w, &b);
                    let g_old = reference::grad(self.kind, data, &w_old, &b);
                    for j in 0..d {
                        self.v[j] += g_new[j] - g_old[j];
                    }
                    self.evals += 2 * b.len() as u64;
                }
            }
            Method::Lsvrg => {
                if !self.coin_rng.coin(p).unwrap() {
                    self.z = w_old;
                    self.anchor_grad = reference::full_grad(self.kind, data, &self.z);
                    self.evals += n as u64;
                }
                let b = self.batch_rng.sample_batch(n, cfg.batch_size).unwrap();
                let g_w = reference::grad(self.kind, data, &self.w, &b);
                let g_z = reference::grad(self.kind, data, &self.z, &b);
                self.v = (0..d)
                    .map(|j| g_w[j] - g_z[j] + self.anchor_grad[j])
                    .collect();
                self.evals += 2 * b.len() as u64;
            }
            _ => unreachable!(),
        }
        let batch = self.precond_rng.sample_batch(n, cfg.batch_size).unwrap();
        let z = self.probe_rng.rademacher(d).unwrap();
        let hz = reference::hvp(self.kind, data, &self.w, &batch, &z);
        let beta = match cfg.precond.beta {
            BetaMode::Constant(b) => b,
            BetaMode::Averaging => 1.0 - 1.0 / (self.t + cfg.precond.warmup as u64 + 1) as f64,
        };
        for j in 0..d {
            self.diag[j] = beta * self.diag[j] + (1.0 - beta) * z[j] * hz[j];
        }
        self.evals += 2 * batch.len() as u64;
        self.t += 1;
    }
}

#[test]
fn scaled_sarah_matches_reference() {
    for kind in [LossKind::Logistic, LossKind::Nllsq] {
        let data = tiny(kind);
        let cfg = scaled_cfg(Method::Sarah);
        let mut opt = Optimizer::new(cfg, objective(&data, kind), DenseVector::zeros(3)).unwrap();
        let mut r = ReferenceRun::new(&cfg, kind, &data);
        assert!(max_abs_diff(opt.state().precond.as_ref().unwrap().raw(), &r.diag) < 1e-12);
        for _ in 0..40 {
            opt.step().unwrap();
            r.step(&cfg, &data);
            let s = opt.state();
            assert_eq!(s.evals, r.evals, "{kind}: decisions diverged at t={}", r.t);
            assert!(max_abs_diff(&s.w, &r.w) < 1e-12);
            assert!(max_abs_diff(&s.v, &r.v) < 1e-12);
            assert!(max_abs_diff(s.precond.as_ref().unwrap().raw(), &r.diag) < 1e-12);
        }
    }
}

#[test]
fn scaled_lsvrg_matches_reference() {
    for kind in [LossKind::Logistic, LossKind::Nllsq] {
        let data = tiny(kind);
        let cfg = OptimizerConfig {
            precond: PrecondConfig {
                beta: BetaMode::Constant(0.9),
                ..scaled_cfg(Method::Lsvrg).precond
            },
            ..scaled_cfg(Method::Lsvrg)
        };
        let mut opt = Optimizer::new(cfg, objective(&data, kind), DenseVector::zeros(3)).unwrap();
        let mut r = ReferenceRun::new(&cfg, kind, &data);
        for _ in 0..40 {
            opt.step().unwrap();
            r.step(&cfg, &data);
            let s = opt.state();
            assert_eq!(s.evals, r.evals);
            assert!(max_abs_diff(&s.w, &r.w) < 1e-12);
            assert!(max_abs_diff(&s.z, &r.z) < 1e-12);
            assert!(max_abs_diff(&s.v, &r.v) < 1e-12);
        }
    }
}

#[test]
fn adam_matches_reference() {
    let kind = LossKind::Logistic;
    let data = tiny(kind);
    let cfg = OptimizerConfig {
        method: Method::Adam,
        eta: 0.05,
        batch_size: 2,
        adam_beta1: 0.8,
        adam_beta2: 0.95,
        adam_eps: 1e-6,
        seed: 5,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(cfg, objective(&data, kind), DenseVector::zeros(3)).unwrap();
    let mut rng = RandomSource::with_counter(5, Stream::BatchSampling, 0);
    let (mut w, mut m, mut v) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
    for k in 1..=50 {
        let b = rng.sample_batch(4, 2).unwrap();
        let g = reference::grad(kind, &data, &w, &b);
        for j in 0..3 {
            m[j] = 0.8 * m[j] + 0.2 * g[j];
            v[j] = 0.95 * v[j] + 0.05 * g[j] * g[j];
            let m_hat = m[j] / (1.0 - 0.8f64.powi(k));
            let v_hat = v[j] / (1.0 - 0.95f64.powi(k));
            w[j] -= 0.05 * m_hat / (v_hat.sqrt() + 1e-6);
        }
        opt.step().unwrap();
        assert!(max_abs_diff(&opt.state().w, &w) < 1e-12, "step {k}");
    }
}

#[test]
fn adam_first_step_uses_the_raw_gradient() {
    let data = tiny(LossKind::Logistic);
    for b1 in [0.0, 0.5, 0.9, 0.99] {
        let cfg = OptimizerConfig {
            method: Method::Adam,
            eta: 0.1,
            batch_size: 4,
            adam_beta1: b1,
            adam_eps: 0.0,
            ..OptimizerConfig::default()
        };
        let obj = objective(&data, LossKind::Logistic);
        let g = obj.grad(&[0.0; 3], Batch::Full).unwrap();
        let mut opt = Optimizer::new(cfg, obj, DenseVector::zeros(3)).unwrap();
        opt.step().unwrap();
        // m̂ = g and v̂ = g², so the step is η·sign(g)
        let m_hat = opt.state().moment1[0] / (1.0 - b1);
        assert!((m_hat - g[0]).abs() < 1e-15);
        for j in 0..3 {
            assert!((opt.state().w[j] + 0.1 * g[j].signum()).abs() < 1e-15);
        }
    }
}

#[test]
fn adam_zero_gradient_keeps_iterate() {
    let data = dataset_from(
        &[vec![0.0, 0.0], vec![0.0, 0.0]],
        &[true, false],
        LossKind::Logistic,
    );
    let cfg = OptimizerConfig {
        method: Method::Adam,
        batch_size: 1,
        ..OptimizerConfig::default()
    };
    let w0 = DenseVector::from_vec(vec![0.3, -0.7]);
    let mut opt = Optimizer::new(cfg, objective(&data, LossKind::Logistic), w0.clone()).unwrap();
    for _ in 0..10 {
        opt.step().unwrap();
    }
    assert_eq!(opt.state().w, w0);
}

#[test]
fn sarah_with_certain_refresh_is_gradient_descent() {
    let data = tiny(LossKind::Nllsq);
    let obj = objective(&data, LossKind::Nllsq);
    let cfg = OptimizerConfig {
        p: Some(1.0),
        eta: 0.7,
        batch_size: 2,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(cfg, obj, DenseVector::zeros(3)).unwrap();
    let mut w = vec![0.0; 3];
    for _ in 0..100 {
        let g = obj.grad(&w, Batch::Full).unwrap();
        for j in 0..3 {
            w[j] -= 0.7 * g[j];
        }
        opt.step().unwrap();
        assert!(max_abs_diff(&opt.state().w, &w) <= 1e-14);
        assert!(max_abs_diff(&opt.state().v, &obj.grad(&w, Batch::Full).unwrap()) <= 1e-14);
    }
}

#[test]
fn lsvrg_anchor_is_fixed_when_always_kept() {
    let data = tiny(LossKind::Logistic);
    let cfg = OptimizerConfig {
        method: Method::Lsvrg,
        p: Some(1.0),
        batch_size: 1,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(
        cfg,
        objective(&data, LossKind::Logistic),
        DenseVector::zeros(3),
    )
    .unwrap();
    for _ in 0..50 {
        opt.step().unwrap();
        assert_eq!(opt.state().z.as_slice(), &[0.0; 3]);
    }
    assert_eq!(opt.state().evals, 4 + 50 * 2);
}

#[test]
fn lsvrg_anchor_cache_stays_coherent() {
    let data = tiny(LossKind::Nllsq);
    let obj = objective(&data, LossKind::Nllsq);
    let mut cfg = scaled_cfg(Method::Lsvrg);
    cfg.p = Some(0.3);
    let mut opt = Optimizer::new(cfg, obj, DenseVector::zeros(3)).unwrap();
    let mut moves = 0;
    for _ in 0..60 {
        let z_before = opt.state().z.clone();
        let w_before = opt.state().w.clone();
        opt.step().unwrap();
        let s = opt.state();
        if s.z != z_before {
            moves += 1;
            // the anchor moves to the iterate the step started from
            assert_eq!(s.z, w_before);
        }
        assert_eq!(s.anchor_grad, obj.grad(&s.z, Batch::Full).unwrap());
    }
    assert!(moves > 20, "anchor moved {moves} times");
}

#[test]
fn evaluation_accounting() {
    let data = tiny(LossKind::Logistic);
    let (n, b, m) = (4u64, 2u64, 3u64);
    for method in [Method::Sarah, Method::Lsvrg, Method::Sgd] {
        for scaled in [false, true] {
            let cfg = OptimizerConfig {
                scaled,
                ..scaled_cfg(method)
            };
            let mut opt = Optimizer::new(
                cfg,
                objective(&data, LossKind::Logistic),
                DenseVector::zeros(3),
            )
            .unwrap();
            let probe = if scaled { 2 * b } else { 0 };
            let init = if method == Method::Sgd { 0 } else { n } + probe * m;
            assert_eq!(opt.state().evals, init);
            for _ in 0..30 {
                let before = opt.state().evals;
                opt.step().unwrap();
                let spent = opt.state().evals - before - probe;
                let allowed: &[u64] = match method {
                    Method::Sarah => &[n, 2 * b],
                    Method::Lsvrg => &[2 * b, n + 2 * b],
                    _ => &[b],
                };
                assert!(allowed.contains(&spent), "{method} spent {spent}");
            }
        }
    }
}

#[test]
fn stepsize_examples() {
    let params = TheoryParams::new(2.0, 9);
    let d = theoretical_stepsize(&params, 0.5, 1.0, Method::Sarah, 0.25).unwrap();
    assert_eq!(d.eta_bar_sarah, 0.25);
    assert!(d.within_theory);
    let expected = 0.25
        * (0.25f64)
            .min(1.0 / 24f64.sqrt())
            .min(1.0 / 144f64.powf(2.0 / 3.0));
    assert!((d.eta_bar_lsvrg - expected).abs() < 1e-16);
    assert_eq!(d.eta_bar_lsvrg_pl, None);

    let unit = TheoryParams::new(1.0, 1);
    let d = theoretical_stepsize(&unit, 1.0, 0.5, Method::Sarah, 0.6).unwrap();
    assert!((d.eta_bar_sarah - 0.5).abs() < 1e-15);
    assert!(!d.within_theory);
    let d = theoretical_stepsize(&unit, 1.0, 0.5, Method::Adam, 1e-9).unwrap();
    assert!(!d.within_theory);
}

fn small_problem() -> Dataset {
    let raw = scaledvr::data::gaussian_classification(60, 4, 2.0, 8).unwrap();
    scaledvr::data::normalize_labels(&raw, LossKind::Logistic).unwrap()
}

#[test]
fn budget_exhausted_by_setup_keeps_the_origin() {
    let data = small_problem();
    let cfg = OptimizerConfig {
        batch_size: 10,
        ..OptimizerConfig::default()
    };
    let out = run(cfg, objective(&data, LossKind::Logistic), 1.0, &mut |_| {}).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.w_hat.as_slice(), &[0.0; 4]);
    let rows = &out.trajectory.rows;
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].effective_passes, 0.0);
    assert_eq!(rows[1].effective_passes, 1.0);
    assert_eq!(rows[0].loss, rows[1].loss);
}

#[test]
fn runs_are_reproducible() {
    let data = small_problem();
    for method in [Method::Sarah, Method::Lsvrg, Method::Sgd, Method::Adam] {
        let cfg = OptimizerConfig {
            method,
            scaled: method != Method::Adam,
            eta: 0.05,
            batch_size: 8,
            precond: PrecondConfig {
                warmup: 5,
                ..PrecondConfig::default()
            },
            seed: 21,
            ..OptimizerConfig::default()
        };
        let a = run(cfg, objective(&data, LossKind::Logistic), 4.0, &mut |_| {}).unwrap();
        let b = run(cfg, objective(&data, LossKind::Logistic), 4.0, &mut |_| {}).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.w_hat, b.w_hat);
        assert_eq!(a.trajectory.status, RunStatus::Completed);
        let passes: Vec<f64> = a
            .trajectory
            .rows
            .iter()
            .map(|r| r.effective_passes)
            .collect();
        assert!(passes.windows(2).all(|w| w[0] < w[1]));
        assert!(*passes.last().unwrap() >= 4.0);
    }
}

#[test]
fn huge_step_reports_divergence_with_partial_trajectory() {
    let data = small_problem();
    let cfg = OptimizerConfig {
        eta: f64::MAX,
        batch_size: 8,
        ..OptimizerConfig::default()
    };
    match run(cfg, objective(&data, LossKind::Logistic), 20.0, &mut |_| {}) {
        Err(scaledvr::Error::Diverged { partial, .. }) => {
            assert_eq!(partial.status, RunStatus::Diverged);
            assert!(!partial.rows.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.trajectory)),
    }
}

#[test]
fn misconfigured_optimizers_are_rejected() {
    let data = tiny(LossKind::Logistic);
    let obj = objective(&data, LossKind::Logistic);
    let w0 = DenseVector::zeros(3);
    let too_big = OptimizerConfig {
        batch_size: 5,
        ..OptimizerConfig::default()
    };
    assert!(Optimizer::new(too_big, obj, w0.clone()).is_err());
    let no_warmup = OptimizerConfig {
        precond: PrecondConfig {
            warmup: 0,
            ..PrecondConfig::default()
        },
        ..scaled_cfg(Method::Sarah)
    };
    assert!(matches!(
        Optimizer::new(no_warmup, obj, w0.clone()),
        Err(scaledvr::Error::InvalidWarmup)
    ));
    let scaled_adam = OptimizerConfig {
        method: Method::Adam,
        ..scaled_cfg(Method::Sarah)
    };
    assert!(Optimizer::new(scaled_adam, obj, w0).is_err());
}

fn subsets(n: usize, b: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == b)
        .map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn lsvrg_estimate_is_unbiased(
        (kind, x, signs) in common::instance(16, 5),
        w in common::vector(5, 1.5),
        z in common::vector(5, 1.5),
        b in 1usize..=3,
    ) {
        let data = dataset_from(&x, &signs, kind);
        let obj = objective(&data, kind);
        let (n, d) = (data.n(), data.d());
        let b = b.min(n);
        let (w, z) = (&w[..d], &z[..d]);
        let anchor = obj.grad(z, Batch::Full).unwrap();
        let all = subsets(n, b);
        let mut mean = vec![0.0; d];
        for batch in &all {
            let v = lsvrg_estimate(&obj, w, z, &anchor, batch).unwrap();
            for j in 0..d {
                mean[j] += v[j] / all.len() as f64;
            }
        }
        let truth = obj.grad(w, Batch::Full).unwrap();
        prop_assert!(max_abs_diff(&mean, &truth) <= 1e-12);
    }

    #[test]
    fn lsvrg_estimate_at_anchor_is_exact(
        (kind, x, signs) in common::instance(12, 4),
        z in common::vector(4, 1.5),
        pick in any::<u64>(),
    ) {
        let data = dataset_from(&x, &signs, kind);
        let obj = objective(&data, kind);
        let z = &z[..data.d()];
        let anchor = obj.grad(z, Batch::Full).unwrap();
        let batch = [pick as usize % data.n()];
        let v = lsvrg_estimate(&obj, z, z, &anchor, &batch).unwrap();
        prop_assert!(max_abs_diff(&v, &anchor) <= 1e-15);
    }

    #[test]
    fn sarah_recursion_with_equal_points_keeps_estimate(
        (kind, x, signs) in common::instance(12, 4),
        w in common::vector(4, 1.5),
        v in common::vector(4, 1.0),
    ) {
        let data = dataset_from(&x, &signs, kind);
        let obj = objective(&data, kind);
        let d = data.d();
        let out = sarah_estimate(&obj, &v[..d], &w[..d], &w[..d], &[0]).unwrap();
        prop_assert!(max_abs_diff(&out, &v[..d]) <= 1e-15);
    }
}
