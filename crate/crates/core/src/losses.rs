//! Finite-sum loss oracles for generalized linear models.
//!
//! Both losses have the form `f_i(w) = phi(x_iᵀw, y_i)`, so every oracle
//! reduces to the scalar profile `phi` and its first two derivatives in the
//! margin `t = x_iᵀw`:
//!
//! * gradient: `phi'(t) · x_i`
//! * Hessian: `phi''(t) · x_i x_iᵀ` (rank one), hence
//!   `Hv = phi''(t) (x_iᵀv) x_i` and `diag(H) = phi''(t) · x_i ⊙ x_i`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::DenseVector;

/// Which samples an oracle averages over.
#[derive(Clone, Copy, Debug)]
pub enum Batch<'a> {
    Full,
    Indices(&'a [usize]),
}

impl<'a> Batch<'a> {
    fn len(&self, n: usize) -> usize {
        match self {
            Batch::Full => n,
            Batch::Indices(idx) => idx.len(),
        }
    }

    fn for_each(&self, n: usize, mut f: impl FnMut(usize)) {
        match self {
            Batch::Full => (0..n).for_each(&mut f),
            Batch::Indices(idx) => idx.iter().copied().for_each(&mut f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `log(1 + exp(-y t))` with `y ∈ {-1, +1}`.
    Logistic,
    /// `(y - σ(t))²` with `y ∈ {0, 1}`.
    Nllsq,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Nllsq => "nllsq",
        }
    }

    /// The two label values this loss expects, smaller first.
    pub fn label_domain(self) -> [f64; 2] {
        match self {
            LossKind::Logistic => [-1.0, 1.0],
            LossKind::Nllsq => [0.0, 1.0],
        }
    }

    pub fn is_positive(self, y: f64) -> bool {
        y == self.label_domain()[1]
    }

    /// Per-sample loss at margin `t`.
    pub fn phi(self, t: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => log1p_exp(-y * t),
            LossKind::Nllsq => {
                let r = y - sigmoid(t);
                r * r
            }
        }
    }

    /// First derivative of [`phi`](Self::phi) in `t`.
    pub fn dphi(self, t: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => -y * sigmoid(-y * t),
            LossKind::Nllsq => {
                let s = sigmoid(t);
                -2.0 * (y - s) * s * (1.0 - s)
            }
        }
    }

    /// Second derivative of [`phi`](Self::phi) in `t`.
    pub fn d2phi(self, t: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            LossKind::Nllsq => {
                let s = sigmoid(t);
                let ds = s * (1.0 - s);
                2.0 * ds * ds - 2.0 * (y - s) * ds * (1.0 - 2.0 * s)
            }
        }
    }

    /// `sup_t |phi''(t, y)|` over both labels.
    ///
    /// Logistic peaks at `1/4` at `t = 0`. For NLLSQ the supremum is found
    /// by a grid search over `t ∈ [-50, 50]` with step `1e-3`.
    pub fn curvature_bound(self) -> f64 {
        match self {
            LossKind::Logistic => 0.25,
            LossKind::Nllsq => {
                static BOUND: OnceLock<f64> = OnceLock::new();
                *BOUND.get_or_init(|| {
                    let mut best = 0.0f64;
                    for k in -50_000i32..=50_000 {
                        let t = f64::from(k) * 1e-3;
                        for y in [0.0, 1.0] {
                            best = best.max(LossKind::Nllsq.d2phi(t, y).abs());
                        }
                    }
                    best
                })
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(LossKind::Logistic),
            "nllsq" => Ok(LossKind::Nllsq),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

/// `log(1 + e^t)` without overflow.
pub fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Smoothness constants for a loss on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Upper bound on the smoothness constant of every `f_i`.
    pub l_hat: f64,
    /// `sqrt(d) * l_hat`, the ceiling on preconditioner entries.
    pub gamma: f64,
    /// PL constant, only when supplied by the user.
    pub mu: Option<f64>,
    /// Initial optimality gap, only when supplied by the user.
    pub delta0: Option<f64>,
}

impl TheoryParams {
    pub fn new(l_hat: f64, d: usize) -> Self {
        TheoryParams {
            l_hat,
            gamma: (d as f64).sqrt() * l_hat,
            mu: None,
            delta0: None,
        }
    }
}

/// A loss bound to a dataset whose labels are already in the loss's domain.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    kind: LossKind,
    data: &'a Dataset,
}

impl<'a> Objective<'a> {
    pub fn new(kind: LossKind, data: &'a Dataset) -> Result<Self> {
        let domain = kind.label_domain();
        for (index, &label) in data.labels().iter().enumerate() {
            if label != domain[0] && label != domain[1] {
                return Err(Error::InvalidLabel {
                    index,
                    label,
                    domain: kind.name(),
                });
            }
        }
        Ok(Objective { kind, data })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn d(&self) -> usize {
        self.data.d()
    }

    fn check(&self, w: &[f64], batch: Batch<'_>) -> Result<usize> {
        if w.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: w.len(),
            });
        }
        let n = self.n();
        let len = batch.len(n);
        if len == 0 {
            return Err(Error::InvalidBatch { batch: 0, n });
        }
        if let Batch::Indices(idx) = batch {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidConfig(format!(
                    "sample index {bad} out of range for {n} samples"
                )));
            }
        }
        Ok(len)
    }

    fn margin(&self, i: usize, w: &[f64]) -> f64 {
        self.data.row(i).dot(w)
    }

    pub fn value(&self, w: &[f64], batch: Batch<'_>) -> Result<f64> {
        let len = self.check(w, batch)?;
        let mut total = 0.0;
        batch.for_each(self.n(), |i| {
            total += self.kind.phi(self.margin(i, w), self.data.label(i));
        });
        Ok(total / len as f64)
    }

    pub fn grad(&self, w: &[f64], batch: Batch<'_>) -> Result<DenseVector> {
        let mut out = DenseVector::zeros(self.d());
        self.grad_into(w, batch, &mut out)?;
        Ok(out)
    }

    /// Overwrites `out` with the batch gradient.
    pub fn grad_into(&self, w: &[f64], batch: Batch<'_>, out: &mut [f64]) -> Result<()> {
        let len = self.check(w, batch)?;
        out.iter_mut().for_each(|o| *o = 0.0);
        let scale = 1.0 / len as f64;
        batch.for_each(self.n(), |i| {
            let row = self.data.row(i);
            let g = self.kind.dphi(row.dot(w), self.data.label(i));
            row.axpy_into(g * scale, out);
        });
        Ok(())
    }

    /// Batch Hessian-vector product.
    pub fn hvp(&self, w: &[f64], batch: Batch<'_>, v: &[f64]) -> Result<DenseVector> {
        let len = self.check(w, batch)?;
        if v.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: v.len(),
            });
        }
        let mut out = DenseVector::zeros(self.d());
        let scale = 1.0 / len as f64;
        batch.for_each(self.n(), |i| {
            let row = self.data.row(i);
            let c = self.kind.d2phi(row.dot(w), self.data.label(i));
            row.axpy_into(c * row.dot(v) * scale, &mut out);
        });
        Ok(out)
    }

    /// Exact diagonal of the batch Hessian.
    pub fn hessian_diag(&self, w: &[f64], batch: Batch<'_>) -> Result<DenseVector> {
        let len = self.check(w, batch)?;
        let mut out = DenseVector::zeros(self.d());
        let scale = 1.0 / len as f64;
        batch.for_each(self.n(), |i| {
            let row = self.data.row(i);
            let c = self.kind.d2phi(row.dot(w), self.data.label(i));
            row.axpy_sq_into(c * scale, &mut out);
        });
        Ok(out)
    }

    /// `L_hat = curvature_bound · max_i ‖x_i‖²`.
    pub fn smoothness_bound(&self) -> Result<TheoryParams> {
        let max_norm_sq = self
            .data
            .rows()
            .iter()
            .map(|r| r.norm_sq())
            .fold(0.0, f64::max);
        if max_norm_sq <= 0.0 {
            return Err(Error::DegenerateSmoothness);
        }
        Ok(TheoryParams::new(
            self.kind.curvature_bound() * max_norm_sq,
            self.d(),
        ))
    }

    /// Fraction of misclassified samples. A zero margin predicts the
    /// positive class.
    pub fn classification_error(&self, w: &[f64]) -> Result<f64> {
        self.check(w, Batch::Full)?;
        let wrong = (0..self.n())
            .filter(|&i| {
                let predicted_positive = self.margin(i, w) >= 0.0;
                predicted_positive != self.kind.is_positive(self.data.label(i))
            })
            .count();
        Ok(wrong as f64 / self.n() as f64)
    }
}
