//! Hutchinson diagonal-Hessian preconditioner.
//!
//! The running estimate `D` is updated with one Rademacher probe per step,
//! `D ← β D + (1 − β) z ⊙ (H_J z)`, and read through the clipped view
//! `D̂_ii = max(α, |D_ii|)`. The unclipped `D` carries the momentum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::rng::RandomSource;

/// Momentum schedule for the diagonal estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BetaMode {
    Constant(f64),
    /// `β_t = 1 − 1/(t + t0 + 1)`: an equal-weight running mean over the
    /// warm-up probes and every probe since.
    Averaging,
}

impl BetaMode {
    pub fn validate(self) -> Result<Self> {
        match self {
            BetaMode::Constant(b) if !(0.0..=1.0).contains(&b) => {
                Err(Error::InvalidConfig(format!("beta {b} outside [0, 1]")))
            }
            mode => Ok(mode),
        }
    }
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaMode::Constant(b) => write!(f, "{b}"),
            BetaMode::Averaging => f.write_str("avg"),
        }
    }
}

impl FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("avg") {
            return Ok(BetaMode::Averaging);
        }
        s.parse::<f64>()
            .map_err(|_| {
                Error::InvalidConfig(format!("beta must be a number or \"avg\", got {s:?}"))
            })
            .and_then(|b| BetaMode::Constant(b).validate())
    }
}

/// One Hutchinson probe: `z ⊙ hvp(z)` for a fresh Rademacher `z`.
pub fn hutchinson_sample<F>(hvp: F, rng: &mut RandomSource, d: usize) -> Result<DenseVector>
where
    F: FnMut(&[f64]) -> Result<DenseVector>,
{
    let z = rng.rademacher(d)?;
    hutchinson_probe(hvp, &z)
}

/// `z ⊙ hvp(z)` for a given sign vector.
pub fn hutchinson_probe<F>(mut hvp: F, z: &[f64]) -> Result<DenseVector>
where
    F: FnMut(&[f64]) -> Result<DenseVector>,
{
    let hz = hvp(z)?;
    if hz.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: hz.len(),
        });
    }
    Ok(hz.hadamard(z))
}

/// Diagonal with every entry at least `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClippedDiagonal {
    entries: DenseVector,
    alpha: f64,
}

impl ClippedDiagonal {
    /// `max(alpha, |d_i|)` entry-wise.
    pub fn clip(diag: &[f64], alpha: f64) -> Self {
        debug_assert!(alpha > 0.0);
        ClippedDiagonal {
            entries: diag.iter().map(|v| v.abs().max(alpha)).collect(),
            alpha,
        }
    }

    /// All entries equal to one.
    pub fn identity(d: usize) -> Self {
        ClippedDiagonal {
            entries: DenseVector::filled(d, 1.0),
            alpha: 1.0,
        }
    }

    pub fn entries(&self) -> &DenseVector {
        &self.entries
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `g_i / D̂_ii`.
    pub fn apply_inverse(&self, g: &[f64]) -> DenseVector {
        debug_assert_eq!(g.len(), self.entries.len());
        g.iter()
            .zip(self.entries.iter())
            .map(|(g, d)| g / d)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecondState {
    diag: DenseVector,
    alpha: f64,
    beta: BetaMode,
    t: u64,
    t0: u64,
    batch_size: usize,
}

impl PrecondState {
    /// Warm-up: `D0` is the mean of `m` probes at the initial point. The
    /// oracle is expected to draw a fresh batch on every call.
    pub fn init<F>(
        mut hvp_at_w0: F,
        rng: &mut RandomSource,
        m: usize,
        d: usize,
        alpha: f64,
        beta: BetaMode,
        batch_size: usize,
    ) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<DenseVector>,
    {
        if m == 0 {
            return Err(Error::InvalidWarmup);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let beta = beta.validate()?;
        let mut diag = DenseVector::zeros(d);
        for _ in 0..m {
            let sample = hutchinson_sample(&mut hvp_at_w0, rng, d)?;
            diag.axpy(1.0, &sample);
        }
        diag.scale(1.0 / m as f64);
        Ok(PrecondState {
            diag,
            alpha,
            beta,
            t: 0,
            t0: m as u64,
            batch_size,
        })
    }

    /// State with a given diagonal, bypassing warm-up.
    pub fn from_diagonal(diag: DenseVector, alpha: f64, beta: BetaMode, t0: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(PrecondState {
            diag,
            alpha,
            beta: beta.validate()?,
            t: 0,
            t0,
            batch_size: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        match self.beta {
            BetaMode::Constant(b) => b,
            BetaMode::Averaging => 1.0 - 1.0 / (self.t + self.t0 + 1) as f64,
        }
    }

    pub fn beta_mode(&self) -> BetaMode {
        self.beta
    }

    /// One momentum step with a fresh probe.
    pub fn update<F>(&mut self, hvp: F, rng: &mut RandomSource) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<DenseVector>,
    {
        let sample = hutchinson_sample(hvp, rng, self.diag.len())?;
        self.absorb(&sample);
        Ok(())
    }

    /// Momentum step with a given probe result.
    pub fn absorb(&mut self, sample: &[f64]) {
        let beta = self.beta();
        for (d, s) in self.diag.iter_mut().zip(sample) {
            *d = beta * *d + (1.0 - beta) * s;
        }
        self.t += 1;
    }

    pub fn clip(&self) -> ClippedDiagonal {
        ClippedDiagonal::clip(&self.diag, self.alpha)
    }

    pub fn raw(&self) -> &DenseVector {
        &self.diag
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn warmup_count(&self) -> u64 {
        self.t0
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}
