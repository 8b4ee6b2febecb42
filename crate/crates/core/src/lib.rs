//! Variance-reduced stochastic optimizers with a Hutchinson diagonal
//! preconditioner, for finite-sum problems `P(w) = (1/n) Σ f_i(w)`.
//!
//! * [`losses`]: logistic and nonlinear-least-squares oracles (value,
//!   gradient, Hessian-vector product, exact Hessian diagonal).
//! * [`preconditioner`]: the clipped Hutchinson diagonal `D̂`.
//! * [`optimizers`]: Scaled SARAH, Scaled L-SVRG, SGD and Adam engines.
//! * [`data`]: LibSVM I/O, label normalization, feature-scale corruption.
//! * [`harness`]: seeded experiments, grid search and trajectory output.
//!
//! Randomness comes from [`rng::RandomSource`], a xoshiro256++ stream keyed
//! by `(seed, purpose, counter)`.

pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod optimizers;
pub mod preconditioner;
pub mod rng;

pub use data::{Dataset, ScalingSpec};
pub use error::{Error, Result};
pub use linalg::{DenseVector, SparseRow};
pub use losses::{Batch, LossKind, Objective, TheoryParams};
pub use optimizers::{Method, OptimizerConfig, PrecondConfig};
pub use preconditioner::{BetaMode, ClippedDiagonal, PrecondState};
pub use rng::{RandomSource, Stream};
