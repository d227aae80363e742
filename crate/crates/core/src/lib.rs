//! Covariance alignment: recover the unknown feature permutation relating two
//! zero-mean Gaussian samples `X ~ N(0, Σ)` and `Y ~ N(0, Σ^{π*})`.
//!
//! Estimators:
//!
//! * [`gw::gw_estimate`]: entropic Gromov–Wasserstein over the Birkhoff
//!   polytope, rounded to a permutation by linear assignment.
//! * [`qmle::qmle_estimate`]: the quasi maximum likelihood estimator
//!   `argmin_π ⟨Σ̂_Y, (Σ̂_X^π)^{-1}⟩`, by exhaustive or 2-swap local search.
//! * [`spectral::spectral_estimate`]: Fiedler-vector seriation baseline for
//!   Robinson-structured covariances.
//!
//! [`instances`] generates ground truth, [`harness`] runs trials and sweeps,
//! and [`verify`] holds randomized checks of the inequalities the estimators
//! rely on.

pub mod assignment;
pub mod error;
pub mod gw;
pub mod harness;
pub mod instances;
pub mod io;
pub mod linalg;
pub mod model;
pub mod qmle;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Permutation, SymMatrix};
pub use model::{AlignmentInstance, SampleSize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
