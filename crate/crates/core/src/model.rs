//! The Gaussian observation model, the shared quadratic-assignment objective
//! and the loss metrics used to score permutation estimates.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dims, Error, Result};
use crate::linalg::{cholesky, sym_inv_sqrt, sym_inverse, Permutation, SymMatrix, PIVOT_FLOOR};

/// Observations stored features-by-observations (`d × count`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub observations: DMatrix<f64>,
}

impl Dataset {
    pub fn new(observations: DMatrix<f64>) -> Result<Self> {
        if observations.ncols() == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one observation".into()));
        }
        if observations.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset has non-finite entries".into()));
        }
        Ok(Self { observations })
    }

    pub fn dim(&self) -> usize {
        self.observations.nrows()
    }

    pub fn count(&self) -> usize {
        self.observations.ncols()
    }
}

/// A sample size, or the infinite-sample sentinel where the sample
/// covariance is replaced by the true one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleSize {
    Finite(usize),
    Exact,
}

impl SampleSize {
    pub fn finite(self) -> Option<usize> {
        match self {
            SampleSize::Finite(n) => Some(n),
            SampleSize::Exact => None,
        }
    }
}

impl fmt::Display for SampleSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSize::Finite(n) => write!(f, "{n}"),
            SampleSize::Exact => f.write_str("exact"),
        }
    }
}

impl FromStr for SampleSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("exact") {
            return Ok(SampleSize::Exact);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(SampleSize::Finite(n)),
            _ => Err(Error::InvalidArgument(format!("sample size must be a positive integer or 'exact', got {s:?}"))),
        }
    }
}

impl Serialize for SampleSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SampleSize::Finite(n) => s.serialize_u64(*n as u64),
            SampleSize::Exact => s.serialize_str("exact"),
        }
    }
}

impl<'de> Deserialize<'de> for SampleSize {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(de)? {
            Raw::N(0) => Err(serde::de::Error::custom("sample size must be >= 1")),
            Raw::N(n) => Ok(SampleSize::Finite(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Ground truth plus the two (sample or exact) covariances handed to estimators.
#[derive(Clone, Debug)]
pub struct AlignmentInstance {
    pub sigma: SymMatrix,
    pub pi_star: Permutation,
    pub m: SampleSize,
    pub n: SampleSize,
    pub x_data: Option<Dataset>,
    pub y_data: Option<Dataset>,
    pub sigma_hat_x: SymMatrix,
    pub sigma_hat_y: SymMatrix,
    pub seed: u64,
}

impl AlignmentInstance {
    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    /// The instance with the roles of the two samples exchanged; the
    /// planted permutation becomes `π*⁻¹` and the reference covariance `Σ^{π*}`.
    pub fn swapped(&self) -> Result<Self> {
        Ok(Self {
            sigma: self.sigma.perm_apply(&self.pi_star)?,
            pi_star: self.pi_star.invert(),
            m: self.n,
            n: self.m,
            x_data: self.y_data.clone(),
            y_data: self.x_data.clone(),
            sigma_hat_x: self.sigma_hat_y.clone(),
            sigma_hat_y: self.sigma_hat_x.clone(),
            seed: self.seed,
        })
    }
}

/// Draws `count` observations `L z` with `z` iid standard normal, `L` the
/// Cholesky factor of `sigma` (jittered if `sigma` is only semidefinite).
pub fn sample_gaussian<R: Rng + ?Sized>(sigma: &SymMatrix, count: usize, rng: &mut R) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let d = sigma.dim();
    let factor = sampling_factor(sigma)?;
    let mut z = DMatrix::<f64>::zeros(d, count);
    for k in 0..count {
        for i in 0..d {
            z[(i, k)] = rng.sample(StandardNormal);
        }
    }
    let observations = match factor {
        Some(l) => l * z,
        None => DMatrix::zeros(d, count),
    };
    Dataset::new(observations)
}

/// `None` for the zero matrix.
fn sampling_factor(sigma: &SymMatrix) -> Result<Option<DMatrix<f64>>> {
    if sigma.as_matrix().iter().all(|&x| x == 0.0) {
        return Ok(None);
    }
    match cholesky(sigma) {
        Ok(l) => Ok(Some(l)),
        Err(Error::NotPositiveDefinite(_)) => {
            let d = sigma.dim();
            let jitter = PIVOT_FLOOR * sigma.trace() / d as f64;
            if !(jitter > 0.0) {
                return Err(Error::NotPositiveDefinite("covariance has non-positive trace".into()));
            }
            // The jittered matrix only needs strictly positive pivots.
            let jittered = sigma.add_ridge(jitter);
            let mut l = DMatrix::<f64>::zeros(d, d);
            for j in 0..d {
                let mut pivot = jittered.get(j, j);
                for k in 0..j {
                    pivot -= l[(j, k)] * l[(j, k)];
                }
                if !(pivot > 0.0) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "covariance is not positive semidefinite (pivot {pivot:.3e} at {j} after jitter)"
                    )));
                }
                let ljj = pivot.sqrt();
                l[(j, j)] = ljj;
                for i in (j + 1)..d {
                    let mut s = jittered.get(i, j);
                    for k in 0..j {
                        s -= l[(i, k)] * l[(j, k)];
                    }
                    l[(i, j)] = s / ljj;
                }
            }
            Ok(Some(l))
        }
        Err(e) => Err(e),
    }
}

/// Uncentered sample covariance `X Xᵀ / count`.
pub fn sample_covariance(data: &Dataset) -> SymMatrix {
    let x = &data.observations;
    SymMatrix::symmetrized(x * x.transpose() / data.count() as f64)
}

/// Mean-centered sample covariance, for data that is not known to be zero-mean.
pub fn sample_covariance_centered(data: &Dataset) -> SymMatrix {
    let x = &data.observations;
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    SymMatrix::symmetrized(&centered * centered.transpose() / data.count() as f64)
}

/// `Σ_{ij} B[i][j] · M[π(i)][π(j)]`, i.e. `⟨M^π, B⟩`.
pub fn qap_objective(m: &SymMatrix, b: &SymMatrix, pi: &Permutation) -> Result<f64> {
    check_dims(m.dim(), b.dim())?;
    check_dims(m.dim(), pi.len())?;
    let map = pi.as_slice();
    let d = m.dim();
    let mut total = 0.0;
    for j in 0..d {
        let pj = map[j];
        for i in 0..d {
            total += b.get(i, j) * m.get(map[i], pj);
        }
    }
    Ok(total)
}

/// `‖Σ^π̂ − Σ^π*‖_F`.
pub fn frob_loss(sigma: &SymMatrix, pi_hat: &Permutation, pi_star: &Permutation) -> Result<f64> {
    check_dims(pi_hat.len(), pi_star.len())?;
    Ok(sigma.perm_apply(pi_hat)?.sub(&sigma.perm_apply(pi_star)?)?.frobenius_norm())
}

/// `‖(Σ^π*)^{-1/2} (Σ^π̂ − Σ^π*) (Σ^π*)^{-1/2}‖_F`; requires `Σ^π*` positive definite.
pub fn nf_loss(sigma: &SymMatrix, pi_hat: &Permutation, pi_star: &Permutation) -> Result<f64> {
    check_dims(pi_hat.len(), pi_star.len())?;
    let base = sigma.perm_apply(pi_star)?;
    let w = sym_inv_sqrt(&base).map_err(|_| {
        Error::NotPositiveDefinite("normalized Frobenius loss needs a positive definite ground-truth covariance".into())
    })?;
    let delta = sigma.perm_apply(pi_hat)?.sub(&base)?;
    let scaled = w.as_matrix() * delta.as_matrix() * w.as_matrix();
    Ok(crate::linalg::fro(&scaled))
}

/// Number of positions where the two permutations disagree.
pub fn hamming_loss(pi_hat: &Permutation, pi_star: &Permutation) -> Result<usize> {
    check_dims(pi_hat.len(), pi_star.len())?;
    Ok(pi_hat.as_slice().iter().zip(pi_star.as_slice()).filter(|(a, b)| a != b).count())
}

/// `⟨Σ^{π̂⁻¹} − Σ, Σ⁻¹⟩`, taking the identity as ground truth.
pub fn trace_loss(sigma: &SymMatrix, pi_hat: &Permutation) -> Result<f64> {
    let inv = sym_inverse(sigma)?;
    let moved = sigma.perm_apply(&pi_hat.invert())?;
    moved.sub(sigma)?.inner(&inv)
}

/// Profile log-likelihood `−log det(m/(m+n) Σ̂_X + n/(m+n) Σ̂_Y^{π⁻¹}) − 1`.
/// Diagnostic only; the estimators never optimise it.
pub fn profile_loglik(sigma_x: &SymMatrix, sigma_y: &SymMatrix, m: usize, n: usize, pi: &Permutation) -> Result<f64> {
    check_dims(sigma_x.dim(), sigma_y.dim())?;
    let total = (m + n) as f64;
    let pooled = sigma_x
        .scaled(m as f64 / total)
        .add(&sigma_y.perm_apply(&pi.invert())?.scaled(n as f64 / total))?;
    let l = cholesky(&pooled)?;
    let logdet: f64 = 2.0 * (0..pooled.dim()).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(-logdet - 1.0)
}
